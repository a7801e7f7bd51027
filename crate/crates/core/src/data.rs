//! Paired HQ/LQ samples, manifests, and dataset building.
//!
//! Manifest lines are tab-separated: `hq_path`, `lq_path`, `caption`, then
//! any number of `key=value` fields describing the degradation. Relative
//! paths resolve against the manifest's directory. Blank lines and lines
//! starting with `#` are skipped.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::corpus;
use crate::degradation::{degrade, DegradationRecipe};
use crate::error::{Error, Result};
use crate::image_io::{quantize, read_image, write_image};
use crate::numerics::Tensor;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub hq: Tensor,
    pub lq: Tensor,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub hq: PathBuf,
    pub lq: PathBuf,
    pub caption: String,
    pub fields: Vec<(String, String)>,
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(Error::Manifest {
                line: i + 1,
                msg: format!(
                    "expected at least 3 tab-separated fields, found {}",
                    cols.len()
                ),
            });
        }
        let mut fields = Vec::new();
        for kv in &cols[3..] {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Manifest {
                line: i + 1,
                msg: format!("field `{kv}` is not key=value"),
            })?;
            fields.push((k.to_string(), v.to_string()));
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        out.push(ManifestEntry {
            hq: resolve(cols[0]),
            lq: resolve(cols[1]),
            caption: cols[2].to_string(),
            fields,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Manifest {
        line: 0,
        msg: format!("{}: {e}", path.display()),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&text, base)?;
    if entries.is_empty() {
        return Err(Error::Manifest {
            line: 0,
            msg: "manifest lists no samples".into(),
        });
    }
    entries
        .iter()
        .map(|e| {
            Ok(Sample {
                id: e
                    .hq
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("sample")
                    .to_string(),
                hq: read_image(&e.hq)?,
                lq: read_image(&e.lq)?,
                caption: e.caption.clone(),
            })
        })
        .collect()
}

/// Seeded procedural HQ images of side `size` with their captions.
pub fn procedural_hq(count: usize, size: usize, seed: u64) -> Vec<(String, Tensor, String)> {
    (0..count)
        .map(|i| {
            let (img, cap) = corpus::procedural_image(
                rng::derive(seed, &[rng::tag("hq"), i as u64]),
                size,
                size,
            );
            (format!("img{i:04}"), img, cap)
        })
        .collect()
}

/// Degrade each HQ image with a per-sample recipe. Both images are
/// quantized to 8 bits so in-memory samples match what a manifest reloads.
pub fn make_samples(
    hq: &[(String, Tensor, String)],
    recipe: &DegradationRecipe,
) -> Result<Vec<(Sample, String)>> {
    hq.iter()
        .enumerate()
        .map(|(i, (id, img, cap))| {
            let hq = quantize(img)?;
            let (lq, rec) = degrade(&hq, &recipe.for_sample(i as u64))?;
            Ok((
                Sample {
                    id: id.clone(),
                    hq,
                    lq: quantize(&lq)?,
                    caption: cap.clone(),
                },
                rec.to_kv(),
            ))
        })
        .collect()
}

/// Write `hq/`, `lq/` PNGs and `manifest.tsv` under `out_dir`.
pub fn write_dataset(samples: &[(Sample, String)], out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir.join("hq"))?;
    std::fs::create_dir_all(out_dir.join("lq"))?;
    let mut manifest = String::new();
    for (s, record) in samples {
        let hq = format!("hq/{}.png", s.id);
        let lq = format!("lq/{}.png", s.id);
        write_image(&out_dir.join(&hq), &s.hq)?;
        write_image(&out_dir.join(&lq), &s.lq)?;
        let caption = s.caption.replace(['\t', '\n'], " ");
        let _ = write!(manifest, "{hq}\t{lq}\t{caption}");
        for kv in record.split_whitespace() {
            let _ = write!(manifest, "\t{kv}");
        }
        manifest.push('\n');
    }
    let path = out_dir.join("manifest.tsv");
    std::fs::write(&path, manifest)?;
    Ok(path)
}

/// HQ images from a directory (PNG or PPM, sorted by name). A sibling
/// `<stem>.txt` supplies the caption; otherwise it is empty.
pub fn read_hq_dir(dir: &Path) -> Result<Vec<(String, Tensor, String)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| e.to_ascii_lowercase())
                    .as_deref(),
                Some("png" | "ppm")
            )
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("img")
                .to_string();
            let caption = std::fs::read_to_string(p.with_extension("txt"))
                .map(|s| s.lines().next().unwrap_or("").trim().to_string())
                .unwrap_or_default();
            Ok((id, read_image(p)?, caption))
        })
        .collect()
}

//! 8-bit RGB image files. PNG goes through the `image` crate; binary PPM
//! (P6, maxval 255) is read and written directly and round-trips exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn img_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Interleaved RGB bytes → `3×h×w` in `[0, 1]`.
pub fn from_rgb8(h: usize, w: usize, rgb: &[u8]) -> Result<Tensor> {
    if rgb.len() != 3 * h * w {
        return Err(crate::error::invalid(
            "RGB buffer length does not match extents",
        ));
    }
    let n = h * w;
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            out[c * n + i] = rgb[3 * i + c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], out)
}

/// `3×h×w` → interleaved RGB bytes, clamped and rounded.
pub fn to_rgb8(img: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let &[3, h, w] = img.shape() else {
        return Err(crate::error::invalid(format!(
            "expected 3×h×w image, got {:?}",
            img.shape()
        )));
    };
    let n = h * w;
    let d = img.data();
    let mut out = vec![0u8; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            out[3 * i + c] = (d[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok((h, w, out))
}

/// Round every value to the nearest 8-bit level.
pub fn quantize(img: &Tensor) -> Result<Tensor> {
    let (h, w, b) = to_rgb8(img)?;
    from_rgb8(h, w, &b)
}

fn is_ppm(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("ppm")
    )
}

fn parse_ppm(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(img_err(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(img_err(path, "only binary P6 PPM is supported"));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| img_err(path, format!("bad PPM header field `{s}`")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(img_err(
            path,
            format!("PPM maxval {maxval} unsupported (need 255)"),
        ));
    }
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(img_err(path, "truncated PPM pixel data"));
    }
    from_rgb8(h, w, &bytes[pos..pos + need])
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| img_err(path, e.to_string()))?;
    if is_ppm(path) || bytes.starts_with(b"P6") {
        return parse_ppm(path, &bytes);
    }
    let img = image::load_from_memory(&bytes)
        .map_err(|e| img_err(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    from_rgb8(h as usize, w as usize, img.as_raw())
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w, rgb) = to_rgb8(img)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    if is_ppm(path) {
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        out.extend_from_slice(&rgb);
        std::fs::write(path, out)?;
        return Ok(());
    }
    image::save_buffer_with_format(
        path,
        &rgb,
        w as u32,
        h as u32,
        image::ColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| img_err(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_and_png_round_trip_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let img = quantize(&crate::corpus::procedural_image(5, 9, 13).0).unwrap();
        for name in ["a.ppm", "a.png"] {
            let p = dir.path().join(name);
            write_image(&p, &img).unwrap();
            assert_eq!(read_image(&p).unwrap(), img, "{name}");
        }
        let raw = std::fs::read(dir.path().join("a.ppm")).unwrap();
        assert!(raw.starts_with(b"P6\n13 9\n255\n"));
        assert_eq!(raw.len(), 12 + 3 * 9 * 13);
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        std::fs::write(&p, b"P6 # comment\n1 1\n255\n\x00\x80\xff").unwrap();
        let t = read_image(&p).unwrap();
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0, 1.0]);
        std::fs::write(&p, b"P6\n2 2\n255\n\x00").unwrap();
        assert!(read_image(&p).is_err());
        std::fs::write(&p, b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(read_image(&p).is_err());
    }
}

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use dpir::checkpoint::Checkpoint;
use dpir::config::RunConfig;
use dpir::data::{self, Sample};
use dpir::image_io::{read_image, write_image};
use dpir::metrics::MetricOptions;
use dpir::model::DpirModel;
use dpir::pipeline::{self, DpirTrainer, LossLog};

#[derive(Parser)]
#[command(
    name = "dpir",
    version,
    about = "Dual-prompt latent flow image restoration"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// TOML config file; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.batch=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Degrade HQ images into an LQ/HQ dataset with a manifest.
    Dataset {
        /// Directory of HQ images; defaults to `paths.hq_dir`.
        #[arg(long)]
        hq_dir: Option<PathBuf>,
        /// Generate this many procedural HQ images instead of reading a directory.
        #[arg(long)]
        procedural: Option<usize>,
        /// Side length of procedural images.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Output directory; defaults to the manifest's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the visual encoders and the autoencoder.
    TrainAe {
        /// Output checkpoint; defaults to `<out_dir>/ae.ckpt`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the conditioning branch, prompt projectors and backbone.
    TrainDpir {
        /// Autoencoder checkpoint from `train-ae`.
        #[arg(long)]
        ae: Option<PathBuf>,
        /// Continue from a `train-dpir` checkpoint instead.
        #[arg(long, conflicts_with = "ae")]
        resume: Option<PathBuf>,
        /// Output checkpoint; defaults to `<out_dir>/dpir.ckpt`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write the checkpoint every N steps.
        #[arg(long)]
        save_every: Option<usize>,
    },
    /// Restore one LQ image.
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "")]
        caption: String,
        /// Sampler steps; defaults to `flow.sample_steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score paired images (matched by file stem) and write a CSV.
    Eval {
        #[arg(long)]
        restored: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Score the BT.601 luma channel only.
        #[arg(long)]
        y_channel: bool,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var("DPIR_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("DPIR_THREADS=`{v}` is not a number"))?;
        if n > 0 {
            pipeline::init_thread_pool(n)?;
        }
    }
    let cli = Cli::parse();
    let g = &cli.global;
    match cli.cmd {
        Cmd::Dataset {
            hq_dir,
            procedural,
            size,
            out,
        } => {
            let cfg = load_config(g)?;
            let hq = match procedural {
                Some(n) => data::procedural_hq(n, size, cfg.seed),
                None => {
                    let dir = hq_dir.unwrap_or_else(|| cfg.paths.hq_dir.clone());
                    data::read_hq_dir(&dir).with_context(|| format!("reading {}", dir.display()))?
                }
            };
            if hq.is_empty() {
                bail!("no HQ images found");
            }
            let out = out.unwrap_or_else(|| parent_or_dot(&cfg.paths.manifest));
            let samples = data::make_samples(&hq, &cfg.degradation)?;
            let manifest = data::write_dataset(&samples, &out)?;
            info!(
                "wrote {} samples, manifest {}",
                samples.len(),
                manifest.display()
            );
        }
        Cmd::TrainAe { output } => {
            let cfg = load_config(g)?;
            let samples = load_samples(&cfg)?;
            let mut model = DpirModel::new(&cfg)?;
            let log = pipeline::train_ae(&mut model, &samples)?;
            let out = output.unwrap_or_else(|| cfg.paths.out_dir.join("ae.ckpt"));
            ensure_parent(&out)?;
            log.write(&out.with_extension("csv"))?;
            Checkpoint::from_store(&model.store, cfg.to_toml_string()?, 0, None).save(&out)?;
            info!(
                "saved {} (latent scale {:.4})",
                out.display(),
                model.latent_scale()
            );
        }
        Cmd::TrainDpir {
            ae,
            resume,
            output,
            save_every,
        } => {
            let (mut model, mut trainer, cfg) = match resume {
                Some(path) => {
                    let ck = Checkpoint::load(&path)
                        .with_context(|| format!("loading {}", path.display()))?;
                    let cfg = RunConfig::with_overrides(&ck.config_toml, &g.sets)?;
                    let samples = load_samples(&cfg)?;
                    let mut model = DpirModel::new(&cfg)?;
                    let tr = DpirTrainer::resume(&mut model, &samples, &ck)?;
                    info!("resuming at step {}", tr.step);
                    (model, tr, cfg)
                }
                None => {
                    let cfg = load_config(g)?;
                    let path = ae.unwrap_or_else(|| cfg.paths.out_dir.join("ae.ckpt"));
                    let ck = Checkpoint::load(&path)
                        .with_context(|| format!("loading {}", path.display()))?;
                    let samples = load_samples(&cfg)?;
                    let model = pipeline::model_from_ae(&cfg, &ck)?;
                    let tr = DpirTrainer::new(&model, &samples)?;
                    (model, tr, cfg)
                }
            };
            let out = output.unwrap_or_else(|| cfg.paths.out_dir.join("dpir.ckpt"));
            ensure_parent(&out)?;
            let total = cfg.train.dpir_steps;
            let every = save_every.filter(|&n| n > 0).unwrap_or(usize::MAX);
            let mut log = LossLog::default();
            while trainer.step < total {
                let until = trainer.step.saturating_add(every).min(total);
                trainer.train(&mut model, until, &mut log)?;
                trainer.checkpoint(&model)?.save(&out)?;
                if let Some((_, s, l)) = log.rows.last() {
                    info!("step {} loss {l:.5}", s + 1);
                }
            }
            trainer.checkpoint(&model)?.save(&out)?;
            log.write(&out.with_extension("csv"))?;
            info!("saved {}", out.display());
        }
        Cmd::Restore {
            checkpoint,
            input,
            output,
            caption,
            steps,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let cfg = match &g.config {
                Some(p) => RunConfig::load(Some(p), &g.sets)?,
                None => RunConfig::with_overrides(&ck.config_toml, &g.sets)?,
            };
            let mut model = DpirModel::new(&cfg)?;
            model
                .load_tensors(&ck, &[])
                .context("checkpoint does not match the model configuration")?;
            let lq = read_image(&input)?;
            let steps = steps.unwrap_or(cfg.flow.sample_steps);
            let out = pipeline::restore(&model, &lq, &caption, steps, seed)?;
            write_image(&output, &out.image)?;
            info!(
                "restored {} tile(s){} into {}",
                out.tiles,
                if out.fallback {
                    " (single-tile fallback)"
                } else {
                    ""
                },
                output.display()
            );
        }
        Cmd::Eval {
            restored,
            reference,
            output,
            y_channel,
        } => {
            let outs = data::read_hq_dir(&restored)?;
            if outs.is_empty() {
                bail!("no restored images in {}", restored.display());
            }
            let mut pairs = Vec::new();
            for (id, x, _) in outs {
                let path = ["png", "ppm"]
                    .iter()
                    .map(|e| reference.join(format!("{id}.{e}")))
                    .find(|p| p.exists())
                    .with_context(|| format!("no reference image for `{id}`"))?;
                pairs.push((id, x, read_image(&path)?));
            }
            let opts = MetricOptions {
                peak: 1.0,
                y_channel,
            };
            let report = pipeline::evaluate(&pairs, opts)?;
            match output {
                Some(p) => {
                    ensure_parent(&p)?;
                    std::fs::write(&p, report.to_csv())?;
                }
                None => print!("{}", report.to_csv()),
            }
            info!(
                "mean PSNR {:.3} dB, mean SSIM {:.4}",
                report.mean_psnr(),
                report.mean_ssim()
            );
        }
    }
    Ok(())
}

fn load_config(g: &Global) -> Result<RunConfig> {
    Ok(RunConfig::load(g.config.as_deref(), &g.sets)?)
}

fn load_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    data::load_manifest(&cfg.paths.manifest)
        .with_context(|| format!("loading manifest {}", cfg.paths.manifest.display()))
}

fn parent_or_dot(p: &Path) -> PathBuf {
    p.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn ensure_parent(p: &Path) -> Result<()> {
    std::fs::create_dir_all(parent_or_dot(p))?;
    Ok(())
}

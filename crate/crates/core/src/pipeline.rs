//! Training stages, tiled restoration, and evaluation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::autoencoder::{self, hinge_d_loss};
use crate::checkpoint::Checkpoint;
use crate::config::TimeSampling;
use crate::data::Sample;
use crate::degradation::{
    add_gaussian_noise, degrade, gaussian_blur, resize, DegradationRecipe, ResizeMode,
};
use crate::error::{invalid, Error, Result};
use crate::flow::{cfm_loss, euler_sample};
use crate::image_io::quantize;
use crate::lq_cond::AlignmentStats;
use crate::metrics::{MetricOptions, MetricReport};
use crate::model::{DpirModel, PromptTensors, AE_PREFIXES, DPIR_GROUPS};
use crate::numerics::{AdamConfig, AdamState, Tape, Tensor};
use crate::prompt::{self, crop, crop_global_context, EncodedContext, PromptMode, Rect};
use crate::rng;

/// Loss history of one training stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<(String, usize, f32)>,
}

impl LossLog {
    pub fn push(&mut self, stage: &str, step: usize, loss: f32) {
        self.rows.push((stage.to_string(), step, loss));
    }

    pub fn stage(&self, stage: &str) -> Vec<f32> {
        self.rows
            .iter()
            .filter(|r| r.0 == stage)
            .map(|r| r.2)
            .collect()
    }

    /// `stage,step,loss` with LF line endings.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,step,loss\n");
        for (st, step, l) in &self.rows {
            let _ = writeln!(s, "{st},{step},{l:e}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(d)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn check_finite(loss: f32, what: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
            step,
        })
    }
}

pub fn upsample_lq(lq: &Tensor, scale: usize) -> Result<Tensor> {
    let &[_, h, w] = lq.shape() else {
        return Err(invalid("LQ image must be c×h×w"));
    };
    Ok(resize(lq, h * scale, w * scale, ResizeMode::Bicubic)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Crop origin aligned to `align` pixels so that a `size` crop fits.
fn aligned_origin<R: Rng>(extent: usize, size: usize, align: usize, r: &mut R) -> usize {
    let slots = (extent - size) / align + 1;
    r.gen_range(0..slots) * align
}

fn check_samples(samples: &[Sample], scale: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(invalid("no training samples"));
    }
    for s in samples {
        let (hs, ls) = (s.hq.shape(), s.lq.shape());
        if hs.len() != 3 || ls.len() != 3 || hs[1] != ls[1] * scale || hs[2] != ls[2] * scale {
            return Err(invalid(format!(
                "sample `{}`: HQ {hs:?} is not {scale}× LQ {ls:?}",
                s.id
            )));
        }
    }
    Ok(())
}

/// Self-supervised pretraining of the frozen visual encoders.
pub fn pretrain_visual(model: &mut DpirModel, samples: &[Sample], log: &mut LossLog) -> Result<()> {
    let steps = model.config.train.visual_pretrain_steps;
    if steps == 0 {
        return Ok(());
    }
    let res = model.config.prompt.encoder_res;
    let window = model.config.train.patch;
    let batch = model.config.train.ae_batch;
    let lr = model.config.train.visual_lr;
    model.set_trainable(&[prompt::VISUAL_GROUP, prompt::VISUAL_HEAD_GROUP]);
    let mut adam = AdamState::new(AdamConfig::default());
    let seed = model.config.seed;
    for step in 0..steps {
        let mut r = rng::stream(seed, &[rng::tag("visual"), step as u64]);
        let mut tape = Tape::new();
        let mut total = None;
        for _ in 0..batch {
            let s = &samples[r.gen_range(0..samples.len())];
            let (h, w) = (s.hq.shape()[1], s.hq.shape()[2]);
            let win = window.min(h).min(w);
            let rect = Rect {
                y: r.gen_range(0..=h - win),
                x: r.gen_range(0..=w - win),
                h: win,
                w: win,
            };
            let clean = prompt::to_encoder_res(&crop(&s.hq, rect)?, res)?;
            let sigma = r.gen_range(0.0..1.5f32);
            let noise = r.gen_range(0.0..0.05f32);
            let degraded = add_gaussian_noise(&gaussian_blur(&clean, sigma, 5)?, noise, &mut r)?;
            let l = model.visual_heads.loss(
                &mut tape,
                &model.store,
                &model.prompting,
                &degraded,
                &clean,
            )?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let loss = tape.scale(total.expect("batch ≥ 1"), 1.0 / batch as f32);
        let value = tape.value(loss).data()[0];
        check_finite(value, "visual pretraining loss", step)?;
        tape.backward(loss)?;
        model.store.accumulate_grads(&tape);
        let f = model.config.train.lr_factor(step, steps, 0);
        adam.step(
            &mut model.store,
            &[prompt::VISUAL_GROUP, prompt::VISUAL_HEAD_GROUP],
            |_| lr * f,
            Some(1.0),
        )?;
        log.push("visual", step, value);
    }
    Ok(())
}

fn latent_std(model: &DpirModel, samples: &[Sample]) -> Result<f32> {
    let (mut s, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
    for smp in samples.iter().take(16) {
        let z = model.ae.encode_tensor(&model.store, &smp.hq, false)?;
        for &v in z.data() {
            s += v as f64;
            s2 += (v as f64) * (v as f64);
        }
        n += z.len();
    }
    let mean = s / n as f64;
    Ok(((s2 / n as f64 - mean * mean).max(1e-12)).sqrt() as f32)
}

/// Visual pretraining, base autoencoder training (HQ→HQ, L1), latent
/// scale estimation, then encoder-only fine-tuning on LQ→HQ with the
/// perceptual and (after warmup) adversarial terms.
pub fn train_ae(model: &mut DpirModel, samples: &[Sample]) -> Result<LossLog> {
    let mut log = LossLog::default();
    train_ae_base(model, samples, &mut log)?;
    finetune_encoder(model, samples, &mut log)?;
    Ok(log)
}

fn check_ae_samples(cfg: &crate::config::RunConfig, samples: &[Sample]) -> Result<()> {
    check_samples(samples, cfg.degradation.scale)?;
    let (f, crop_size) = (cfg.autoencoder.downsample, cfg.train.ae_crop);
    if crop_size % cfg.degradation.scale != 0 {
        return Err(invalid(format!(
            "ae_crop {crop_size} is not a multiple of the degradation scale"
        )));
    }
    for s in samples {
        let (h, w) = (s.hq.shape()[1], s.hq.shape()[2]);
        if h < crop_size || w < crop_size || h % f != 0 || w % f != 0 {
            return Err(invalid(format!(
                "sample `{}` cannot hold a {crop_size} crop aligned to {f}",
                s.id
            )));
        }
    }
    Ok(())
}

/// Every autoencoder step before encoder fine-tuning: visual pretraining,
/// HQ reconstruction, latent scale, and the base-encoder snapshot.
pub fn train_ae_base(model: &mut DpirModel, samples: &[Sample], log: &mut LossLog) -> Result<()> {
    let cfg = model.config.clone();
    check_ae_samples(&cfg, samples)?;
    pretrain_visual(model, samples, log)?;

    let t = &cfg.train;
    let f = cfg.autoencoder.downsample;
    let crop_size = t.ae_crop;

    if t.ae_pretrain_steps > 0 {
        let groups = [autoencoder::ENCODER, autoencoder::DECODER];
        model.set_trainable(&groups);
        let mut adam = AdamState::new(AdamConfig::default());
        for step in 0..t.ae_pretrain_steps {
            let mut r = rng::stream(cfg.seed, &[rng::tag("ae.pretrain"), step as u64]);
            let mut tape = Tape::new();
            let mut total = None;
            for _ in 0..t.ae_batch {
                let s = &samples[r.gen_range(0..samples.len())];
                let rect = Rect {
                    y: aligned_origin(s.hq.shape()[1], crop_size, f, &mut r),
                    x: aligned_origin(s.hq.shape()[2], crop_size, f, &mut r),
                    h: crop_size,
                    w: crop_size,
                };
                let x = tape.constant(crop(&s.hq, rect)?);
                let z = model.ae.encode(&mut tape, &model.store, x)?;
                let y = model.ae.decode(&mut tape, &model.store, z)?;
                let l = tape.l1(y, x)?;
                total = Some(match total {
                    None => l,
                    Some(a) => tape.add(a, l)?,
                });
            }
            let loss = tape.scale(total.expect("batch ≥ 1"), 1.0 / t.ae_batch as f32);
            let value = tape.value(loss).data()[0];
            check_finite(value, "autoencoder loss", step)?;
            tape.backward(loss)?;
            model.store.accumulate_grads(&tape);
            let lr = t.ae_lr * t.lr_factor(step, t.ae_pretrain_steps, 0);
            adam.step(&mut model.store, &groups, |_| lr, Some(1.0))?;
            log.push("ae_pretrain", step, value);
        }
    }

    if t.ae_pretrain_steps > 0 {
        let std = latent_std(model, samples)?;
        let id = model.ae.latent_scale;
        model.store.tensor_mut(id).data_mut()[0] = 1.0 / std;
    }
    if t.ae_pretrain_steps > 0 || t.ae_finetune_steps > 0 {
        model.ae.snapshot_base(&mut model.store);
    }
    model.set_trainable(&[]);
    Ok(())
}

/// Encoder-only fine-tuning on (upsampled LQ, HQ) crops. Every crop gets a
/// freshly drawn degradation. The discriminator trains alongside once the
/// adversarial weight is active.
pub fn finetune_encoder(
    model: &mut DpirModel,
    samples: &[Sample],
    log: &mut LossLog,
) -> Result<()> {
    let cfg = model.config.clone();
    check_ae_samples(&cfg, samples)?;
    let t = &cfg.train;
    let f = cfg.autoencoder.downsample;
    let crop_size = t.ae_crop;
    if t.ae_finetune_steps > 0 {
        let mut adam_g = AdamState::new(AdamConfig::default());
        let mut adam_d = AdamState::new(AdamConfig::default());
        let weights = t.ae_loss;
        for step in 0..t.ae_finetune_steps {
            model.set_trainable(&[autoencoder::ENCODER]);
            let mut r = rng::stream(cfg.seed, &[rng::tag("ae.finetune"), step as u64]);
            let mut tape = Tape::new();
            let mut total = None;
            let mut pairs = Vec::new();
            for _ in 0..t.ae_batch {
                let i = r.gen_range(0..samples.len());
                let s = &samples[i];
                let rect = Rect {
                    y: aligned_origin(s.hq.shape()[1], crop_size, f, &mut r),
                    x: aligned_origin(s.hq.shape()[2], crop_size, f, &mut r),
                    h: crop_size,
                    w: crop_size,
                };
                let hq = crop(&s.hq, rect)?;
                let recipe = DegradationRecipe {
                    seed: r.gen(),
                    ..cfg.degradation.clone()
                };
                let lq = quantize(&degrade(&hq, &recipe)?.0)?;
                let x_lq = tape.constant(upsample_lq(&lq, cfg.degradation.scale)?);
                let x_hq = tape.constant(hq.clone());
                let (l, rec) = model.ae.finetune_loss(
                    &mut tape,
                    &model.store,
                    Some(&model.prompting.enc1),
                    x_lq,
                    x_hq,
                    step,
                    &weights,
                )?;
                pairs.push((hq, tape.value(rec).clone()));
                total = Some(match total {
                    None => l,
                    Some(a) => tape.add(a, l)?,
                });
            }
            let loss = tape.scale(total.expect("batch ≥ 1"), 1.0 / t.ae_batch as f32);
            let value = tape.value(loss).data()[0];
            check_finite(value, "encoder fine-tuning loss", step)?;
            tape.backward(loss)?;
            model.store.accumulate_grads(&tape);
            let lr = t.ae_finetune_lr * t.lr_factor(step, t.ae_finetune_steps, 0);
            adam_g.step(&mut model.store, &[autoencoder::ENCODER], |_| lr, Some(1.0))?;
            log.push("ae_finetune", step, value);

            if weights.beta_eff(step) > 0.0 {
                model.set_trainable(&[autoencoder::DISC]);
                let mut tape = Tape::new();
                let mut total = None;
                for (real, fake) in pairs {
                    let real = tape.constant(real);
                    let fake = tape.constant(fake);
                    let dr = model.ae.disc.forward(&mut tape, &model.store, real)?;
                    let df = model.ae.disc.forward(&mut tape, &model.store, fake)?;
                    let l = hinge_d_loss(&mut tape, dr, df);
                    total = Some(match total {
                        None => l,
                        Some(a) => tape.add(a, l)?,
                    });
                }
                let loss = tape.scale(total.expect("batch ≥ 1"), 1.0 / t.ae_batch as f32);
                let value = tape.value(loss).data()[0];
                check_finite(value, "discriminator loss", step)?;
                tape.backward(loss)?;
                model.store.accumulate_grads(&tape);
                adam_d.step(
                    &mut model.store,
                    &[autoencoder::DISC],
                    |_| t.disc_lr,
                    Some(1.0),
                )?;
                log.push("disc", step, value);
            }
        }
    }
    model.set_trainable(&[]);
    Ok(())
}

/// Per-image tensors reused by every training step and by restoration.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub caption: String,
    /// Scaled base-encoder latent of the HQ image (training only).
    pub x0: Option<Tensor>,
    /// Scaled E_dr latent of the bicubic-upsampled LQ image.
    pub z_lq: Tensor,
    /// `decode(E_dr(upsampled LQ))`, the source of every prompt patch.
    pub prompt_src: Tensor,
}

pub fn prepare(
    model: &DpirModel,
    lq: &Tensor,
    hq: Option<&Tensor>,
    caption: &str,
) -> Result<Prepared> {
    let up = upsample_lq(lq, model.config.degradation.scale)?;
    let z_lq = model.encode_scaled(&up, false)?;
    let prompt_src = model.decode_scaled(&z_lq)?.map(|v| v.clamp(0.0, 1.0));
    let x0 = hq.map(|h| model.encode_scaled(h, true)).transpose()?;
    Ok(Prepared {
        caption: caption.to_string(),
        x0,
        z_lq,
        prompt_src,
    })
}

fn crop_latent(z: &Tensor, y: usize, x: usize, h: usize, w: usize) -> Result<Tensor> {
    crop(z, Rect { y, x, h, w })
}

/// Frozen-encoder outputs keyed by (image, pixel rect).
#[derive(Default)]
struct ContextCache {
    map: HashMap<(usize, Rect), EncodedContext>,
}

impl ContextCache {
    fn get(
        &mut self,
        model: &DpirModel,
        image: usize,
        src: &Tensor,
        rect: Rect,
    ) -> Result<&EncodedContext> {
        if !self.map.contains_key(&(image, rect)) {
            let p = &model.config.prompt;
            let ctx = crop_global_context(src, rect, p.grid, p.encoder_res)?;
            let enc = model.prompting.encode_context(&model.store, &ctx)?;
            self.map.insert((image, rect), enc);
        }
        Ok(&self.map[&(image, rect)])
    }
}

/// Backbone training state that a checkpoint captures.
#[derive(Clone, Debug)]
pub struct DpirTrainer {
    pub adam: AdamState,
    pub step: usize,
    prepared: Vec<Prepared>,
}

impl DpirTrainer {
    /// Encodes every sample once with the frozen autoencoder.
    pub fn new(model: &DpirModel, samples: &[Sample]) -> Result<Self> {
        check_samples(samples, model.config.degradation.scale)?;
        let f = model.config.autoencoder.downsample;
        let patch = model.config.train.patch;
        for s in samples {
            let (h, w) = (s.hq.shape()[1], s.hq.shape()[2]);
            if h < patch || w < patch || h % f != 0 || w % f != 0 {
                return Err(invalid(format!(
                    "sample `{}` cannot hold a {patch}-pixel training patch",
                    s.id
                )));
            }
        }
        let prepared = samples
            .iter()
            .map(|s| prepare(model, &s.lq, Some(&s.hq), &s.caption))
            .collect::<Result<_>>()?;
        Ok(Self {
            adam: AdamState::new(AdamConfig {
                weight_decay: model.config.train.weight_decay,
                ..AdamConfig::default()
            }),
            step: 0,
            prepared,
        })
    }

    pub fn prepared(&self) -> &[Prepared] {
        &self.prepared
    }

    /// Run until `until` steps have been taken in total, logging each loss.
    pub fn train(&mut self, model: &mut DpirModel, until: usize, log: &mut LossLog) -> Result<()> {
        model.set_trainable(DPIR_GROUPS);
        let mut cache = ContextCache::default();
        while self.step < until {
            let loss = self.step_once(model, &mut cache)?;
            log.push("dpir", self.step, loss);
            self.step += 1;
        }
        model.set_trainable(&[]);
        Ok(())
    }

    /// Loss of the batch for `step` without updating anything.
    pub fn peek_loss(&self, model: &DpirModel, step: usize) -> Result<f32> {
        let mut cache = ContextCache::default();
        let mut tape = Tape::no_grad();
        let loss = self.batch_loss(model, &mut tape, &mut cache, step)?;
        Ok(tape.value(loss).data()[0])
    }

    fn batch_loss(
        &self,
        model: &DpirModel,
        tape: &mut Tape,
        cache: &mut ContextCache,
        step: usize,
    ) -> Result<crate::numerics::Var> {
        let cfg = &model.config;
        let f = cfg.autoencoder.downsample;
        let p = cfg.model.patch_size;
        let tl = cfg.train.patch / f;
        let mode = cfg.prompt.mode;
        let mut r = rng::stream(cfg.seed, &[rng::tag("dpir"), step as u64]);
        let mut total = None;
        for _ in 0..cfg.train.batch {
            let i = r.gen_range(0..self.prepared.len());
            let pr = &self.prepared[i];
            let x0_full = pr.x0.as_ref().expect("training samples carry x0");
            let (hl, wl) = (x0_full.shape()[1], x0_full.shape()[2]);
            let ly = aligned_origin(hl, tl, p, &mut r);
            let lx = aligned_origin(wl, tl, p, &mut r);
            let x0 = crop_latent(x0_full, ly, lx, tl, tl)?;
            let z_lq = crop_latent(&pr.z_lq, ly, lx, tl, tl)?;
            let t = match cfg.flow.t_sampling {
                TimeSampling::Uniform => r.gen_range(0.0..1.0f32),
                TimeSampling::LogitNormal => {
                    let n: f32 = r.sample(StandardNormal);
                    1.0 / (1.0 + (-(cfg.flow.logit_mean + cfg.flow.logit_std * n)).exp())
                }
            };
            let eps = Tensor::randn(x0.shape(), 1.0, &mut r);
            let enc = if mode == PromptMode::TextOnly {
                None
            } else {
                let rect = Rect {
                    y: ly * f,
                    x: lx * f,
                    h: tl * f,
                    w: tl * f,
                };
                Some(cache.get(model, i, &pr.prompt_src, rect)?.clone())
            };
            let prompt =
                model
                    .prompting
                    .build(tape, &model.store, enc.as_ref(), &pr.caption, mode)?;
            let z_t = tape.constant(crate::flow::interpolate(&x0, &eps, t)?);
            let zl = tape.constant(z_lq);
            let cond = model.lq_features(tape, zl)?;
            let v = model.velocity(tape, z_t, t, prompt, Some(cond), None)?;
            let l = cfm_loss(tape, v, &x0, &eps)?;
            total = Some(match total {
                None => l,
                Some(a) => tape.add(a, l)?,
            });
        }
        Ok(tape.scale(total.expect("batch ≥ 1"), 1.0 / cfg.train.batch as f32))
    }

    fn step_once(&mut self, model: &mut DpirModel, cache: &mut ContextCache) -> Result<f32> {
        let step = self.step;
        let mut tape = Tape::new();
        let loss = self.batch_loss(model, &mut tape, cache, step)?;
        let value = tape.value(loss).data()[0];
        check_finite(value, "flow matching loss", step)?;
        tape.backward(loss)?;
        model.store.accumulate_grads(&tape);
        let cfg = &model.config;
        let warm = cfg
            .train
            .lr_factor(step, cfg.train.dpir_steps, cfg.train.warmup_steps);
        let clip = (cfg.train.clip > 0.0).then_some(cfg.train.clip);
        let lrs: HashMap<String, f32> = DPIR_GROUPS
            .iter()
            .map(|g| (g.to_string(), cfg.lr(g) * warm))
            .collect();
        self.adam
            .step(&mut model.store, DPIR_GROUPS, |g| lrs[g], clip)?;
        Ok(value)
    }

    pub fn checkpoint(&self, model: &DpirModel) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(
            &model.store,
            model.config.to_toml_string()?,
            self.step as u64,
            Some(&self.adam),
        ))
    }

    /// Continue from a checkpoint written by [`DpirTrainer::checkpoint`].
    pub fn resume(model: &mut DpirModel, samples: &[Sample], ck: &Checkpoint) -> Result<Self> {
        model.load_tensors(ck, &[])?;
        let mut tr = Self::new(model, samples)?;
        tr.step = ck.global_step as usize;
        if let Some(o) = &ck.optimizer {
            o.apply_to(&mut tr.adam);
        }
        Ok(tr)
    }
}

/// Build a backbone-training model from an autoencoder checkpoint.
pub fn model_from_ae(config: &crate::config::RunConfig, ae_ckpt: &Checkpoint) -> Result<DpirModel> {
    let mut model = DpirModel::new(config)?;
    model.load_tensors(ae_ckpt, AE_PREFIXES)?;
    Ok(model)
}

/// Latent tile origins along one axis: stride shrinks the tile by the
/// overlap fraction and is a multiple of `align`; the last tile is clamped.
pub fn tile_starts(extent: usize, tile: usize, overlap: f32, align: usize) -> Vec<usize> {
    if extent <= tile {
        return vec![0];
    }
    let raw = ((tile as f32) * (1.0 - overlap)).floor() as usize;
    let stride = ((raw / align) * align).max(align);
    let mut v: Vec<usize> = (0..=extent - tile).step_by(stride).collect();
    if *v.last().expect("non-empty") != extent - tile {
        v.push(extent - tile);
    }
    v
}

/// Per-pixel blending weight along one axis: a linear ramp of `ramp`
/// pixels on every side that borders another tile.
fn ramp_weights(len: usize, ramp: usize, ramp_start: bool, ramp_end: bool) -> Vec<f32> {
    (0..len)
        .map(|i| {
            let mut w = 1.0f32;
            if ramp > 0 {
                if ramp_start {
                    w = w.min((i as f32 + 0.5) / ramp as f32);
                }
                if ramp_end {
                    w = w.min((len as f32 - i as f32 - 0.5) / ramp as f32);
                }
            }
            w
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RestoreOutput {
    pub image: Tensor,
    pub tiles: usize,
    /// True when the image is a single tile and the context list falls
    /// back to the local patch.
    pub fallback: bool,
    /// Alignment statistics measured at every sampler step of the first tile.
    pub first_tile_stats: Vec<AlignmentStats>,
}

/// Restore an LQ image. Tiles run in parallel; each tile's noise is drawn
/// from `(seed, tile index)` so the output does not depend on scheduling.
pub fn restore(
    model: &DpirModel,
    lq: &Tensor,
    caption: &str,
    steps: usize,
    seed: u64,
) -> Result<RestoreOutput> {
    let cfg = &model.config;
    let f = cfg.autoencoder.downsample;
    let p = cfg.model.patch_size;
    let &[3, lh, lw] = lq.shape() else {
        return Err(invalid(format!(
            "LQ image must be 3×h×w, got {:?}",
            lq.shape()
        )));
    };
    let (h, w) = (lh * cfg.degradation.scale, lw * cfg.degradation.scale);
    if h % (f * p) != 0 || w % (f * p) != 0 {
        return Err(invalid(format!(
            "upscaled size {h}×{w} must be divisible by {}",
            f * p
        )));
    }
    let pr = prepare(model, lq, None, caption)?;
    let (hl, wl) = (h / f, w / f);
    let tl = cfg.train.patch / f;
    let (th, tw) = (tl.min(hl), tl.min(wl));
    let ys = tile_starts(hl, th, cfg.restore.overlap, p);
    let xs = tile_starts(wl, tw, cfg.restore.overlap, p);
    let tiles: Vec<(usize, usize)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .collect();
    let mode = cfg.prompt.mode;
    let pc = &cfg.prompt;

    let results: Vec<(Tensor, Vec<AlignmentStats>, bool)> = tiles
        .par_iter()
        .enumerate()
        .map(|(k, &(ty, tx))| -> Result<_> {
            let z_lq = crop_latent(&pr.z_lq, ty, tx, th, tw)?;
            let rect = Rect {
                y: ty * f,
                x: tx * f,
                h: th * f,
                w: tw * f,
            };
            let ctx = crop_global_context(&pr.prompt_src, rect, pc.grid, pc.encoder_res)?;
            let fallback = ctx.is_fallback();
            let enc = if mode == PromptMode::TextOnly {
                None
            } else {
                Some(model.prompting.encode_context(&model.store, &ctx)?)
            };
            let prompt: PromptTensors = model.prompt_tensors(enc.as_ref(), caption, mode)?;
            let cond = {
                let mut tape = Tape::no_grad();
                let zl = tape.constant(z_lq);
                let c = model.lq_features(&mut tape, zl)?;
                tape.value(c).clone()
            };
            let mut r = rng::stream(seed, &[rng::tag("restore"), k as u64]);
            let z1 = Tensor::randn(&[cfg.model.latent_channels, th, tw], 1.0, &mut r);
            let mut stats = Vec::new();
            let z0 = euler_sample(
                |z, t, _| {
                    let mut tape = Tape::no_grad();
                    let zv = tape.constant(z.clone());
                    let pv = prompt.on_tape(&mut tape);
                    let cv = tape.constant(cond.clone());
                    let v = model.velocity(&mut tape, zv, t, pv, Some(cv), Some(&mut stats))?;
                    Ok(tape.value(v).clone())
                },
                &z1,
                steps,
            )?;
            Ok((model.decode_scaled(&z0)?, stats, fallback))
        })
        .collect::<Result<_>>()?;

    let mut acc = vec![0.0f64; 3 * h * w];
    let mut wsum = vec![0.0f64; h * w];
    let ramp_y = (th - ys.get(1).copied().unwrap_or(th).min(th)) * f;
    let ramp_x = (tw - xs.get(1).copied().unwrap_or(tw).min(tw)) * f;
    for ((ty, tx), (img, _, _)) in tiles.iter().zip(&results) {
        let (py, px, ph, pw) = (ty * f, tx * f, th * f, tw * f);
        let wy = ramp_weights(ph, ramp_y, py > 0, py + ph < h);
        let wx = ramp_weights(pw, ramp_x, px > 0, px + pw < w);
        let d = img.data();
        for y in 0..ph {
            for x in 0..pw {
                let wgt = (wy[y] * wx[x]) as f64;
                let o = (py + y) * w + px + x;
                wsum[o] += wgt;
                for c in 0..3 {
                    acc[c * h * w + o] += wgt * d[c * ph * pw + y * pw + x] as f64;
                }
            }
        }
    }
    let out: Vec<f32> = acc
        .iter()
        .enumerate()
        .map(|(i, v)| ((v / wsum[i % (h * w)]) as f32).clamp(0.0, 1.0))
        .collect();
    let fallback = results.len() == 1 && results[0].2;
    let first_tile_stats = results.into_iter().next().map(|r| r.1).unwrap_or_default();
    Ok(RestoreOutput {
        image: Tensor::new(&[3, h, w], out)?,
        tiles: tiles.len(),
        fallback,
        first_tile_stats,
    })
}

/// Size the global worker pool; only the first call has an effect.
pub fn init_thread_pool(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| invalid(e.to_string()))
}

/// Bicubic upsampling of the LQ image, clamped to `[0, 1]`.
pub fn bicubic_baseline(lq: &Tensor, scale: usize) -> Result<Tensor> {
    upsample_lq(lq, scale)
}

/// Score `(id, restored, reference)` triples in parallel.
pub fn evaluate(pairs: &[(String, Tensor, Tensor)], opts: MetricOptions) -> Result<MetricReport> {
    let scored: Vec<MetricReport> = pairs
        .par_iter()
        .map(|(id, a, b)| {
            let mut r = MetricReport::default();
            r.evaluate(id.clone(), a, b, opts)?;
            Ok(r)
        })
        .collect::<Result<_>>()?;
    let mut report = MetricReport::default();
    for r in scored {
        report.entries.extend(r.entries);
    }
    Ok(report)
}

//! Deterministic convolutional autoencoder, degradation-robust encoder
//! losses, and a small patch discriminator.
//!
//! Two encoders share one architecture: `ae.encoder` (E_dr, fine-tuned on
//! degraded inputs) and `ae.encoder_base` (a frozen snapshot taken before
//! fine-tuning). The decoder is shared and frozen once base training ends.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_mismatch, Result};
use crate::numerics::{Conv2d, ParamId, ParamStore, Tape, Tensor, Unary, Var};
use crate::prompt::{Rect, VisualEncoder};

pub const ENCODER: &str = "ae.encoder";
pub const ENCODER_BASE: &str = "ae.encoder_base";
pub const DECODER: &str = "ae.decoder";
pub const STATS: &str = "ae.stats";
pub const DISC: &str = "ae.disc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub latent_channels: usize,
    /// Spatial reduction, a power of two.
    pub downsample: usize,
    pub width: usize,
    pub disc_width: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            downsample: 4,
            width: 16,
            disc_width: 16,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels < 4 {
            return Err(invalid("latent_channels must be at least 4"));
        }
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(invalid("downsample must be a power of two ≥ 2"));
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeLossWeights {
    pub alpha: f32,
    pub beta: f32,
    pub gan_warmup_steps: usize,
}

impl Default for AeLossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            gan_warmup_steps: 500,
        }
    }
}

impl AeLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(invalid("loss weights must be non-negative"));
        }
        Ok(())
    }

    /// GAN weight in effect at `step`.
    pub fn beta_eff(&self, step: usize) -> f32 {
        if step < self.gan_warmup_steps {
            0.0
        } else {
            self.beta
        }
    }
}

/// `h + conv(silu(h))`
#[derive(Clone, Debug)]
struct ResConv(Conv2d);

impl ResConv {
    fn new<R: Rng>(
        store: &mut ParamStore,
        group: &str,
        name: &str,
        ch: usize,
        rng: &mut R,
    ) -> Self {
        Self(Conv2d::new(store, group, name, ch, ch, 3, 1, 1, rng))
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let a = tape.silu(h);
        let a = self.0.forward(tape, store, a)?;
        tape.add(h, a)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    conv_in: Conv2d,
    downs: Vec<(Conv2d, ResConv)>,
    conv_out: Conv2d,
}

impl Encoder {
    fn new<R: Rng>(
        store: &mut ParamStore,
        group: &str,
        cfg: &AutoencoderConfig,
        rng: &mut R,
    ) -> Self {
        let w = cfg.width;
        let conv_in = Conv2d::new(
            store,
            group,
            &format!("{group}.conv_in"),
            3,
            w,
            3,
            1,
            1,
            rng,
        );
        let mut ch = w;
        let mut downs = Vec::new();
        for i in 0..cfg.stages() {
            let d = Conv2d::new(
                store,
                group,
                &format!("{group}.down{i}"),
                ch,
                2 * w,
                3,
                2,
                1,
                rng,
            );
            let r = ResConv::new(store, group, &format!("{group}.res{i}"), 2 * w, rng);
            downs.push((d, r));
            ch = 2 * w;
        }
        let conv_out = Conv2d::new(
            store,
            group,
            &format!("{group}.conv_out"),
            ch,
            cfg.latent_channels,
            3,
            1,
            1,
            rng,
        );
        Self {
            conv_in,
            downs,
            conv_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = self.conv_in.forward(tape, store, x)?;
        for (d, r) in &self.downs {
            h = tape.silu(h);
            h = d.forward(tape, store, h)?;
            h = r.forward(tape, store, h)?;
        }
        h = tape.silu(h);
        self.conv_out.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    conv_in: Conv2d,
    res_in: ResConv,
    ups: Vec<(Conv2d, ResConv)>,
    conv_out: Conv2d,
}

impl Decoder {
    fn new<R: Rng>(store: &mut ParamStore, cfg: &AutoencoderConfig, rng: &mut R) -> Self {
        let (w, g) = (cfg.width, DECODER);
        let conv_in = Conv2d::new(
            store,
            g,
            "ae.decoder.conv_in",
            cfg.latent_channels,
            2 * w,
            3,
            1,
            1,
            rng,
        );
        let res_in = ResConv::new(store, g, "ae.decoder.res_in", 2 * w, rng);
        let n = cfg.stages();
        let ups = (0..n)
            .map(|i| {
                let out = if i + 1 == n { w } else { 2 * w };
                let c = Conv2d::new(
                    store,
                    g,
                    &format!("ae.decoder.up{i}"),
                    2 * w,
                    out,
                    3,
                    1,
                    1,
                    rng,
                );
                (
                    c,
                    ResConv::new(store, g, &format!("ae.decoder.res{i}"), out, rng),
                )
            })
            .collect();
        let conv_out = Conv2d::new(store, g, "ae.decoder.conv_out", w, 3, 3, 1, 1, rng);
        Self {
            conv_in,
            res_in,
            ups,
            conv_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let mut h = self.conv_in.forward(tape, store, z)?;
        h = self.res_in.forward(tape, store, h)?;
        for (c, r) in &self.ups {
            h = tape.upsample2x(h)?;
            h = c.forward(tape, store, h)?;
            h = r.forward(tape, store, h)?;
        }
        h = tape.silu(h);
        self.conv_out.forward(tape, store, h)
    }
}

/// Patch discriminator producing a map of realness logits.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new<R: Rng>(store: &mut ParamStore, width: usize, rng: &mut R) -> Self {
        let g = DISC;
        Self {
            convs: vec![
                Conv2d::new(store, g, "ae.disc.conv0", 3, width, 4, 2, 1, rng),
                Conv2d::new(store, g, "ae.disc.conv1", width, 2 * width, 4, 2, 1, rng),
                Conv2d::new(store, g, "ae.disc.conv2", 2 * width, 1, 3, 1, 1, rng),
            ],
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(tape, store, h)?;
            if i < last {
                h = tape.unary(h, Unary::LeakyRelu(0.2));
            }
        }
        Ok(h)
    }
}

/// `mean(relu(1 − real)) + mean(relu(1 + fake))`
pub fn hinge_d_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Var {
    let r = tape.affine(d_real, -1.0, 1.0);
    let r = tape.relu(r);
    let r = tape.mean(r);
    let f = tape.affine(d_fake, 1.0, 1.0);
    let f = tape.relu(f);
    let f = tape.mean(f);
    tape.add(r, f).expect("scalar losses")
}

/// `−mean(D(fake))`
pub fn generator_loss(tape: &mut Tape, d_fake: Var) -> Var {
    let m = tape.mean(d_fake);
    tape.scale(m, -1.0)
}

/// Encoder-resolution tiles covering an `h×w` image; the last tile in each
/// direction is clamped to the border.
pub fn tile_rects(h: usize, w: usize, tile: usize, stride: usize) -> Result<Vec<Rect>> {
    if h < tile || w < tile || stride == 0 {
        return Err(invalid(format!(
            "{h}×{w} image cannot hold a {tile}-pixel tile"
        )));
    }
    let starts = |n: usize| {
        let mut v: Vec<usize> = (0..=n - tile).step_by(stride).collect();
        if *v.last().expect("non-empty") != n - tile {
            v.push(n - tile);
        }
        v
    };
    let mut out = Vec::new();
    for y in starts(h) {
        for x in starts(w) {
            out.push(Rect {
                y,
                x,
                h: tile,
                w: tile,
            });
        }
    }
    Ok(out)
}

fn crop_var(tape: &mut Tape, x: Var, r: Rect) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut idx = Vec::with_capacity(c * r.h * r.w);
    for ch in 0..c {
        for y in r.y..r.y + r.h {
            for xx in r.x..r.x + r.w {
                idx.push((ch * h * w + y * w + xx) as u32);
            }
        }
    }
    tape.gather(x, std::rc::Rc::new(idx), &[c, r.h, r.w])
}

/// Mean squared distance between enc1 hidden states of `a` and `b`,
/// averaged over native-resolution tiles.
pub fn perceptual_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &VisualEncoder,
    a: Var,
    b: Var,
) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(shape_mismatch("perceptual", tape.shape(a), tape.shape(b)));
    }
    let s = tape.shape(a).to_vec();
    let rects = tile_rects(s[1], s[2], enc.res, enc.res)?;
    let mut total: Option<Var> = None;
    for r in &rects {
        let ta = crop_var(tape, a, *r)?;
        let tb = crop_var(tape, b, *r)?;
        let fa = enc.hidden(tape, store, ta)?;
        let fb = enc.hidden(tape, store, tb)?;
        let d = tape.mse(fa, fb)?;
        total = Some(match total {
            None => d,
            Some(t) => tape.add(t, d)?,
        });
    }
    Ok(tape.scale(total.expect("at least one tile"), 1.0 / rects.len() as f32))
}

pub fn perceptual_distance(
    store: &ParamStore,
    enc: &VisualEncoder,
    a: &Tensor,
    b: &Tensor,
) -> Result<f32> {
    let mut tape = Tape::no_grad();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let d = perceptual_on_tape(&mut tape, store, enc, va, vb)?;
    Ok(tape.value(d).data()[0])
}

/// Encoders, decoder, discriminator, and the latent scale factor.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub encoder: Encoder,
    pub encoder_base: Encoder,
    pub decoder: Decoder,
    pub disc: Discriminator,
    /// Multiplier mapping raw latents to roughly unit variance.
    pub latent_scale: ParamId,
}

impl Autoencoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: &AutoencoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(store, ENCODER, config, rng);
        let encoder_base = Encoder::new(store, ENCODER_BASE, config, rng);
        let decoder = Decoder::new(store, config, rng);
        let disc = Discriminator::new(store, config.disc_width, rng);
        let latent_scale = store.add(STATS, "ae.stats.latent_scale", Tensor::ones(&[1]));
        Ok(Self {
            config: config.clone(),
            encoder,
            encoder_base,
            decoder,
            disc,
            latent_scale,
        })
    }

    pub fn check_extents(&self, x: &[usize]) -> Result<()> {
        let f = self.config.downsample;
        match x {
            [3, h, w] if h % f == 0 && w % f == 0 && *h > 0 && *w > 0 => Ok(()),
            s => Err(invalid(format!(
                "image {s:?} is not 3×h×w with extents divisible by {f}"
            ))),
        }
    }

    pub fn scale(&self, store: &ParamStore) -> f32 {
        store.tensor(self.latent_scale).data()[0]
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.check_extents(tape.shape(x))?;
        self.encoder.forward(tape, store, x)
    }

    pub fn encode_base(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.check_extents(tape.shape(x))?;
        self.encoder_base.forward(tape, store, x)
    }

    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let s = tape.shape(z);
        if s.len() != 3 || s[0] != self.config.latent_channels {
            return Err(invalid(format!(
                "latent {s:?} does not have {} channels",
                self.config.latent_channels
            )));
        }
        self.decoder.forward(tape, store, z)
    }

    /// Raw (unscaled) latent of `x` through E_dr or the base encoder.
    pub fn encode_tensor(&self, store: &ParamStore, x: &Tensor, base: bool) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let v = tape.constant(x.clone());
        let z = if base {
            self.encode_base(&mut tape, store, v)?
        } else {
            self.encode(&mut tape, store, v)?
        };
        Ok(tape.value(z).clone())
    }

    pub fn decode_tensor(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let v = tape.constant(z.clone());
        let x = self.decode(&mut tape, store, v)?;
        Ok(tape.value(x).clone())
    }

    /// Copy E_dr weights into the base encoder.
    pub fn snapshot_base(&self, store: &mut ParamStore) {
        let pairs: Vec<(ParamId, ParamId)> = store
            .ids_in_group(ENCODER)
            .filter_map(|id| {
                let name = store.name(id).replacen(ENCODER, ENCODER_BASE, 1);
                store.id(&name).map(|b| (id, b))
            })
            .collect();
        for (src, dst) in pairs {
            let data = store.tensor(src).data().to_vec();
            store.tensor_mut(dst).data_mut().copy_from_slice(&data);
        }
    }

    /// Encoder fine-tuning loss:
    /// `L1(D(E_dr(x_lq)), x_hq) + α·perceptual + β_eff·generator`.
    /// The discriminator is not evaluated while `β_eff = 0`.
    pub fn finetune_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        perceptual: Option<&VisualEncoder>,
        x_lq: Var,
        x_hq: Var,
        step: usize,
        weights: &AeLossWeights,
    ) -> Result<(Var, Var)> {
        if tape.shape(x_lq) != tape.shape(x_hq) {
            return Err(shape_mismatch(
                "ae_finetune_loss",
                tape.shape(x_lq),
                tape.shape(x_hq),
            ));
        }
        let z = self.encode(tape, store, x_lq)?;
        let rec = self.decode(tape, store, z)?;
        let mut loss = tape.l1(rec, x_hq)?;
        if weights.alpha > 0.0 {
            let enc =
                perceptual.ok_or_else(|| invalid("perceptual term needs a visual encoder"))?;
            let p = perceptual_on_tape(tape, store, enc, rec, x_hq)?;
            let p = tape.scale(p, weights.alpha);
            loss = tape.add(loss, p)?;
        }
        let beta = weights.beta_eff(step);
        if beta > 0.0 {
            let d = self.disc.forward(tape, store, rec)?;
            let g = generator_loss(tape, d);
            let g = tape.scale(g, beta);
            loss = tape.add(loss, g)?;
        }
        Ok((loss, rec))
    }
}

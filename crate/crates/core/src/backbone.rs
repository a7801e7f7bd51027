//! Miniature multimodal diffusion transformer.
//!
//! Latent patches and prompt tokens form two streams with their own
//! projections; every block attends jointly over the concatenated sequence
//! and is modulated (shift/scale/gate) by the sum of the timestep embedding
//! and the pooled prompt embedding. The model predicts the velocity field.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{Linear, ParamStore, Tape, Tensor, Var, EPS};

pub const GROUP: &str = "dit";

/// Multiplier applied to `t ∈ [0, 1]` before the sinusoidal features.
pub const TIME_SCALE: f32 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiniDitConfig {
    pub latent_channels: usize,
    pub patch_size: usize,
    pub model_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub prompt_dim: usize,
    pub pooled_dim: usize,
    pub mlp_ratio: usize,
    pub time_freq_dim: usize,
}

impl Default for MiniDitConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            patch_size: 2,
            model_dim: 128,
            num_blocks: 6,
            num_heads: 4,
            prompt_dim: 128,
            pooled_dim: 48,
            mlp_ratio: 4,
            time_freq_dim: 32,
        }
    }
}

impl MiniDitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(invalid(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.num_blocks == 0 || self.patch_size == 0 || self.time_freq_dim % 2 != 0 {
            return Err(invalid(
                "backbone needs ≥1 block, positive patch size, even frequency width",
            ));
        }
        Ok(())
    }

    pub fn patch_width(&self) -> usize {
        self.latent_channels * self.patch_size * self.patch_size
    }
}

/// Gather indices turning `c×h×w` into `[(h/p)·(w/p), c·p·p]`: patches in
/// row-major order, each patch flattened as (channel, dy, dx).
pub fn patch_indices(c: usize, h: usize, w: usize, p: usize) -> Result<Vec<u32>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(invalid(format!("patch size {p} does not divide {h}×{w}")));
    }
    let mut idx = Vec::with_capacity(c * h * w);
    for py in 0..h / p {
        for px in 0..w / p {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push((ch * h * w + (py * p + dy) * w + px * p + dx) as u32);
                    }
                }
            }
        }
    }
    Ok(idx)
}

fn invert(idx: &[u32]) -> Vec<u32> {
    let mut inv = vec![0u32; idx.len()];
    for (i, &j) in idx.iter().enumerate() {
        inv[j as usize] = i as u32;
    }
    inv
}

/// Raw patch tokens of a latent (no projection).
pub fn patchify(tape: &mut Tape, z: Var, p: usize) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    if s.len() != 3 {
        return Err(invalid(format!("patchify expects c×h×w, got {s:?}")));
    }
    let idx = patch_indices(s[0], s[1], s[2], p)?;
    let n = (s[1] / p) * (s[2] / p);
    tape.gather(z, Rc::new(idx), &[n, s[0] * p * p])
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    tape: &mut Tape,
    tokens: Var,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Result<Var> {
    let idx = patch_indices(c, h, w, p)?;
    if tape.value(tokens).len() != idx.len() {
        return Err(invalid("token count does not match latent extents"));
    }
    tape.gather(tokens, Rc::new(invert(&idx)), &[c, h, w])
}

/// Sinusoidal features `[sin(s·t·f_i)…, cos(s·t·f_i)…]` with geometric
/// frequencies `f_i = 10000^(-i/half)`.
pub fn timestep_features(t: f32, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f32).ln() * i as f32 / half as f32).exp();
        let arg = TIME_SCALE * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::from_parts(vec![dim], out)
}

/// Fixed 2-D sin-cos position table `[gh·gw, dim]`.
pub fn position_table(gh: usize, gw: usize, dim: usize) -> Tensor {
    let quarter = dim / 4;
    let mut out = vec![0.0; gh * gw * dim];
    for y in 0..gh {
        for x in 0..gw {
            let row = &mut out[(y * gw + x) * dim..(y * gw + x + 1) * dim];
            for i in 0..quarter {
                let freq = 1.0 / 10000f32.powf(i as f32 / quarter.max(1) as f32);
                row[i] = (y as f32 * freq).sin();
                row[quarter + i] = (y as f32 * freq).cos();
                row[2 * quarter + i] = (x as f32 * freq).sin();
                row[3 * quarter + i] = (x as f32 * freq).cos();
            }
        }
    }
    Tensor::from_parts(vec![gh * gw, dim], out)
}

/// Embedding of `t` followed by a two-layer projection.
#[derive(Clone, Debug)]
pub struct TimestepEmbedding {
    pub freq_dim: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TimestepEmbedding {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, t: f32) -> Result<Var> {
        let f = tape.constant(timestep_features(t, self.freq_dim));
        let h = self.fc1.forward(tape, store, f)?;
        let h = tape.silu(h);
        self.fc2.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
struct StreamWeights {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Option<Linear>,
    mlp1: Option<Linear>,
    mlp2: Option<Linear>,
    /// Emits 6·D (shift, scale, gate for attention and MLP) or 2·D for a
    /// stream that only supplies keys and values.
    modulation: Linear,
}

impl StreamWeights {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &MiniDitConfig,
        kv_only: bool,
        rng: &mut R,
    ) -> Self {
        let d = cfg.model_dim;
        let lin = |store: &mut ParamStore, n: &str, i, o, rng: &mut R| {
            Linear::new(store, GROUP, &format!("{name}.{n}"), i, o, true, rng)
        };
        let q = lin(store, "q", d, d, rng);
        let k = lin(store, "k", d, d, rng);
        let v = lin(store, "v", d, d, rng);
        let (out, mlp1, mlp2) = if kv_only {
            (None, None, None)
        } else {
            (
                Some(lin(store, "out", d, d, rng)),
                Some(lin(store, "mlp1", d, d * cfg.mlp_ratio, rng)),
                Some(lin(store, "mlp2", d * cfg.mlp_ratio, d, rng)),
            )
        };
        let modulation = Linear::zeros(
            store,
            GROUP,
            &format!("{name}.modulation"),
            d,
            if kv_only { 2 * d } else { 6 * d },
        );
        Self {
            q,
            k,
            v,
            out,
            mlp1,
            mlp2,
            modulation,
        }
    }
}

/// Parameters of one joint-attention block.
#[derive(Clone, Debug)]
pub struct DiTBlockParams {
    latent: StreamWeights,
    prompt: StreamWeights,
}

/// Conditioning inputs shared by every block.
#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    /// `[L, prompt_dim]`; `None` when the prompt has no tokens.
    pub tokens: Option<Var>,
    /// `[pooled_dim]`
    pub pooled: Var,
}

/// The diffusion transformer.
#[derive(Clone, Debug)]
pub struct MiniDit {
    pub config: MiniDitConfig,
    pub x_embed: Linear,
    pub ctx_embed: Linear,
    pub time: TimestepEmbedding,
    pub pooled1: Linear,
    pub pooled2: Linear,
    pub blocks: Vec<DiTBlockParams>,
    pub final_modulation: Linear,
    pub final_out: Linear,
}

fn chunks(tape: &mut Tape, v: Var, n: usize) -> Result<Vec<Var>> {
    let d = tape.value(v).len() / n;
    (0..n).map(|i| tape.slice(v, i * d, d)).collect()
}

/// `layer_norm(x)·(1 + scale) + shift`
fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = tape.layer_norm(x, None, None, EPS)?;
    let s1 = tape.affine(scale, 1.0, 1.0);
    let h = tape.mul_row(h, s1)?;
    tape.add_row(h, shift)
}

impl MiniDit {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: &MiniDitConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let x_embed = Linear::new(
            store,
            GROUP,
            "dit.x_embed",
            config.patch_width(),
            d,
            true,
            rng,
        );
        let ctx_embed = Linear::new(
            store,
            GROUP,
            "dit.ctx_embed",
            config.prompt_dim,
            d,
            true,
            rng,
        );
        let time = TimestepEmbedding {
            freq_dim: config.time_freq_dim,
            fc1: Linear::new(
                store,
                GROUP,
                "dit.time.fc1",
                config.time_freq_dim,
                d,
                true,
                rng,
            ),
            fc2: Linear::new(store, GROUP, "dit.time.fc2", d, d, true, rng),
        };
        let pooled1 = Linear::new(
            store,
            GROUP,
            "dit.pooled.fc1",
            config.pooled_dim,
            d,
            true,
            rng,
        );
        let pooled2 = Linear::new(store, GROUP, "dit.pooled.fc2", d, d, true, rng);
        let blocks = (0..config.num_blocks)
            .map(|i| {
                let last = i + 1 == config.num_blocks;
                DiTBlockParams {
                    latent: StreamWeights::new(
                        store,
                        &format!("dit.block{i}.x"),
                        config,
                        false,
                        rng,
                    ),
                    prompt: StreamWeights::new(
                        store,
                        &format!("dit.block{i}.c"),
                        config,
                        last,
                        rng,
                    ),
                }
            })
            .collect();
        let final_modulation = Linear::zeros(store, GROUP, "dit.final.modulation", d, 2 * d);
        let final_out = Linear::zeros(store, GROUP, "dit.final.out", d, config.patch_width());
        Ok(Self {
            config: config.clone(),
            x_embed,
            ctx_embed,
            time,
            pooled1,
            pooled2,
            blocks,
            final_modulation,
            final_out,
        })
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        store.numel(GROUP)
    }

    /// Patch embedding plus the fixed position table.
    pub fn embed_latent(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s.len() != 3 || s[0] != self.config.latent_channels {
            return Err(invalid(format!(
                "latent must be {}×h×w, got {s:?}",
                self.config.latent_channels
            )));
        }
        let p = self.config.patch_size;
        let raw = patchify(tape, z, p)?;
        let x = self.x_embed.forward(tape, store, raw)?;
        let pos = tape.constant(position_table(s[1] / p, s[2] / p, self.config.model_dim));
        tape.add(x, pos)
    }

    /// Per-block conditioning vector `silu(temb(t) + pooled_proj(pooled))`.
    fn conditioning(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t: f32,
        pooled: Var,
    ) -> Result<Var> {
        if tape.shape(pooled) != [self.config.pooled_dim] {
            return Err(invalid(format!(
                "pooled embedding must have width {}, got {:?}",
                self.config.pooled_dim,
                tape.shape(pooled)
            )));
        }
        let te = self.time.forward(tape, store, t)?;
        let p = self.pooled1.forward(tape, store, pooled)?;
        let p = tape.silu(p);
        let p = self.pooled2.forward(tape, store, p)?;
        let y = tape.add(te, p)?;
        Ok(tape.silu(y))
    }

    fn block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        b: &DiTBlockParams,
        x: Var,
        c: Option<Var>,
        y: Var,
    ) -> Result<(Var, Option<Var>)> {
        let heads = self.config.num_heads;
        let xm = b.latent.modulation.forward(tape, store, y)?;
        let xm = chunks(tape, xm, 6)?;
        let hx = modulate(tape, x, xm[0], xm[1])?;
        let qx = b.latent.q.forward(tape, store, hx)?;
        let kx = b.latent.k.forward(tape, store, hx)?;
        let vx = b.latent.v.forward(tape, store, hx)?;
        let n = tape.shape(x)[0];

        let (attn_x, attn_c, cm) = match c {
            None => (tape.attention(qx, kx, vx, heads)?, None, None),
            Some(c) => {
                let cm_all = b.prompt.modulation.forward(tape, store, y)?;
                let kv_only = b.prompt.out.is_none();
                let cm = chunks(tape, cm_all, if kv_only { 2 } else { 6 })?;
                let hc = modulate(tape, c, cm[0], cm[1])?;
                let kc = b.prompt.k.forward(tape, store, hc)?;
                let vc = b.prompt.v.forward(tape, store, hc)?;
                let k = tape.concat_rows(&[kx, kc])?;
                let v = tape.concat_rows(&[vx, vc])?;
                if kv_only {
                    (tape.attention(qx, k, v, heads)?, None, None)
                } else {
                    let qc = b.prompt.q.forward(tape, store, hc)?;
                    let q = tape.concat_rows(&[qx, qc])?;
                    let o = tape.attention(q, k, v, heads)?;
                    let m = tape.shape(c)[0];
                    let ox = tape.slice_rows(o, 0, n)?;
                    let oc = tape.slice_rows(o, n, m)?;
                    (ox, Some(oc), Some(cm))
                }
            }
        };

        let x = residual(tape, store, &b.latent, x, attn_x, &xm)?;
        let c = match (c, attn_c, cm) {
            (Some(c), Some(oc), Some(cm)) => Some(residual(tape, store, &b.prompt, c, oc, &cm)?),
            _ => None,
        };
        Ok((x, c))
    }

    /// Velocity for `z_t`. `inject` receives block 0's latent-token output
    /// and may return an additive term of the same shape.
    pub fn forward<F>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z_t: Var,
        t: f32,
        prompt: PromptVars,
        inject: F,
    ) -> Result<Var>
    where
        F: FnOnce(&mut Tape, Var) -> Result<Option<Var>>,
    {
        let s = tape.shape(z_t).to_vec();
        let x = self.embed_latent(tape, store, z_t)?;
        let c = match prompt.tokens {
            Some(tok) => {
                let ts = tape.shape(tok);
                if ts.len() != 2 || ts[1] != self.config.prompt_dim {
                    return Err(invalid(format!(
                        "prompt tokens must have width {}, got {:?}",
                        self.config.prompt_dim, ts
                    )));
                }
                if ts[0] == 0 {
                    None
                } else {
                    Some(self.ctx_embed.forward(tape, store, tok)?)
                }
            }
            None => None,
        };
        let y = self.conditioning(tape, store, t, prompt.pooled)?;
        let (mut x, mut c) = self.block(tape, store, &self.blocks[0], x, c, y)?;
        if let Some(add) = inject(tape, x)? {
            x = tape.add(x, add)?;
        }
        for b in &self.blocks[1..] {
            let (nx, nc) = self.block(tape, store, b, x, c, y)?;
            x = nx;
            c = nc;
        }
        let fm = self.final_modulation.forward(tape, store, y)?;
        let fm = chunks(tape, fm, 2)?;
        let h = modulate(tape, x, fm[0], fm[1])?;
        let out = self.final_out.forward(tape, store, h)?;
        unpatchify(tape, out, s[0], s[1], s[2], self.config.patch_size)
    }

    /// Latent tokens right before the output head; used to probe the
    /// zero-initialised residual path.
    pub fn trunk(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z_t: Var,
        t: f32,
        prompt: PromptVars,
    ) -> Result<Var> {
        let x = self.embed_latent(tape, store, z_t)?;
        let c = match prompt.tokens {
            Some(tok) if tape.shape(tok)[0] > 0 => Some(self.ctx_embed.forward(tape, store, tok)?),
            _ => None,
        };
        let y = self.conditioning(tape, store, t, prompt.pooled)?;
        let (mut x, mut c) = (x, c);
        for b in &self.blocks {
            let (nx, nc) = self.block(tape, store, b, x, c, y)?;
            x = nx;
            c = nc;
        }
        Ok(x)
    }
}

/// Gated attention residual followed by the gated MLP residual.
fn residual(
    tape: &mut Tape,
    store: &ParamStore,
    w: &StreamWeights,
    x: Var,
    attn: Var,
    m: &[Var],
) -> Result<Var> {
    let (out, mlp1, mlp2) = match (&w.out, &w.mlp1, &w.mlp2) {
        (Some(o), Some(a), Some(b)) => (o, a, b),
        _ => return Ok(x),
    };
    let a = out.forward(tape, store, attn)?;
    let a = tape.mul_row(a, m[2])?;
    let x = tape.add(x, a)?;
    let h = modulate(tape, x, m[3], m[4])?;
    let h = mlp1.forward(tape, store, h)?;
    let h = tape.gelu(h);
    let h = mlp2.forward(tape, store, h)?;
    let h = tape.mul_row(h, m[5])?;
    tape.add(x, h)
}

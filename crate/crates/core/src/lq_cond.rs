//! Low-quality image conditioning: a small convolutional extractor over the
//! LQ latent, feature alignment to the statistics of the backbone's first
//! block, and additive injection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_mismatch, Result};
use crate::numerics::{Conv2d, ParamStore, Tape, Tensor, Unary, Var};

pub const GROUP: &str = "lqc";

/// Granularity of the measured statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    /// One `(μ, σ)` pair over every token and channel of an item.
    #[default]
    PerItem,
    /// One pair per channel, over tokens.
    PerChannel,
}

/// Measured mean and population standard deviation. `PerItem` stats hold
/// one entry; `PerChannel` stats hold one per feature column.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentStats {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl AlignmentStats {
    pub fn scalar(mu: f32, sigma: f32) -> Self {
        Self {
            mu: vec![mu],
            sigma: vec![sigma],
        }
    }
}

fn columns(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        &[n, d] => (n, d),
        _ => (1, t.len()),
    }
}

fn mean_std(vals: impl Iterator<Item = f32> + Clone) -> (f64, f64) {
    let n = vals.clone().count().max(1) as f64;
    let mean = vals.clone().map(|v| v as f64).sum::<f64>() / n;
    let var = vals.map(|v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation of `reference`, accumulated in
/// f64. `PerChannel` treats `reference` as `[tokens, channels]`.
pub fn measure_stats(reference: &Tensor, mode: StatsMode) -> Result<AlignmentStats> {
    if reference.is_empty() {
        return Err(invalid("cannot measure statistics of an empty tensor"));
    }
    match mode {
        StatsMode::PerItem => {
            let (m, s) = mean_std(reference.data().iter().copied());
            Ok(AlignmentStats::scalar(m as f32, s as f32))
        }
        StatsMode::PerChannel => {
            let (n, d) = columns(reference);
            let data = reference.data();
            let (mut mu, mut sigma) = (Vec::with_capacity(d), Vec::with_capacity(d));
            for c in 0..d {
                let (m, s) = mean_std((0..n).map(move |i| data[i * d + c]));
                mu.push(m as f32);
                sigma.push(s as f32);
            }
            Ok(AlignmentStats { mu, sigma })
        }
    }
}

/// `(cond − mean(cond)) / max(std(cond), eps) · σ + μ`.
///
/// The eps guard is a floor rather than an additive term so that a `cond`
/// which already carries the target statistics is a fixed point.
pub fn cross_normalize(cond: &Tensor, stats: &AlignmentStats, eps: f32) -> Result<Tensor> {
    let (n, d) = columns(cond);
    let per_channel = stats.mu.len() > 1;
    if stats.mu.len() != stats.sigma.len() || (per_channel && stats.mu.len() != d) {
        return Err(invalid(format!(
            "stats of width {} do not fit features of width {d}",
            stats.mu.len()
        )));
    }
    let own = measure_stats(
        cond,
        if per_channel {
            StatsMode::PerChannel
        } else {
            StatsMode::PerItem
        },
    )?;
    let data = cond.data();
    let mut out = vec![0.0; data.len()];
    for i in 0..n {
        for c in 0..d {
            let k = if per_channel { c } else { 0 };
            let idx = i * d + c;
            let z = (data[idx] as f64 - own.mu[k] as f64) / (own.sigma[k].max(eps) as f64);
            out[idx] = (z * stats.sigma[k] as f64 + stats.mu[k] as f64) as f32;
        }
    }
    Tensor::new(cond.shape(), out)
}

/// `block0_out + cross_normalize(cond, measure_stats(block0_out))`.
pub fn inject(block0_out: &Tensor, cond: &Tensor, mode: StatsMode, eps: f32) -> Result<Tensor> {
    if block0_out.shape() != cond.shape() {
        return Err(shape_mismatch("inject", block0_out.shape(), cond.shape()));
    }
    let stats = measure_stats(block0_out, mode)?;
    block0_out.zip_map(&cross_normalize(cond, &stats, eps)?, |a, b| a + b)
}

/// Differentiable counterparts of the functions above for `[tokens, d]`
/// features on a tape. Gradients reach both `cond` and the reference.
fn tape_mean_std(tape: &mut Tape, x: Var, mode: StatsMode) -> Result<(Var, Var, Var)> {
    match mode {
        StatsMode::PerItem => {
            let m = tape.mean(x);
            let neg = tape.scale(m, -1.0);
            let centered = tape.add_scalar(x, neg)?;
            let sq = tape.square(centered);
            let var = tape.mean(sq);
            let std = tape.unary(var, Unary::Sqrt);
            Ok((m, std, centered))
        }
        StatsMode::PerChannel => {
            let m = tape.mean_rows(x)?;
            let neg = tape.scale(m, -1.0);
            let centered = tape.add_row(x, neg)?;
            let sq = tape.square(centered);
            let var = tape.mean_rows(sq)?;
            let std = tape.unary(var, Unary::Sqrt);
            Ok((m, std, centered))
        }
    }
}

/// Aligned condition `η(cond)` with statistics measured from `reference`.
/// Returns the aligned features and the measured `(μ, σ)`.
pub fn align_on_tape(
    tape: &mut Tape,
    reference: Var,
    cond: Var,
    mode: StatsMode,
    eps: f32,
) -> Result<(Var, AlignmentStats)> {
    if tape.shape(reference) != tape.shape(cond) {
        return Err(shape_mismatch(
            "inject",
            tape.shape(reference),
            tape.shape(cond),
        ));
    }
    if tape.shape(cond).len() != 2 {
        return Err(invalid("aligned features must be [tokens, channels]"));
    }
    let (mu, sigma, _) = tape_mean_std(tape, reference, mode)?;
    let (_, cs, centered) = tape_mean_std(tape, cond, mode)?;
    let floor = tape.unary(cs, Unary::ClampMin(eps));
    let inv = tape.unary(floor, Unary::Recip);
    let out = match mode {
        StatsMode::PerItem => {
            let z = tape.mul_scalar(centered, inv)?;
            let z = tape.mul_scalar(z, sigma)?;
            tape.add_scalar(z, mu)?
        }
        StatsMode::PerChannel => {
            let z = tape.mul_row(centered, inv)?;
            let z = tape.mul_row(z, sigma)?;
            tape.add_row(z, mu)?
        }
    };
    let stats = AlignmentStats {
        mu: tape.value(mu).data().to_vec(),
        sigma: tape.value(sigma).data().to_vec(),
    };
    Ok((out, stats))
}

/// Three convolutions from the LQ latent to the backbone token grid; the
/// last one has kernel and stride equal to the patch size.
#[derive(Clone, Debug)]
pub struct ConditionExtractor {
    pub latent_channels: usize,
    pub patch_size: usize,
    pub model_dim: usize,
    pub convs: [Conv2d; 3],
}

impl ConditionExtractor {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        latent_channels: usize,
        hidden: usize,
        patch_size: usize,
        model_dim: usize,
        rng: &mut R,
    ) -> Self {
        let convs = [
            Conv2d::new(
                store,
                GROUP,
                "lqc.conv0",
                latent_channels,
                hidden,
                3,
                1,
                1,
                rng,
            ),
            Conv2d::new(store, GROUP, "lqc.conv1", hidden, hidden, 3, 1, 1, rng),
            Conv2d::new(
                store,
                GROUP,
                "lqc.conv2",
                hidden,
                model_dim,
                patch_size,
                patch_size,
                0,
                rng,
            ),
        ];
        Self {
            latent_channels,
            patch_size,
            model_dim,
            convs,
        }
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        store.numel(GROUP)
    }

    /// `[tokens, model_dim]` features in the backbone's row-major patch order.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z_lq: Var) -> Result<Var> {
        let s = tape.shape(z_lq).to_vec();
        let p = self.patch_size;
        if s.len() != 3 || s[0] != self.latent_channels || s[1] % p != 0 || s[2] % p != 0 {
            return Err(invalid(format!(
                "LQ latent {s:?} does not fit {} channels and patch size {p}",
                self.latent_channels
            )));
        }
        let h = self.convs[0].forward(tape, store, z_lq)?;
        let h = tape.silu(h);
        let h = self.convs[1].forward(tape, store, h)?;
        let h = tape.silu(h);
        let h = self.convs[2].forward(tape, store, h)?;
        let n = (s[1] / p) * (s[2] / p);
        let h = tape.reshape(h, &[self.model_dim, n])?;
        tape.transpose(h)
    }
}

/// Default extractor width; kept well under the backbone's size.
pub const HIDDEN: usize = 16;

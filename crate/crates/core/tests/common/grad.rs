//! Central finite-difference gradient checks.
//!
//! The checked scalar is `Σ w ⊙ f(inputs, params)` with a fixed random `w`,
//! accumulated in f64. For every differentiable input and parameter tensor,
//! the difference quotient along random ±1 directions (step h per
//! coordinate) is compared with the tape gradient projected on the same
//! directions. A tensor's error is normalized by the larger of its own
//! directional scale and the module's.

use std::rc::Rc;

use rand::Rng;

use dpir::autoencoder::{Autoencoder, AutoencoderConfig, Discriminator};
use dpir::backbone::{MiniDit, MiniDitConfig, PromptVars};
use dpir::lq_cond::{align_on_tape, ConditionExtractor, StatsMode};
use dpir::numerics::{ParamId, ParamStore, Tape, Tensor, Unary, Var, EPS};
use dpir::prompt::{VisualEncoder, VitConfig};
use dpir::rng;

pub const H: f32 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const SEEDS: u64 = 10;
const DIRECTIONS: usize = 8;
const REDRAWS: usize = 16;

type Build<'a> = &'a dyn Fn(&mut Tape, &ParamStore, &[Var]) -> dpir::Result<Var>;

fn weighted_sum(y: &Tensor, w: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(w.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

fn eval(store: &ParamStore, inputs: &[Tensor], w: &Tensor, f: Build) -> f64 {
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = f(&mut tape, store, &vars).expect("forward");
    weighted_sum(tape.value(y), w)
}

fn rademacher<R: Rng>(len: usize, r: &mut R) -> Vec<f32> {
    (0..len)
        .map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

fn dot(g: &[f32], d: &[f32]) -> f64 {
    g.iter().zip(d).map(|(&a, &b)| a as f64 * b as f64).sum()
}

#[derive(Clone, Copy)]
enum Slot {
    Input(usize),
    Param(ParamId),
}

struct Probe<'a> {
    store: &'a mut ParamStore,
    inputs: Vec<Tensor>,
    w: Tensor,
    f: Build<'a>,
}

impl Probe<'_> {
    fn get(&self, s: Slot) -> Tensor {
        match s {
            Slot::Input(i) => self.inputs[i].clone(),
            Slot::Param(id) => self.store.tensor(id).clone(),
        }
    }

    fn set(&mut self, s: Slot, t: &Tensor) {
        match s {
            Slot::Input(i) => self.inputs[i].data_mut().copy_from_slice(t.data()),
            Slot::Param(id) => self
                .store
                .tensor_mut(id)
                .data_mut()
                .copy_from_slice(t.data()),
        }
    }

    /// Loss with `slot` moved by `step · d`.
    fn moved(&mut self, slot: Slot, d: &[f32], step: f32) -> f64 {
        let orig = self.get(slot);
        let mut t = orig.clone();
        t.data_mut()
            .iter_mut()
            .zip(d)
            .for_each(|(v, &di)| *v += step * di);
        self.set(slot, &t);
        let l = eval(self.store, &self.inputs, &self.w, self.f);
        self.set(slot, &orig);
        l
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Largest error over the input and trainable parameter tensors bound by
/// `f`, with the name of the worst.
///
/// Every tensor is probed along `DIRECTIONS` random ±1 directions, so each
/// coordinate moves by exactly ±h. A tensor's error is normalized by the
/// larger of its own and the module's directional scale, because f32
/// rounding puts a floor under any difference quotient that does not
/// shrink with a tensor's share of the gradient.
///
/// Along a line through a kink of a piecewise-linear activation, the
/// central quotient is off by exactly `(f₊ + f₋ − 2f₀) / 2h`. That term
/// depends on the function alone, so directions where it is not negligible
/// are redrawn. A wrong tape gradient cannot hide behind this.
pub fn check(seed: u64, store: &mut ParamStore, inputs: &[Tensor], f: Build) -> (f64, String) {
    let mut r = rng::stream(seed, &[rng::tag("gradcheck")]);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let y = f(&mut tape, store, &vars).expect("forward");
    let w = Tensor::randn(tape.shape(y), 1.0, &mut r);
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv).expect("same shape");
    let l = tape.sum(p);
    tape.backward(l).expect("backward");

    let mut slots: Vec<(Slot, String, Vec<f32>)> = vars
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let g = tape
                .grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
            (Slot::Input(i), format!("input {i}"), g)
        })
        .collect();
    let mut bound: Vec<(ParamId, Var)> = tape
        .bindings()
        .filter(|(id, _)| store.is_trainable(*id))
        .collect();
    bound.sort_by_key(|b| b.0);
    for (id, v) in bound {
        let g = tape
            .grad(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; store.tensor(id).len()]);
        slots.push((Slot::Param(id), store.name(id).to_string(), g));
    }

    let mut probe = Probe {
        store,
        inputs: inputs.to_vec(),
        w,
        f,
    };
    let l0 = eval(probe.store, &probe.inputs, &probe.w, probe.f);
    let g_norm = slots
        .iter()
        .flat_map(|s| s.2.iter())
        .map(|&g| (g as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let kink_tol = 0.1 * TOL * g_norm;
    let mut per: Vec<(f64, f64, f64)> = Vec::new();
    for (slot, _, g) in &slots {
        let (mut an, mut fd) = (Vec::new(), Vec::new());
        for _ in 0..DIRECTIONS {
            let mut best: Option<(f64, f64, f64)> = None;
            for _ in 0..REDRAWS {
                let d = rademacher(g.len(), &mut r);
                let lp = probe.moved(*slot, &d, H);
                let lm = probe.moved(*slot, &d, -H);
                let h = H as f64;
                let kink = (lp + lm - 2.0 * l0).abs() / (2.0 * h);
                if best.map_or(true, |b| kink < b.0) {
                    best = Some((kink, dot(g, &d), (lp - lm) / (2.0 * h)));
                }
                if kink <= kink_tol {
                    break;
                }
            }
            let (_, a, q) = best.expect("at least one draw");
            an.push(a);
            fd.push(q);
        }
        let diff: Vec<f64> = an.iter().zip(&fd).map(|(a, b)| a - b).collect();
        per.push((norm(&diff), norm(&an), norm(&fd)));
    }
    // Expected directional scale of the module under a joint ±1 direction.
    let module_scale = per.iter().map(|p| p.1 * p.1).sum::<f64>().sqrt();
    let mut worst = (0.0, String::new());
    for ((diff, an, fd), (_, name, _)) in per.iter().zip(&slots) {
        let scale = an.max(*fd).max(module_scale);
        let e = if scale < 1e-12 { 0.0 } else { diff / scale };
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, name.clone());
        }
    }
    worst
}

/// Gaussian values pushed at least `margin` away from zero, so kinks at the
/// origin are never crossed by a ±h step.
pub fn away_from_zero<R: Rng>(shape: &[usize], margin: f32, r: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, r).map(|v| v.signum() * (v.abs() + margin))
}

pub fn positive<R: Rng>(shape: &[usize], r: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, r).map(|v| v.abs() + 0.5)
}

/// Replace every parameter with fresh Gaussian values so that zero-initialised
/// projections carry gradient too.
pub fn randomize(store: &mut ParamStore, std: f32, seed: u64) {
    let mut r = rng::stream(seed, &[rng::tag("randomize")]);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.tensor(id).shape().to_vec();
        let t = Tensor::randn(&shape, std, &mut r);
        store.tensor_mut(id).data_mut().copy_from_slice(t.data());
    }
}

fn plain(seed: u64, inputs: Vec<Tensor>, f: Build) -> (f64, String) {
    check(seed, &mut ParamStore::new(), &inputs, f)
}

fn unary_case(seed: u64, op: Unary) -> (f64, String) {
    let mut r = rng::stream(seed, &[1]);
    let x = match op {
        Unary::Sqrt | Unary::Recip => positive(&[4, 5], &mut r),
        Unary::ClampMin(_) => away_from_zero(&[4, 5], 0.05, &mut r).map(|v| {
            if (v - 0.3).abs() < 0.05 {
                v + 0.1
            } else {
                v
            }
        }),
        _ => away_from_zero(&[4, 5], 0.05, &mut r),
    };
    plain(seed, vec![x], &move |t, _, v| Ok(t.unary(v[0], op)))
}

pub fn randn(shape: &[usize], seed: u64, k: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng::stream(seed, &[k]))
}

pub type Case = (&'static str, fn(u64) -> (f64, String));

pub fn cases() -> Vec<Case> {
    vec![
        ("add", |s| {
            plain(
                s,
                vec![randn(&[3, 4], s, 1), randn(&[3, 4], s, 2)],
                &|t, _, v| t.add(v[0], v[1]),
            )
        }),
        ("sub", |s| {
            plain(
                s,
                vec![randn(&[3, 4], s, 1), randn(&[3, 4], s, 2)],
                &|t, _, v| t.sub(v[0], v[1]),
            )
        }),
        ("mul", |s| {
            plain(
                s,
                vec![randn(&[3, 4], s, 1), randn(&[3, 4], s, 2)],
                &|t, _, v| t.mul(v[0], v[1]),
            )
        }),
        ("add_row", |s| {
            plain(
                s,
                vec![randn(&[3, 4], s, 1), randn(&[4], s, 2)],
                &|t, _, v| t.add_row(v[0], v[1]),
            )
        }),
        ("mul_row", |s| {
            plain(
                s,
                vec![randn(&[3, 4], s, 1), randn(&[4], s, 2)],
                &|t, _, v| t.mul_row(v[0], v[1]),
            )
        }),
        ("add_scalar", |s| {
            plain(
                s,
                vec![randn(&[3, 4], s, 1), randn(&[1], s, 2)],
                &|t, _, v| t.add_scalar(v[0], v[1]),
            )
        }),
        ("mul_scalar", |s| {
            plain(
                s,
                vec![randn(&[3, 4], s, 1), randn(&[1], s, 2)],
                &|t, _, v| t.mul_scalar(v[0], v[1]),
            )
        }),
        ("affine", |s| {
            plain(s, vec![randn(&[3, 4], s, 1)], &|t, _, v| {
                Ok(t.affine(v[0], -1.7, 0.3))
            })
        }),
        ("scale", |s| {
            plain(s, vec![randn(&[3, 4], s, 1)], &|t, _, v| {
                Ok(t.scale(v[0], 2.5))
            })
        }),
        ("relu", |s| unary_case(s, Unary::Relu)),
        ("leaky_relu", |s| unary_case(s, Unary::LeakyRelu(0.2))),
        ("silu", |s| unary_case(s, Unary::Silu)),
        ("gelu", |s| unary_case(s, Unary::Gelu)),
        ("tanh", |s| unary_case(s, Unary::Tanh)),
        ("sigmoid", |s| unary_case(s, Unary::Sigmoid)),
        ("abs", |s| unary_case(s, Unary::Abs)),
        ("square", |s| unary_case(s, Unary::Square)),
        ("sqrt", |s| unary_case(s, Unary::Sqrt)),
        ("recip", |s| unary_case(s, Unary::Recip)),
        ("clamp_min", |s| unary_case(s, Unary::ClampMin(0.3))),
        ("slice_cols", |s| {
            plain(s, vec![randn(&[3, 6], s, 1)], &|t, _, v| {
                t.slice_cols(v[0], 2, 3)
            })
        }),
        ("slice", |s| {
            plain(s, vec![randn(&[12], s, 1)], &|t, _, v| t.slice(v[0], 4, 5))
        }),
        ("matmul", |s| {
            plain(
                s,
                vec![randn(&[3, 5], s, 1), randn(&[5, 4], s, 2)],
                &|t, _, v| t.matmul(v[0], v[1]),
            )
        }),
        ("reshape", |s| {
            plain(
                s,
                vec![randn(&[3, 4], s, 1), randn(&[2, 6], s, 2)],
                &|t, _, v| {
                    let a = t.reshape(v[0], &[2, 6])?;
                    t.mul(a, v[1])
                },
            )
        }),
        ("gather", |s| {
            let idx = Rc::new(vec![3u32, 0, 0, 7, 5, 3]);
            plain(s, vec![randn(&[8], s, 1)], &move |t, _, v| {
                t.gather(v[0], idx.clone(), &[2, 3])
            })
        }),
        ("transpose", |s| {
            plain(
                s,
                vec![randn(&[3, 4], s, 1), randn(&[4, 3], s, 2)],
                &|t, _, v| {
                    let a = t.transpose(v[0])?;
                    t.mul(a, v[1])
                },
            )
        }),
        ("slice_rows", |s| {
            plain(s, vec![randn(&[5, 3], s, 1)], &|t, _, v| {
                t.slice_rows(v[0], 1, 3)
            })
        }),
        ("concat_rows", |s| {
            plain(
                s,
                vec![randn(&[2, 3], s, 1), randn(&[4, 3], s, 2)],
                &|t, _, v| t.concat_rows(&[v[0], v[1], v[0]]),
            )
        }),
        ("sum", |s| {
            plain(s, vec![randn(&[3, 4], s, 1)], &|t, _, v| Ok(t.sum(v[0])))
        }),
        ("mean", |s| {
            plain(s, vec![randn(&[3, 4], s, 1)], &|t, _, v| Ok(t.mean(v[0])))
        }),
        ("mean_rows", |s| {
            plain(s, vec![randn(&[3, 4], s, 1)], &|t, _, v| t.mean_rows(v[0]))
        }),
        ("layer_norm", |s| {
            plain(
                s,
                vec![randn(&[3, 6], s, 1), randn(&[6], s, 2), randn(&[6], s, 3)],
                &|t, _, v| t.layer_norm(v[0], Some(v[1]), Some(v[2]), EPS),
            )
        }),
        ("attention", |s| {
            plain(
                s,
                vec![
                    randn(&[3, 4], s, 1),
                    randn(&[5, 4], s, 2),
                    randn(&[5, 4], s, 3),
                ],
                &|t, _, v| t.attention(v[0], v[1], v[2], 1),
            )
        }),
        ("attention_heads", |s| {
            plain(
                s,
                vec![
                    randn(&[3, 8], s, 1),
                    randn(&[5, 8], s, 2),
                    randn(&[5, 8], s, 3),
                ],
                &|t, _, v| t.attention(v[0], v[1], v[2], 2),
            )
        }),
        ("conv2d", |s| {
            plain(
                s,
                vec![
                    randn(&[2, 5, 5], s, 1),
                    randn(&[3, 2, 3, 3], s, 2),
                    randn(&[3], s, 3),
                ],
                &|t, _, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
            )
        }),
        ("conv2d_strided", |s| {
            plain(
                s,
                vec![randn(&[2, 6, 6], s, 1), randn(&[3, 2, 4, 4], s, 2)],
                &|t, _, v| t.conv2d(v[0], v[1], None, 2, 1),
            )
        }),
        ("avg_pool", |s| {
            plain(s, vec![randn(&[2, 4, 6], s, 1)], &|t, _, v| {
                t.avg_pool(v[0], 2)
            })
        }),
        ("upsample2x", |s| {
            plain(s, vec![randn(&[2, 3, 2], s, 1)], &|t, _, v| {
                t.upsample2x(v[0])
            })
        }),
        ("mse", |s| {
            plain(
                s,
                vec![randn(&[3, 4], s, 1), randn(&[3, 4], s, 2)],
                &|t, _, v| t.mse(v[0], v[1]),
            )
        }),
        ("l1", |s| {
            let a = randn(&[3, 4], s, 1);
            let b = a
                .zip_map(
                    &away_from_zero(&[3, 4], 0.05, &mut rng::stream(s, &[2])),
                    |x, d| x + d,
                )
                .unwrap();
            plain(s, vec![a, b], &|t, _, v| t.l1(v[0], v[1]))
        }),
        ("align_per_item", |s| {
            plain(
                s,
                vec![randn(&[6, 4], s, 1), randn(&[6, 4], s, 2)],
                &|t, _, v| Ok(align_on_tape(t, v[0], v[1], StatsMode::PerItem, EPS)?.0),
            )
        }),
        ("align_per_channel", |s| {
            plain(
                s,
                vec![randn(&[6, 4], s, 1), randn(&[6, 4], s, 2)],
                &|t, _, v| Ok(align_on_tape(t, v[0], v[1], StatsMode::PerChannel, EPS)?.0),
            )
        }),
        ("extractor", extractor_case),
        ("dit_block", dit_case),
        ("autoencoder", ae_case),
        ("discriminator", disc_case),
        ("visual_encoder", vit_case),
    ]
}

fn extractor_case(seed: u64) -> (f64, String) {
    let mut store = ParamStore::new();
    let ex = ConditionExtractor::new(&mut store, 4, 5, 2, 6, &mut rng::stream(seed, &[10]));
    let z = randn(&[4, 4, 4], seed, 1);
    check(seed, &mut store, &[z], &move |t, s, v| {
        ex.forward(t, s, v[0])
    })
}

fn dit_case(seed: u64) -> (f64, String) {
    let cfg = MiniDitConfig {
        latent_channels: 4,
        patch_size: 2,
        model_dim: 8,
        num_blocks: 2,
        num_heads: 2,
        prompt_dim: 6,
        pooled_dim: 5,
        mlp_ratio: 2,
        time_freq_dim: 4,
    };
    let mut store = ParamStore::new();
    let dit = MiniDit::new(&mut store, &cfg, &mut rng::stream(seed, &[10])).unwrap();
    randomize(&mut store, 0.3, seed);
    let inputs = vec![
        randn(&[4, 4, 4], seed, 1),
        randn(&[3, 6], seed, 2),
        randn(&[5], seed, 3),
        randn(&[4, 8], seed, 4),
    ];
    check(seed, &mut store, &inputs, &move |t, s, v| {
        let prompt = PromptVars {
            tokens: Some(v[1]),
            pooled: v[2],
        };
        let cond = v[3];
        dit.forward(t, s, v[0], 0.37, prompt, |t, b0| {
            Ok(Some(align_on_tape(t, b0, cond, StatsMode::PerItem, EPS)?.0))
        })
    })
}

fn ae_config() -> AutoencoderConfig {
    AutoencoderConfig {
        latent_channels: 4,
        downsample: 2,
        width: 3,
        disc_width: 3,
    }
}

fn ae_case(seed: u64) -> (f64, String) {
    let mut store = ParamStore::new();
    let ae = Autoencoder::new(&mut store, &ae_config(), &mut rng::stream(seed, &[10])).unwrap();
    store.freeze(dpir::autoencoder::ENCODER_BASE);
    store.freeze(dpir::autoencoder::DISC);
    let x = Tensor::uniform(&[3, 6, 6], 0.0, 1.0, &mut rng::stream(seed, &[1]));
    check(seed, &mut store, &[x], &move |t, s, v| {
        let z = ae.encode(t, s, v[0])?;
        ae.decode(t, s, z)
    })
}

fn disc_case(seed: u64) -> (f64, String) {
    let mut store = ParamStore::new();
    let d = Discriminator::new(&mut store, 3, &mut rng::stream(seed, &[10]));
    let x = randn(&[3, 8, 8], seed, 1);
    check(seed, &mut store, &[x], &move |t, s, v| {
        d.forward(t, s, v[0])
    })
}

fn vit_case(seed: u64) -> (f64, String) {
    let mut store = ParamStore::new();
    let cfg = VitConfig {
        patch: 4,
        dim: 8,
        heads: 2,
        depth: 1,
    };
    let enc = VisualEncoder::new(&mut store, "enc", &cfg, 8, &mut rng::stream(seed, &[10]));
    randomize(&mut store, 0.3, seed);
    let x = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng::stream(seed, &[1]));
    check(seed, &mut store, &[x], &move |t, s, v| {
        enc.forward(t, s, v[0])
    })
}

/// Worst error of `name` over the standard seed set.
pub fn run_case(case: &Case) -> (f64, u64, String) {
    (0..SEEDS)
        .map(|s| {
            let (e, what) = (case.1)(s);
            (e, s, what)
        })
        .fold(
            (0.0, 0, String::new()),
            |a, b| if b.0 > a.0 { b } else { a },
        )
}

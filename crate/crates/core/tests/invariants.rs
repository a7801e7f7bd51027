//! Property tests against independent f64 oracles.

use proptest::prelude::*;

use dpir::backbone::{patchify, unpatchify};
use dpir::checkpoint::Checkpoint;
use dpir::config::RunConfig;
use dpir::degradation::{degrade, DegradationRecipe};
use dpir::flow::{cfm_target, euler_sample, interpolate};
use dpir::lq_cond::{cross_normalize, inject, measure_stats, AlignmentStats, StatsMode};
use dpir::metrics::{psnr, ssim, SsimOptions};
use dpir::numerics::{ParamStore, Tape, Tensor, EPS};
use dpir::pipeline::tile_starts;
use dpir::rng;

fn randn(shape: &[usize], seed: u64, std: f32) -> Tensor {
    Tensor::randn(
        shape,
        std,
        &mut rng::stream(seed, &[rng::tag("invariants")]),
    )
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, seed, 1.0).map(|v| 0.5 + 0.5 * v.tanh())
}

fn mean_std64(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_normalize_hits_reference_stats(
        seed in 0u64..10_000,
        n in 1usize..40,
        d in 1usize..24,
        c_std in 0.01f32..10.0,
        r_mu in -5.0f32..5.0,
        r_std in 0.01f32..5.0,
    ) {
        let cond = randn(&[n, d], seed, c_std).map(|v| v + 0.3);
        let reference = randn(&[n, d], seed + 1, r_std).map(|v| v + r_mu);
        prop_assume!(mean_std64(cond.data()).1 > EPS as f64);
        let (rm, rs) = mean_std64(reference.data());
        let out = cross_normalize(&cond, &measure_stats(&reference, StatsMode::PerItem).unwrap(), EPS).unwrap();
        let (om, os) = mean_std64(out.data());
        prop_assert!((om - rm).abs() < 1e-5, "mean {om} vs {rm}");
        prop_assert!((os - rs).abs() < 1e-5, "std {os} vs {rs}");
    }

    #[test]
    fn per_channel_alignment_matches_each_column(seed in 0u64..10_000, n in 2usize..30, d in 1usize..12) {
        let cond = randn(&[n, d], seed, 2.0);
        let reference = randn(&[n, d], seed + 7, 0.5).map(|v| v - 1.0);
        let out = cross_normalize(&cond, &measure_stats(&reference, StatsMode::PerChannel).unwrap(), EPS).unwrap();
        for c in 0..d {
            let col = |t: &Tensor| (0..n).map(|i| t.data()[i * d + c]).collect::<Vec<_>>();
            let (_, cs) = mean_std64(&col(&cond));
            prop_assume!(cs > EPS as f64);
            let (rm, rs) = mean_std64(&col(&reference));
            let (om, os) = mean_std64(&col(&out));
            prop_assert!((om - rm).abs() < 1e-5);
            prop_assert!((os - rs).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_condition_maps_to_mu(seed in 0u64..10_000, n in 1usize..20, d in 1usize..20, k in -3.0f32..3.0) {
        let cond = Tensor::new(&[n, d], vec![k; n * d]).unwrap();
        let reference = randn(&[n, d], seed, 1.5).map(|v| v + 0.7);
        let stats = measure_stats(&reference, StatsMode::PerItem).unwrap();
        let out = cross_normalize(&cond, &stats, EPS).unwrap();
        prop_assert!(out.data().iter().all(|&v| (v - stats.mu[0]).abs() < 1e-6));
        // Injecting it shifts every element by exactly that mean.
        let injected = inject(&reference, &cond, StatsMode::PerItem, EPS).unwrap();
        for (a, b) in injected.data().iter().zip(reference.data()) {
            prop_assert!((a - b - stats.mu[0]).abs() < 1e-5);
        }
    }

    #[test]
    fn euler_recovers_x0_under_the_oracle_velocity(seed in 0u64..10_000, len in 1usize..64) {
        let x0 = randn(&[len], seed, 1.0);
        let eps = randn(&[len], seed + 1, 1.0);
        let z1 = interpolate(&x0, &eps, 1.0).unwrap();
        let v = cfm_target(&x0, &eps).unwrap();
        for steps in [1usize, 10, 50] {
            let z0 = euler_sample(|_, _, _| Ok(v.clone()), &z1, steps).unwrap();
            for (a, b) in z0.data().iter().zip(x0.data()) {
                prop_assert!((a - b).abs() < 1e-5, "steps {steps}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn patchify_round_trips(seed in 0u64..10_000, c in 1usize..5, gh in 1usize..5, gw in 1usize..5, p in 1usize..4) {
        let z = randn(&[c, gh * p, gw * p], seed, 1.0);
        let mut tape = Tape::no_grad();
        let zv = tape.constant(z.clone());
        let tokens = patchify(&mut tape, zv, p).unwrap();
        prop_assert_eq!(tape.shape(tokens), &[gh * gw, c * p * p][..]);
        let back = unpatchify(&mut tape, tokens, c, gh * p, gw * p, p).unwrap();
        prop_assert_eq!(tape.value(back), &z);
        // Token k, feature (ch, dy, dx) is pixel (ch, gy·p + dy, gx·p + dx).
        let t = tape.value(tokens);
        let (k, ch, dy, dx) = (seed as usize % (gh * gw), seed as usize % c, seed as usize % p, (seed as usize / 3) % p);
        let (gy, gx) = (k / gw, k % gw);
        let want = z.data()[ch * gh * p * gw * p + (gy * p + dy) * gw * p + gx * p + dx];
        prop_assert_eq!(t.data()[k * c * p * p + ch * p * p + dy * p + dx], want);
    }

    #[test]
    fn matmul_matches_oracle(seed in 0u64..10_000, n in 1usize..9, k in 1usize..9, m in 1usize..9) {
        let a = randn(&[n, k], seed, 1.0);
        let b = randn(&[k, m], seed + 1, 1.0);
        let mut tape = Tape::no_grad();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        let got = tape.value(c);
        for i in 0..n {
            for j in 0..m {
                let want: f64 = (0..k).map(|l| a.data()[i * k + l] as f64 * b.data()[l * m + j] as f64).sum();
                prop_assert!((got.data()[i * m + j] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn attention_matches_oracle(seed in 0u64..10_000, n in 1usize..7, m in 1usize..7, heads in 1usize..3, dh in 1usize..5) {
        let d = heads * dh;
        let q = randn(&[n, d], seed, 1.0);
        let k = randn(&[m, d], seed + 1, 1.0);
        let v = randn(&[m, d], seed + 2, 1.0);
        let mut tape = Tape::no_grad();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let o = tape.attention(qv, kv, vv, heads).unwrap();
        let got = tape.value(o);
        for h in 0..heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..m)
                    .map(|j| {
                        (0..dh).map(|c| q.data()[i * d + h * dh + c] as f64 * k.data()[j * d + h * dh + c] as f64).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    let want: f64 = (0..m).map(|j| e[j] / z * v.data()[j * d + h * dh + c] as f64).sum();
                    prop_assert!((got.data()[i * d + h * dh + c] as f64 - want).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn psnr_matches_oracle(seed in 0u64..10_000, peak in prop::sample::select(vec![1.0f64, 255.0])) {
        let a = uniform(&[3, 8, 8], seed).map(|v| v * peak as f32);
        let b = uniform(&[3, 8, 8], seed + 1).map(|v| v * peak as f32);
        // Per channel, then averaged.
        let want = (0..3)
            .map(|c| {
                let r = c * 64..(c + 1) * 64;
                let mse = a.data()[r.clone()].iter().zip(&b.data()[r]).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / 64.0;
                10.0 * (peak * peak / mse).log10()
            })
            .sum::<f64>()
            / 3.0;
        prop_assert!((psnr(&a, &b, peak).unwrap() - want).abs() < 1e-6);
        prop_assert_eq!(psnr(&a, &b, peak).unwrap(), psnr(&b, &a, peak).unwrap());
    }

    #[test]
    fn ssim_is_one_on_identical_and_below_otherwise(seed in 0u64..10_000) {
        let a = uniform(&[3, 16, 16], seed);
        let b = uniform(&[3, 16, 16], seed + 1);
        let o = SsimOptions::with_peak(1.0);
        prop_assert!((ssim(&a, &a, &o).unwrap() - 1.0).abs() < 1e-9);
        prop_assert!(ssim(&a, &b, &o).unwrap() < 1.0);
    }

    #[test]
    fn degradation_is_a_function_of_the_seed(seed in 0u64..1_000, scale in prop::sample::select(vec![1usize, 2, 4])) {
        let img = uniform(&[3, 16, 16], seed);
        let recipe = DegradationRecipe { seed, scale, ..DegradationRecipe::default() };
        let (a, ra) = degrade(&img, &recipe).unwrap();
        let (b, rb) = degrade(&img, &recipe).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(ra, rb);
        prop_assert_eq!(a.shape(), &[3, 16 / scale, 16 / scale][..]);
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoint_bytes_round_trip_and_truncation_errors(seed in 0u64..10_000, cut in 0usize..1000) {
        let mut store = ParamStore::new();
        store.add("g", "g.a", randn(&[3, 4], seed, 1.0));
        store.add("g", "g.b", randn(&[5], seed + 1, 1.0));
        let ck = Checkpoint::from_store(&store, "seed = 1\n".into(), seed, None);
        let bytes = ck.to_bytes();
        prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes.clone());
        let cut = cut % bytes.len();
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }

    #[test]
    fn tiles_cover_the_extent(units in 1usize..100, tile_units in 1usize..32, overlap in 0.0f32..0.9, align in 1usize..4) {
        let (extent, tile) = (units * align, tile_units.min(units) * align);
        let starts = tile_starts(extent, tile, overlap, align);
        prop_assert_eq!(starts[0], 0);
        prop_assert_eq!(*starts.last().unwrap() + tile, extent);
        for w in starts.windows(2) {
            prop_assert!(w[0] < w[1] && w[1] <= w[0] + tile);
        }
    }
}

#[test]
fn config_overrides_and_unknown_keys() {
    let cfg = RunConfig::load(
        None,
        &["train.batch=3".into(), "prompt.mode=\"text_only\"".into()],
    )
    .unwrap();
    assert_eq!(cfg.train.batch, 3);
    assert!(RunConfig::load(None, &["train.no_such_key=1".into()]).is_err());
    assert!(RunConfig::from_toml_str("[model]\nbogus = 1\n").is_err());
    let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn alignment_stats_scalar_constructor() {
    let s = AlignmentStats::scalar(1.0, 2.0);
    assert_eq!((s.mu.len(), s.sigma.len()), (1, 1));
}

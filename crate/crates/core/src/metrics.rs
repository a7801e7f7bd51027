//! Full-reference quality metrics: PSNR and SSIM.
//!
//! Both are computed per channel and averaged; Y-channel evaluation is
//! available through [`to_luma`]. Accumulation is done in f64.

use std::fmt::Write as _;

use crate::error::{invalid, shape_mismatch, Result};
use crate::numerics::Tensor;

/// Reported PSNR when two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        &[h, w] => Ok((1, h, w)),
        s => Err(invalid(format!(
            "metric input must be c×h×w or h×w, got {s:?}"
        ))),
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch("metric", a.shape(), b.shape()));
    }
    planes(a)
}

/// `10·log10(peak²/MSE)` per channel, averaged; zero error reports the cap.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let (c, h, w) = check_pair(a, b)?;
    if peak <= 0.0 {
        return Err(invalid("psnr peak must be positive"));
    }
    let n = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let (pa, pb) = (
            &a.data()[ch * n..(ch + 1) * n],
            &b.data()[ch * n..(ch + 1) * n],
        );
        let mse = pa
            .iter()
            .zip(pb)
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            / n as f64;
        total += if mse == 0.0 {
            PSNR_CAP_DB
        } else {
            (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
        };
    }
    Ok(total / c as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimOptions {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

impl SsimOptions {
    pub fn with_peak(peak: f64) -> Self {
        Self {
            peak,
            ..Self::default()
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid window positions, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor, opts: &SsimOptions) -> Result<f64> {
    let (c, h, w) = check_pair(a, b)?;
    if h < opts.window || w < opts.window {
        return Err(invalid(format!(
            "image {h}×{w} smaller than the {}-pixel SSIM window",
            opts.window
        )));
    }
    let g = gaussian_window(opts.window, opts.sigma);
    let c1 = (opts.k1 * opts.peak).powi(2);
    let c2 = (opts.k2 * opts.peak).powi(2);
    let n = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * n..(ch + 1) * n]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let pb: Vec<f64> = b.data()[ch * n..(ch + 1) * n]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &g);
        let mu_b = filter_valid(&pb, h, w, &g);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &g);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &g);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &g);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// BT.601 luma of an RGB image whose values lie in `[0, peak]`.
pub fn to_luma(img: &Tensor, peak: f32) -> Result<Tensor> {
    let (c, h, w) = planes(img)?;
    if c != 3 {
        return Err(invalid("luma conversion needs 3 channels"));
    }
    let n = h * w;
    let d = img.data();
    let y = (0..n)
        .map(|i| {
            let (r, g, b) = (d[i] / peak, d[n + i] / peak, d[2 * n + i] / peak);
            (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0 * peak
        })
        .collect();
    Tensor::new(&[1, h, w], y)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricOptions {
    pub peak: f64,
    pub y_channel: bool,
}

/// Per-image scores plus their arithmetic means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<(String, f64, f64)>,
}

impl MetricReport {
    pub fn push(&mut self, id: impl Into<String>, psnr_db: f64, ssim: f64) {
        self.entries.push((id.into(), psnr_db, ssim));
    }

    /// Score one pair and append it.
    pub fn evaluate(
        &mut self,
        id: impl Into<String>,
        restored: &Tensor,
        reference: &Tensor,
        opts: MetricOptions,
    ) -> Result<()> {
        let peak = if opts.peak > 0.0 { opts.peak } else { 1.0 };
        let (a, b) = if opts.y_channel {
            (
                to_luma(restored, peak as f32)?,
                to_luma(reference, peak as f32)?,
            )
        } else {
            (restored.clone(), reference.clone())
        };
        let p = psnr(&a, &b, peak)?;
        let s = ssim(&a, &b, &SsimOptions::with_peak(peak))?;
        self.push(id, p, s);
        Ok(())
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.entries.iter().map(|e| e.1))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.entries.iter().map(|e| e.2))
    }

    /// `id,psnr_db,ssim` rows followed by a `mean` row, LF endings.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr_db,ssim\n");
        for (id, p, q) in &self.entries {
            let _ = writeln!(s, "{id},{p:.6},{q:.6}");
        }
        let _ = writeln!(s, "mean,{:.6},{:.6}", self.mean_psnr(), self.mean_ssim());
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_cases() {
        let a = Tensor::full(&[3, 4, 4], 10.0);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), PSNR_CAP_DB);
        let b = a.map(|v| v + 1.0);
        assert!((psnr(&a, &b, 255.0).unwrap() - 48.1308).abs() < 1e-3);
        let z = Tensor::zeros(&[1, 4, 4]);
        let p = Tensor::full(&[1, 4, 4], 255.0);
        assert!(psnr(&z, &p, 255.0).unwrap().abs() < 1e-12);
        assert!(psnr(&z, &Tensor::zeros(&[1, 4, 5]), 255.0).is_err());
    }

    #[test]
    fn ssim_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        assert!((ssim(&a, &a, &SsimOptions::default()).unwrap() - 1.0).abs() < 1e-9);
        let z = Tensor::zeros(&[1, 12, 12]);
        let f = Tensor::full(&[1, 12, 12], 255.0);
        let c1 = (0.01f64 * 255.0).powi(2);
        let want = c1 / (255.0f64.powi(2) + c1);
        let got = ssim(&z, &f, &SsimOptions::with_peak(255.0)).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert!((want - 1.0001e-4).abs() < 1e-7);
        assert!(ssim(
            &Tensor::zeros(&[1, 8, 8]),
            &Tensor::zeros(&[1, 8, 8]),
            &SsimOptions::default()
        )
        .is_err());
    }

    #[test]
    fn report_csv_layout() {
        let mut r = MetricReport::default();
        r.push("a", 20.0, 0.5);
        r.push("b", 30.0, 0.7);
        assert_eq!(r.mean_psnr(), 25.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("id,psnr_db,ssim\n"));
        assert!(csv.ends_with("mean,25.000000,0.600000\n"));
        assert!(!csv.contains('\r'));
    }

    proptest! {
        #[test]
        fn ssim_symmetric_bounded_peak_invariant(seed in 0u64..1000, k in 0.5f32..255.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::uniform(&[2, 12, 12], 0.3, 0.7, &mut rng);
            let b = Tensor::uniform(&[2, 12, 12], 0.3, 0.7, &mut rng);
            let o = SsimOptions::default();
            let ab = ssim(&a, &b, &o).unwrap();
            prop_assert!((ab - ssim(&b, &a, &o).unwrap()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
            let (sa, sb) = (a.map(|v| v * k), b.map(|v| v * k));
            let scaled = ssim(&sa, &sb, &SsimOptions::with_peak(k as f64)).unwrap();
            prop_assert!((ab - scaled).abs() < 1e-5);
        }
    }
}

//! Seeded synthetic HQ→LQ degradation: blur, downscale, noise, and block-DCT
//! compression, optionally followed by a lighter second pass.
//!
//! Images are `c×h×w` tensors with values in `[0, 1]`.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::Tensor;
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurKind {
    #[default]
    Isotropic,
    /// Independent sigmas along the two image axes.
    Anisotropic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    Nearest,
    Bilinear,
    #[default]
    Bicubic,
}

impl fmt::Display for ResizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResizeMode::Nearest => "nearest",
            ResizeMode::Bilinear => "bilinear",
            ResizeMode::Bicubic => "bicubic",
        })
    }
}

/// Parametric description of one HQ→LQ chain. Ranges are inclusive `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationRecipe {
    pub blur_kind: BlurKind,
    pub blur_sigma: [f32; 2],
    pub blur_kernel: usize,
    pub scale: usize,
    pub resize_mode: ResizeMode,
    pub noise_sigma: [f32; 2],
    pub quality: [u32; 2],
    pub second_pass: bool,
    pub seed: u64,
}

impl Default for DegradationRecipe {
    fn default() -> Self {
        Self {
            blur_kind: BlurKind::Isotropic,
            blur_sigma: [0.5, 1.5],
            blur_kernel: 7,
            scale: 4,
            resize_mode: ResizeMode::Bicubic,
            noise_sigma: [0.0, 0.03],
            quality: [60, 95],
            second_pass: true,
            seed: 0,
        }
    }
}

impl DegradationRecipe {
    /// Recipe that leaves images untouched.
    pub fn neutral() -> Self {
        Self {
            blur_sigma: [0.0, 0.0],
            scale: 1,
            noise_sigma: [0.0, 0.0],
            quality: [100, 100],
            second_pass: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.blur_sigma, self.noise_sigma];
        if ranges
            .iter()
            .any(|r| r[0] < 0.0 || r[1] < r[0] || !r[1].is_finite())
        {
            return Err(invalid(
                "sigma ranges must be finite, non-negative, and ordered",
            ));
        }
        if self.quality[0] < 1 || self.quality[1] > 100 || self.quality[1] < self.quality[0] {
            return Err(invalid(format!(
                "quality range {:?} outside [1, 100]",
                self.quality
            )));
        }
        if self.scale == 0 {
            return Err(invalid("scale must be positive"));
        }
        if self.blur_kernel % 2 == 0 {
            return Err(invalid("blur kernel size must be odd"));
        }
        Ok(())
    }

    /// Same recipe with a per-sample seed derived from the master seed.
    pub fn for_sample(&self, index: u64) -> Self {
        Self {
            seed: rng::derive(self.seed, &[rng::tag("degrade"), index]),
            ..self.clone()
        }
    }
}

/// Parameters actually drawn for one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PassRecord {
    pub sigma_x: f32,
    pub sigma_y: f32,
    pub noise_sigma: f32,
    pub quality: u32,
}

/// Exact provenance of one degradation.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationRecord {
    pub seed: u64,
    pub scale: usize,
    pub resize_mode: ResizeMode,
    pub kernel: usize,
    pub first: PassRecord,
    pub second: Option<PassRecord>,
}

impl DegradationRecord {
    /// Space-separated `key=value` pairs in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "seed={} scale={} resize={} kernel={} sigma_x={} sigma_y={} noise={} quality={}",
            self.seed,
            self.scale,
            self.resize_mode,
            self.kernel,
            self.first.sigma_x,
            self.first.sigma_y,
            self.first.noise_sigma,
            self.first.quality
        );
        if let Some(p) = &self.second {
            s.push_str(&format!(
                " sigma2_x={} sigma2_y={} noise2={} quality2={}",
                p.sigma_x, p.sigma_y, p.noise_sigma, p.quality
            ));
        }
        s
    }
}

fn check_image(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        s => Err(invalid(format!("expected a c×h×w image, got {s:?}"))),
    }
}

/// Normalized 1-D Gaussian taps; `sigma == 0` gives a delta.
pub fn gaussian_kernel(sigma: f32, size: usize) -> Vec<f32> {
    let r = (size / 2) as i64;
    if sigma <= 0.0 {
        return (-r..=r).map(|i| (i == 0) as i32 as f32).collect();
    }
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| (v / s) as f32).collect()
}

/// Mirror an out-of-range index without repeating the edge sample.
fn reflect(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn convolve_axis(img: &Tensor, taps: &[f32], horizontal: bool) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let r = (taps.len() / 2) as i64;
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let off = k as i64 - r;
                    let idx = if horizontal {
                        y * w + reflect(x as i64 + off, w)
                    } else {
                        reflect(y as i64 + off, h) * w + x
                    };
                    acc += t * src[base + idx];
                }
                out[base + y * w + x] = acc;
            }
        }
    }
    Tensor::from_parts(img.shape().to_vec(), out)
}

/// Separable Gaussian blur with reflection padding.
pub fn gaussian_blur(img: &Tensor, sigma: f32, kernel_size: usize) -> Result<Tensor> {
    gaussian_blur_xy(img, sigma, sigma, kernel_size)
}

/// Axis-aligned anisotropic Gaussian blur.
pub fn gaussian_blur_xy(
    img: &Tensor,
    sigma_x: f32,
    sigma_y: f32,
    kernel_size: usize,
) -> Result<Tensor> {
    check_image(img)?;
    if sigma_x < 0.0 || sigma_y < 0.0 {
        return Err(invalid("blur sigma must be non-negative"));
    }
    if kernel_size % 2 == 0 {
        return Err(invalid("blur kernel size must be odd"));
    }
    if sigma_x == 0.0 && sigma_y == 0.0 {
        return Ok(img.clone());
    }
    let tmp = convolve_axis(img, &gaussian_kernel(sigma_x, kernel_size), true);
    Ok(convolve_axis(
        &tmp,
        &gaussian_kernel(sigma_y, kernel_size),
        false,
    ))
}

fn cubic(x: f32) -> f32 {
    const A: f32 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps for each output coordinate along one axis. Sample centres sit
/// at half-pixel offsets: `src = (dst + 0.5)·in/out − 0.5`; out-of-range taps
/// clamp to the edge.
fn axis_taps(n_in: usize, n_out: usize, mode: ResizeMode) -> Vec<Vec<(usize, f32)>> {
    let ratio = n_in as f64 / n_out as f64;
    let clamp = |i: i64| i.clamp(0, n_in as i64 - 1) as usize;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            match mode {
                ResizeMode::Nearest => {
                    let i = ((o as f64 + 0.5) * ratio).floor() as i64;
                    vec![(clamp(i), 1.0)]
                }
                ResizeMode::Bilinear => {
                    let f = src.floor();
                    let t = (src - f) as f32;
                    vec![(clamp(f as i64), 1.0 - t), (clamp(f as i64 + 1), t)]
                }
                ResizeMode::Bicubic => {
                    let f = src.floor();
                    let t = (src - f) as f32;
                    (-1..=2)
                        .map(|k| (clamp(f as i64 + k), cubic(t - k as f32)))
                        .collect()
                }
            }
        })
        .collect()
}

/// Resample to `out_h × out_w`. Identity extents return the input unchanged.
pub fn resize(img: &Tensor, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Tensor> {
    let (c, h, w) = check_image(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid("resize target must be positive"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(img.clone());
    }
    let tx = axis_taps(w, out_w, mode);
    let ty = axis_taps(h, out_h, mode);
    let src = img.data();
    let mut rows = vec![0.0; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let line = &src[ch * h * w + y * w..ch * h * w + (y + 1) * w];
            for (x, taps) in tx.iter().enumerate() {
                rows[ch * h * out_w + y * out_w + x] =
                    taps.iter().map(|&(i, wt)| wt * line[i]).sum();
            }
        }
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..out_w {
                out[ch * out_h * out_w + y * out_w + x] = taps
                    .iter()
                    .map(|&(i, wt)| wt * rows[ch * h * out_w + i * out_w + x])
                    .sum();
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

/// Additive white Gaussian noise, clamped to `[0, 1]`.
pub fn add_gaussian_noise<R: Rng + ?Sized>(
    img: &Tensor,
    sigma: f32,
    rng: &mut R,
) -> Result<Tensor> {
    check_image(img)?;
    if sigma < 0.0 {
        return Err(invalid("noise sigma must be non-negative"));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let data = img
        .data()
        .iter()
        .map(|&v| (v + sigma * rng.sample::<f32, _>(StandardNormal)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(img.shape(), data)
}

const JPEG_LUMA: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113,
    92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
];

/// libjpeg-style quality scaling of the luminance table.
pub fn quant_table(quality: u32) -> [f32; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0.0; 64];
    for (dst, &base) in t.iter_mut().zip(JPEG_LUMA.iter()) {
        *dst = ((base * scale + 50) / 100).clamp(1, 255) as f32;
    }
    t
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let cu = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    b
}

/// JPEG-like surrogate: per-channel 8×8 orthonormal DCT on 0–255 values,
/// coefficient quantization by the quality-scaled table, inverse DCT.
/// Table entries equal to 1 are lossless, so quality 100 round-trips.
pub fn block_compress(img: &Tensor, quality: u32) -> Result<Tensor> {
    let (c, h, w) = check_image(img)?;
    if !(1..=100).contains(&quality) {
        return Err(invalid(format!("quality {quality} outside [1, 100]")));
    }
    let table = quant_table(quality);
    let basis = dct_basis();
    let src = img.data();
    let mut out = src.to_vec();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0.0f64; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        *v = plane[sy * w + sx] as f64 * 255.0 - 128.0;
                    }
                }
                let mut coef = [[0.0f64; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for y in 0..8 {
                            for x in 0..8 {
                                acc += basis[u][y] * basis[v][x] * block[y][x];
                            }
                        }
                        let q = table[u * 8 + v] as f64;
                        coef[u][v] = if q > 1.0 { (acc / q).round() * q } else { acc };
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let (py, px) = (by + y, bx + x);
                        if py >= h || px >= w {
                            continue;
                        }
                        let mut acc = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                acc += basis[u][y] * basis[v][x] * coef[u][v];
                            }
                        }
                        out[ch * h * w + py * w + px] =
                            (((acc + 128.0) / 255.0) as f32).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(img.shape().to_vec(), out))
}

fn draw(range: [f32; 2], r: &mut rng::Rng) -> f32 {
    if range[1] > range[0] {
        r.gen_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

fn draw_quality(range: [u32; 2], r: &mut rng::Rng) -> u32 {
    if range[1] > range[0] {
        r.gen_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

fn apply_pass<R: Rng>(
    img: &Tensor,
    p: &PassRecord,
    kernel: usize,
    resize_to: Option<(usize, usize, ResizeMode)>,
    noise_rng: &mut R,
) -> Result<Tensor> {
    let mut x = gaussian_blur_xy(img, p.sigma_x, p.sigma_y, kernel)?;
    if let Some((h, w, mode)) = resize_to {
        x = resize(&x, h, w, mode)?.map(|v| v.clamp(0.0, 1.0));
    }
    x = add_gaussian_noise(&x, p.noise_sigma, noise_rng)?;
    block_compress(&x, p.quality)
}

/// Apply blur → resize(1/scale) → noise → compress, then optionally a
/// lighter second pass at the low resolution. All draws come from
/// `recipe.seed`.
pub fn degrade(img: &Tensor, recipe: &DegradationRecipe) -> Result<(Tensor, DegradationRecord)> {
    recipe.validate()?;
    let (_, h, w) = check_image(img)?;
    if h % recipe.scale != 0 || w % recipe.scale != 0 {
        return Err(invalid(format!(
            "image {h}×{w} not divisible by scale {}",
            recipe.scale
        )));
    }
    let mut r = rng::stream(recipe.seed, &[rng::tag("params")]);
    let mut noise_rng = rng::stream(recipe.seed, &[rng::tag("noise")]);
    let sigma_x = draw(recipe.blur_sigma, &mut r);
    let sigma_y = match recipe.blur_kind {
        BlurKind::Isotropic => sigma_x,
        BlurKind::Anisotropic => draw(recipe.blur_sigma, &mut r),
    };
    let first = PassRecord {
        sigma_x,
        sigma_y,
        noise_sigma: draw(recipe.noise_sigma, &mut r),
        quality: draw_quality(recipe.quality, &mut r),
    };
    let (lh, lw) = (h / recipe.scale, w / recipe.scale);
    let mut lq = apply_pass(
        img,
        &first,
        recipe.blur_kernel,
        Some((lh, lw, recipe.resize_mode)),
        &mut noise_rng,
    )?;
    let second = if recipe.second_pass {
        let p = PassRecord {
            sigma_x: 0.5 * draw(recipe.blur_sigma, &mut r),
            sigma_y: 0.0,
            noise_sigma: 0.5 * draw(recipe.noise_sigma, &mut r),
            quality: {
                let q = draw_quality(recipe.quality, &mut r);
                q + (100 - q) / 2
            },
        };
        let p = PassRecord {
            sigma_y: match recipe.blur_kind {
                BlurKind::Isotropic => p.sigma_x,
                BlurKind::Anisotropic => 0.5 * draw(recipe.blur_sigma, &mut r),
            },
            ..p
        };
        lq = apply_pass(&lq, &p, recipe.blur_kernel, None, &mut noise_rng)?;
        Some(p)
    } else {
        None
    };
    let lq = lq.map(|v| v.clamp(0.0, 1.0));
    Ok((
        lq,
        DegradationRecord {
            seed: recipe.seed,
            scale: recipe.scale,
            resize_mode: recipe.resize_mode,
            kernel: recipe.blur_kernel,
            first,
            second,
        },
    ))
}

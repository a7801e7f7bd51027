//! Procedural training corpus: seeded pattern images with matching captions.
//!
//! Each image draws a foreground pattern over a background colour; the
//! caption names both colours and the pattern ("red stripes on blue").

use rand::Rng;

use crate::numerics::Tensor;
use crate::rng;

pub const COLORS: &[(&str, [f32; 3])] = &[
    ("red", [0.85, 0.15, 0.12]),
    ("green", [0.18, 0.7, 0.25]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.92, 0.85, 0.2]),
    ("cyan", [0.2, 0.8, 0.85]),
    ("magenta", [0.8, 0.2, 0.75]),
    ("orange", [0.95, 0.55, 0.15]),
    ("purple", [0.45, 0.2, 0.65]),
    ("white", [0.92, 0.92, 0.9]),
    ("black", [0.08, 0.08, 0.1]),
    ("gray", [0.5, 0.5, 0.5]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Stripes,
    Checker,
    Circles,
    Dots,
    Waves,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [
        Pattern::Stripes,
        Pattern::Checker,
        Pattern::Circles,
        Pattern::Dots,
        Pattern::Waves,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Pattern::Stripes => "stripes",
            Pattern::Checker => "checker",
            Pattern::Circles => "circles",
            Pattern::Dots => "dots",
            Pattern::Waves => "waves",
        }
    }
}

/// Every word a generated caption can contain.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v: Vec<&str> = COLORS.iter().map(|c| c.0).collect();
    v.extend(Pattern::ALL.iter().map(|p| p.word()));
    v.push("on");
    v
}

fn smoothstep(e: f32, x: f32) -> f32 {
    let t = ((x + e) / (2.0 * e)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Foreground coverage in `[0, 1]` at pixel `(y, x)`; edges are softened
/// over roughly one pixel so downsampling stays alias-free.
fn coverage(p: Pattern, y: f32, x: f32, period: f32, angle: f32, phase: f32) -> f32 {
    let (s, c) = angle.sin_cos();
    let u = x * c + y * s;
    let v = -x * s + y * c;
    let tau = std::f32::consts::TAU;
    match p {
        Pattern::Stripes => {
            let f = ((u + phase) / period * tau).sin();
            smoothstep(0.15, f)
        }
        Pattern::Checker => {
            let a = ((u + phase) / period * tau).sin();
            let b = ((v + phase) / period * tau).sin();
            smoothstep(0.15, a * b)
        }
        Pattern::Circles => {
            let r = (x * x + y * y).sqrt();
            smoothstep(0.15, ((r + phase) / period * tau).sin())
        }
        Pattern::Dots => {
            let cell = period;
            let cu = (u + phase).rem_euclid(cell) - cell / 2.0;
            let cv = (v + phase).rem_euclid(cell) - cell / 2.0;
            let d = (cu * cu + cv * cv).sqrt();
            let r = cell * 0.3;
            ((r - d) + 0.75).clamp(0.0, 1.5) / 1.5
        }
        Pattern::Waves => {
            let off = 0.25 * period * (v / (1.7 * period) * tau).sin();
            smoothstep(0.2, ((u + off + phase) / period * tau).sin())
        }
    }
}

/// A seeded `3×h×w` image in `[0, 1]` and its caption.
pub fn procedural_image(seed: u64, h: usize, w: usize) -> (Tensor, String) {
    let mut r = rng::stream(seed, &[rng::tag("corpus")]);
    let fg = r.gen_range(0..COLORS.len());
    let mut bg = r.gen_range(0..COLORS.len() - 1);
    if bg >= fg {
        bg += 1;
    }
    let pattern = Pattern::ALL[r.gen_range(0..Pattern::ALL.len())];
    let scale = h.min(w) as f32;
    let period = r.gen_range(0.12..0.3) * scale;
    let angle = r.gen_range(0.0..std::f32::consts::PI);
    let phase = r.gen_range(0.0..period);
    let (cy, cx) = (
        r.gen_range(0.2..0.8) * h as f32,
        r.gen_range(0.2..0.8) * w as f32,
    );
    let shade_dir = r.gen_range(0.0..std::f32::consts::TAU);
    let shade = r.gen_range(0.0..0.15f32);
    let grain = 0.01f32;
    let (cf, cb) = (COLORS[fg].1, COLORS[bg].1);

    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
            let a = coverage(pattern, py, px, period, angle, phase);
            let lit = 1.0 + shade * ((px * shade_dir.cos() + py * shade_dir.sin()) / scale);
            for ch in 0..3 {
                let n: f32 = r.gen_range(-grain..grain);
                let v = (a * cf[ch] + (1.0 - a) * cb[ch]) * lit + n;
                data[ch * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    let caption = format!("{} {} on {}", COLORS[fg].0, pattern.word(), COLORS[bg].0);
    (Tensor::from_parts(vec![3, h, w], data), caption)
}

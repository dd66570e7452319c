use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::nncore::Tensor;

pub const SHAPES: [&str; 4] = ["blob", "square", "triangle", "cross"];
pub const TEXTURES: [&str; 3] = ["stripes", "dots", "checker"];

/// Categories held out of training in the default split.
pub const DEFAULT_UNSEEN: [&str; 4] = ["blob-stripes", "square-dots", "triangle-checker", "cross-stripes"];

pub const DEFAULT_KAPPA: f64 = 0.8;
const SUPERSAMPLE: usize = 4;
const TEXTURE_AMP: f64 = 0.12;
const OFFSET: f64 = 0.35;
const TINT: f64 = 0.05;
const NOISE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Blob,
    Square,
    Triangle,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextureKind {
    Stripes,
    Dots,
    Checker,
}

/// A `shape-texture` category name split into its parts.
pub fn parse_category(name: &str) -> Result<(ShapeKind, TextureKind)> {
    let (s, t) = name
        .split_once('-')
        .ok_or_else(|| crate::Error::Contract(format!("category {name:?} is not shape-texture")))?;
    let shape = match s {
        "blob" => ShapeKind::Blob,
        "square" => ShapeKind::Square,
        "triangle" => ShapeKind::Triangle,
        "cross" => ShapeKind::Cross,
        _ => return Err(crate::Error::Contract(format!("unknown shape family {s:?}"))),
    };
    let texture = match t {
        "stripes" => TextureKind::Stripes,
        "dots" => TextureKind::Dots,
        "checker" => TextureKind::Checker,
        _ => return Err(crate::Error::Contract(format!("unknown texture family {t:?}"))),
    };
    Ok((shape, texture))
}

/// All twelve shape x texture category names, shape-major.
pub fn all_categories() -> Vec<String> {
    SHAPES
        .iter()
        .flat_map(|s| TEXTURES.iter().map(move |t| format!("{s}-{t}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub category: String,
    pub height: usize,
    pub width: usize,
    pub kappa: f64,
    pub seed: u64,
}

/// A rendered scene.
#[derive(Debug, Clone)]
pub struct Scene {
    /// `h x w x 3` in [0, 1].
    pub image: Tensor,
    /// The same scene rendered without the object.
    pub background: Tensor,
    /// Anti-aliased object coverage, `h x w`.
    pub coverage: Tensor,
    /// `coverage >= 0.5`, `h x w`.
    pub mask: Tensor,
}

struct Texture {
    kind: TextureKind,
    period: f64,
    angle: f64,
    phase: f64,
    ox: f64,
    oy: f64,
}

impl Texture {
    fn random(kind: TextureKind, rng: &mut ChaCha8Rng) -> Self {
        Self {
            kind,
            period: rng.random_range(6.0..10.0),
            angle: rng.random_range(0.0..PI),
            phase: rng.random_range(0.0..2.0 * PI),
            ox: rng.random_range(0.0..10.0),
            oy: rng.random_range(0.0..10.0),
        }
    }

    /// Pattern value in [-1, 1] at pixel centre `(x, y)`; `shifted` selects the
    /// half-period-shifted copy.
    fn at(&self, x: f64, y: f64, shifted: bool) -> f64 {
        let half = if shifted { 0.5 } else { 0.0 };
        match self.kind {
            TextureKind::Stripes => {
                let u = x * self.angle.cos() + y * self.angle.sin();
                (2.0 * PI * (u / self.period + half) + self.phase).sin()
            }
            TextureKind::Dots => {
                let p = self.period;
                let fx = ((x + self.ox) / p + half).rem_euclid(1.0) - 0.5;
                let fy = ((y + self.oy) / p + half).rem_euclid(1.0) - 0.5;
                let d = (fx * fx + fy * fy).sqrt() * p;
                let r = 0.3 * p;
                (2.0 * (r - d)).tanh()
            }
            TextureKind::Checker => {
                let s = self.period / 2.0;
                let a = (PI * (x + self.ox) / s).sin();
                let b = (PI * (y + self.oy) / s + PI * 2.0 * half).sin();
                (3.0 * a * b).tanh()
            }
        }
    }
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    r: f64,
    rot: f64,
    wobble: [f64; 4],
}

impl Shape {
    fn random(kind: ShapeKind, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let m = h.min(w) as f64;
        let r = rng.random_range(0.2..0.3) * m;
        Self {
            kind,
            cx: rng.random_range(r + 2.0..w as f64 - r - 2.0),
            cy: rng.random_range(r + 2.0..h as f64 - r - 2.0),
            r,
            rot: rng.random_range(0.0..2.0 * PI),
            wobble: [
                rng.random_range(0.15..0.25),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.05..0.12),
                rng.random_range(0.0..2.0 * PI),
            ],
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.rot.cos(), self.rot.sin());
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = self.r;
        match self.kind {
            ShapeKind::Blob => {
                let t = v.atan2(u);
                let rr = r
                    * (1.0
                        + self.wobble[0] * (3.0 * t + self.wobble[1]).sin()
                        + self.wobble[2] * (5.0 * t + self.wobble[3]).sin());
                (u * u + v * v).sqrt() <= rr * 0.9
            }
            ShapeKind::Square => u.abs() <= 0.75 * r && v.abs() <= 0.75 * r,
            ShapeKind::Triangle => {
                // equilateral triangle with circumradius r, apex at -v
                let a = r;
                let inside = |nx: f64, ny: f64| nx * u + ny * v <= a / 2.0;
                inside(0.0, 1.0) && inside((PI / 6.0).cos(), -(PI / 6.0).sin()) && inside(-(PI / 6.0).cos(), -(PI / 6.0).sin())
            }
            ShapeKind::Cross => {
                let arm = 0.3 * r;
                (u.abs() <= arm && v.abs() <= r) || (v.abs() <= arm && u.abs() <= r)
            }
        }
    }

    fn coverage(&self, px: usize, py: usize) -> f64 {
        let mut hit = 0;
        for i in 0..SUPERSAMPLE {
            for j in 0..SUPERSAMPLE {
                let x = px as f64 + (j as f64 + 0.5) / SUPERSAMPLE as f64;
                let y = py as f64 + (i as f64 + 0.5) / SUPERSAMPLE as f64;
                hit += self.contains(x, y) as usize;
            }
        }
        hit as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

impl SceneSpec {
    pub fn new(category: &str, height: usize, width: usize, kappa: f64, seed: u64) -> Self {
        Self {
            category: category.to_string(),
            height,
            width,
            kappa,
            seed,
        }
    }

    pub fn render(&self) -> Result<Scene> {
        contract!((0.0..=1.0).contains(&self.kappa), "kappa {} outside [0, 1]", self.kappa);
        contract!(self.height >= 16 && self.width >= 16, "scene must be at least 16x16");
        let (shape_kind, tex_kind) = parse_category(&self.category)?;
        let (h, w) = (self.height, self.width);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
        let mean_base = base.iter().sum::<f64>() / 3.0;
        let offset = if mean_base > 0.5 { -OFFSET } else { OFFSET };
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-TINT..TINT));
        let tex = Texture::random(tex_kind, &mut rng);
        let shape = Shape::random(shape_kind, h, w, &mut rng);
        let noise = Normal::new(0.0, NOISE).expect("valid normal");

        let mut image = vec![0.0; h * w * 3];
        let mut background = vec![0.0; h * w * 3];
        let mut coverage = vec![0.0; h * w];
        let k = self.kappa;
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let cov = shape.coverage(x, y);
                coverage[y * w + x] = cov;
                let t0 = tex.at(fx, fy, false);
                let t1 = tex.at(fx, fy, true);
                for c in 0..3 {
                    let n = noise.sample(&mut rng);
                    let bg = base[c] + TEXTURE_AMP * t0;
                    let alt = base[c] + offset + tint[c] + TEXTURE_AMP * t1;
                    let obj = k * bg + (1.0 - k) * alt;
                    let v = cov * obj + (1.0 - cov) * bg;
                    let i = (y * w + x) * 3 + c;
                    image[i] = (v + n).clamp(0.0, 1.0);
                    background[i] = (bg + n).clamp(0.0, 1.0);
                }
            }
        }
        let mask: Vec<f64> = coverage.iter().map(|&c| (c >= 0.5) as u8 as f64).collect();
        Ok(Scene {
            image: Tensor::new(&[h, w, 3], image)?,
            background: Tensor::new(&[h, w, 3], background)?,
            coverage: Tensor::new(&[h, w], coverage)?,
            mask: Tensor::new(&[h, w], mask)?,
        })
    }
}

/// Stable per-scene seed derived from the master seed and a scene index.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `dilate3x3(mask) AND NOT erode3x3(mask)` with zero padding.
pub fn derive_edge(mask: &Tensor) -> Result<Tensor> {
    let s = mask.shape();
    contract!(
        s.len() == 2 || (s.len() == 3 && s[2] == 1),
        "derive_edge expects an h x w mask, got {s:?}"
    );
    let (h, w) = (s[0], s[1]);
    let m = mask.data();
    contract!(m.iter().all(|&v| v == 0.0 || v == 1.0), "derive_edge needs a binary mask");
    let at = |r: isize, c: isize| -> bool {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && m[r as usize * w + c as usize] == 1.0
    };
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut any = false;
            let mut all = true;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let v = at(r + dr, c + dc);
                    any |= v;
                    all &= v;
                }
            }
            out[r as usize * w + c as usize] = (any && !all) as u8 as f64;
        }
    }
    Tensor::new(&[h, w], out)
}

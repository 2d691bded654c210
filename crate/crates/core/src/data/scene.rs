//! Synthetic single-object scenes: a textured background, one flat-colored
//! object, a depth map in which the object is nearer than everything
//! behind it, and the object's exact silhouette as the mask.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Rng};

/// Pixels kept free of the object along every border.
pub const MARGIN: usize = 2;
pub const MIN_RATIO: f64 = 0.02;
pub const MAX_RATIO: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Triangle, ShapeKind::Blob];
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Blob => "blob",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(ShapeKind::Disk),
            "rectangle" | "rect" => Ok(ShapeKind::Rectangle),
            "triangle" => Ok(ShapeKind::Triangle),
            "blob" => Ok(ShapeKind::Blob),
            _ => Err(Error::Config(format!("unknown shape `{s}` (disk, rectangle, triangle, blob)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Gradient,
    Checker,
    Noise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub shapes: Vec<ShapeKind>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(size: usize, seed: u64) -> Self {
        SceneSpec {
            size,
            shapes: ShapeKind::ALL.to_vec(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config(format!("scene size {} is below 16", self.size)));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("scene needs at least one shape kind".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub rgb: Image,
    pub depth: Image,
    pub mask: Image,
    pub seed: u64,
}

/// Object geometry, tested at pixel centers.
enum Geometry {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, cos: f64, sin: f64 },
    Polygon(Vec<(f64, f64)>),
    Blob { cx: f64, cy: f64, r: f64, harmonics: Vec<(f64, f64)> },
}

impl Geometry {
    fn sample(kind: ShapeKind, size: f64, r: &mut Rng) -> Self {
        let cx = rng::uniform(r, 0.3, 0.7) * size;
        let cy = rng::uniform(r, 0.3, 0.7) * size;
        match kind {
            ShapeKind::Disk => Geometry::Disk {
                cx,
                cy,
                r: rng::uniform(r, 0.1, 0.3) * size,
            },
            ShapeKind::Rectangle => {
                let th = rng::uniform(r, 0.0, PI);
                Geometry::Rect {
                    cx,
                    cy,
                    hw: rng::uniform(r, 0.08, 0.3) * size,
                    hh: rng::uniform(r, 0.08, 0.3) * size,
                    cos: th.cos(),
                    sin: th.sin(),
                }
            }
            ShapeKind::Triangle => {
                let rad = rng::uniform(r, 0.15, 0.35) * size;
                let th = rng::uniform(r, 0.0, TAU);
                let pts = (0..3)
                    .map(|k| {
                        let a = th + k as f64 * TAU / 3.0 + rng::uniform(r, -0.3, 0.3);
                        (cx + rad * a.cos(), cy + rad * a.sin())
                    })
                    .collect();
                Geometry::Polygon(pts)
            }
            ShapeKind::Blob => Geometry::Blob {
                cx,
                cy,
                r: rng::uniform(r, 0.12, 0.28) * size,
                harmonics: (2..5).map(|_| (rng::uniform(r, 0.0, 0.2), rng::uniform(r, 0.0, TAU))).collect(),
            },
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Geometry::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Geometry::Rect { cx, cy, hw, hh, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                (dx * cos + dy * sin).abs() <= *hw && (-dx * sin + dy * cos).abs() <= *hh
            }
            Geometry::Polygon(p) => {
                let side = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let s: Vec<f64> = (0..p.len()).map(|i| side(p[i], p[(i + 1) % p.len()])).collect();
                s.iter().all(|&v| v >= 0.0) || s.iter().all(|&v| v <= 0.0)
            }
            Geometry::Blob { cx, cy, r, harmonics } => {
                let (dx, dy) = (x - cx, y - cy);
                let phi = dy.atan2(dx);
                let scale: f64 = 1.0
                    + harmonics
                        .iter()
                        .enumerate()
                        .map(|(k, (a, p))| a * ((k + 2) as f64 * phi + p).cos())
                        .sum::<f64>();
                dx * dx + dy * dy <= (r * scale).powi(2)
            }
        }
    }
}

fn rasterize(g: &Geometry, size: usize) -> Vec<bool> {
    (0..size * size)
        .map(|i| g.contains((i % size) as f64 + 0.5, (i / size) as f64 + 0.5))
        .collect()
}

fn acceptable(mask: &[bool], size: usize) -> bool {
    let count = mask.iter().filter(|&&m| m).count();
    let ratio = count as f64 / (size * size) as f64;
    if !(MIN_RATIO..=MAX_RATIO).contains(&ratio) {
        return false;
    }
    mask.iter().enumerate().all(|(i, &m)| {
        let (x, y) = (i % size, i / size);
        !m || (x >= MARGIN && y >= MARGIN && x + MARGIN < size && y + MARGIN < size)
    })
}

fn color(r: &mut Rng) -> [f64; 3] {
    [rng::unit(r), rng::unit(r), rng::unit(r)]
}

fn background(kind: Background, size: usize, r: &mut Rng) -> Vec<[f64; 3]> {
    let (a, b) = (color(r), color(r));
    let mix = |t: f64| -> [f64; 3] { std::array::from_fn(|c| a[c] + (b[c] - a[c]) * t) };
    match kind {
        Background::Gradient => {
            let th = rng::uniform(r, 0.0, TAU);
            let (dx, dy) = (th.cos(), th.sin());
            (0..size * size)
                .map(|i| {
                    let (x, y) = ((i % size) as f64 / size as f64 - 0.5, (i / size) as f64 / size as f64 - 0.5);
                    mix(((x * dx + y * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0))
                })
                .collect()
        }
        Background::Checker => {
            let cell = 4 + rng::below(r, 9);
            (0..size * size)
                .map(|i| mix((((i % size) / cell + (i / size) / cell) % 2) as f64))
                .collect()
        }
        Background::Noise => {
            // value noise: a 5x5 lattice of blend factors, bilinearly interpolated
            let lattice: Vec<f64> = (0..25).map(|_| rng::unit(r)).collect();
            (0..size * size)
                .map(|i| {
                    let fx = (i % size) as f64 / (size - 1) as f64 * 4.0;
                    let fy = (i / size) as f64 / (size - 1) as f64 * 4.0;
                    let (x0, y0) = ((fx.floor() as usize).min(3), (fy.floor() as usize).min(3));
                    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                    let l = |x: usize, y: usize| lattice[y * 5 + x];
                    let top = l(x0, y0) * (1.0 - tx) + l(x0 + 1, y0) * tx;
                    let bot = l(x0, y0 + 1) * (1.0 - tx) + l(x0 + 1, y0 + 1) * tx;
                    mix(top * (1.0 - ty) + bot * ty)
                })
                .collect()
        }
    }
}

/// Sample `index` of the scene family `spec`. Pure in `(spec, index)`.
pub fn generate(spec: &SceneSpec, index: u64) -> Result<(Sample, ShapeKind)> {
    spec.validate()?;
    let seed = rng::derive_seed(spec.seed, index);
    let mut r = rng::seeded(seed);
    let size = spec.size;
    let kind = spec.shapes[rng::below(&mut r, spec.shapes.len())];

    let mut mask = None;
    for _ in 0..200 {
        let g = Geometry::sample(kind, size as f64, &mut r);
        let m = rasterize(&g, size);
        if acceptable(&m, size) {
            mask = Some(m);
            break;
        }
    }
    // Every kind reaches a valid draw quickly; this only guards the loop.
    let mask = mask.unwrap_or_else(|| {
        let c = size as f64 / 2.0;
        rasterize(&Geometry::Disk { cx: c, cy: c, r: size as f64 / 4.0 }, size)
    });

    let bg_kind = [Background::Gradient, Background::Checker, Background::Noise][rng::below(&mut r, 3)];
    let bg = background(bg_kind, size, &mut r);
    let bg_mean: [f64; 3] = std::array::from_fn(|c| bg.iter().map(|p| p[c]).sum::<f64>() / bg.len() as f64);
    let mut obj = color(&mut r);
    for _ in 0..50 {
        let contrast = (0..3).map(|c| (obj[c] - bg_mean[c]).abs()).sum::<f64>() / 3.0;
        if contrast >= 0.25 {
            break;
        }
        obj = color(&mut r);
    }
    let shade = rng::uniform(&mut r, 0.0, 0.15);

    // Depth: background ramp in [0, 0.5], object plateau above its maximum.
    let th = rng::uniform(&mut r, 0.0, TAU);
    let (dx, dy) = (th.cos(), th.sin());
    let ramp_span = rng::uniform(&mut r, 0.2, 0.5);
    let lift = rng::uniform(&mut r, 0.15, 0.35);
    let ramp: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 / size as f64 - 0.5, (i / size) as f64 / size as f64 - 0.5);
            ramp_span * ((x * dx + y * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0)
        })
        .collect();
    let bg_max = ramp
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| !m)
        .map(|(&d, _)| d)
        .fold(0.0, f64::max);
    let (mut mcx, mut mcy, mut n) = (0.0, 0.0, 0.0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        mcx += (i % size) as f64;
        mcy += (i / size) as f64;
        n += 1.0;
    }
    let (mcx, mcy) = (mcx / n, mcy / n);
    let depth_raw: Vec<f64> = (0..size * size)
        .map(|i| {
            if mask[i] {
                let d2 = ((i % size) as f64 - mcx).powi(2) + ((i / size) as f64 - mcy).powi(2);
                bg_max + lift + 0.05 * (-d2 / (size * size) as f64 * 16.0).exp()
            } else {
                ramp[i]
            }
        })
        .collect();
    let lo = depth_raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = depth_raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let depth: Vec<f32> = depth_raw.iter().map(|&d| ((d - lo) / (hi - lo)) as f32).collect();

    let mut rgb = Vec::with_capacity(size * size * 3);
    for i in 0..size * size {
        if mask[i] {
            let t = 1.0 - shade * ((i / size) as f64 / size as f64);
            rgb.extend(obj.iter().map(|&c| (c * t).clamp(0.0, 1.0) as f32));
        } else {
            rgb.extend(bg[i].iter().map(|&c| c.clamp(0.0, 1.0) as f32));
        }
    }
    Ok((
        Sample {
            rgb: Image::new(size, size, 3, rgb)?,
            depth: Image::new(size, size, 1, depth)?,
            mask: Image::new(size, size, 1, mask.iter().map(|&m| m as u8 as f32).collect())?,
            seed,
        },
        kind,
    ))
}

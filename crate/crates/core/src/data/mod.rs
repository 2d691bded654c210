//! Synthetic RGB / depth / mask datasets: generation, on-disk layout,
//! loading, augmentation and input resizing.
//!
//! Layout: `<root>/{rgb,depth,mask}/NNNNNN.{ppm,pgm,pgm}` plus `manifest.tsv`
//! with columns `name`, `seed`, `shape`.

pub mod pnm;
pub mod scene;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Rng};

pub use scene::{generate, Sample, SceneSpec, ShapeKind};

pub const MANIFEST: &str = "manifest.tsv";
/// Multi-scale factors applied to the input side before the final resize.
pub const SCALES: [f64; 3] = [0.75, 1.0, 1.25];
/// Scaled sides are snapped to multiples of this.
pub const SCALE_SNAP: usize = 16;
pub const MIN_CROP: f64 = 0.8;

pub fn sample_name(index: usize) -> String {
    format!("{index:06}")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub shape: ShapeKind,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn save_sample(root: &Path, name: &str, s: &Sample) -> Result<()> {
    pnm::save_ppm(&root.join("rgb").join(format!("{name}.ppm")), &s.rgb)?;
    pnm::save_pgm(&root.join("depth").join(format!("{name}.pgm")), &s.depth)?;
    pnm::save_pgm(&root.join("mask").join(format!("{name}.pgm")), &s.mask)
}

/// Generate `n` samples of `spec` under `root`, returning the manifest.
pub fn write_dataset(root: &Path, spec: &SceneSpec, n: usize) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    for sub in ["rgb", "depth", "mask"] {
        create_dir(&root.join(sub))?;
    }
    let mut manifest = Vec::with_capacity(n);
    for i in 0..n {
        let (sample, shape) = generate(spec, i as u64)?;
        let name = sample_name(i);
        save_sample(root, &name, &sample)?;
        manifest.push(ManifestEntry {
            name,
            seed: sample.seed,
            shape,
        });
    }
    let mut text = String::from("name\tseed\tshape\n");
    for m in &manifest {
        let _ = writeln!(text, "{}\t{}\t{}", m.name, m.seed, m.shape);
    }
    pnm::write_atomic(&root.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let parse_err = |offset: usize, msg: String| Error::Parse {
        format: "manifest",
        offset,
        msg,
    };
    let mut offset = 0;
    let mut out = Vec::new();
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if i == 0 {
            if line != "name\tseed\tshape" {
                return Err(parse_err(0, "missing header `name\\tseed\\tshape`".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [name, seed, shape] = cols[..] else {
            return Err(parse_err(start, format!("expected 3 columns, got {}", cols.len())));
        };
        out.push(ManifestEntry {
            name: name.to_string(),
            seed: seed.parse().map_err(|_| parse_err(start, format!("bad seed `{seed}`")))?,
            shape: shape.parse()?,
        });
    }
    if offset == 0 {
        return Err(parse_err(0, "empty manifest".into()));
    }
    Ok(out)
}

pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let file = |sub: &str, ext: &str| -> PathBuf { root.join(sub).join(format!("{}.{ext}", entry.name)) };
    let rgb = pnm::load_ppm(&file("rgb", "ppm"))?;
    let depth = pnm::load_pgm(&file("depth", "pgm"))?;
    let mask = pnm::load_pgm(&file("mask", "pgm"))?;
    if rgb.size() != depth.size() || rgb.size() != mask.size() {
        return Err(Error::shape(
            "load_sample",
            format!("{}: rgb {:?}, depth {:?}, mask {:?}", entry.name, rgb.size(), depth.size(), mask.size()),
        ));
    }
    Ok(Sample {
        rgb,
        depth,
        mask: mask.map(|v| if v > 0.5 { 1.0 } else { 0.0 }),
        seed: entry.seed,
    })
}

/// A dataset directory held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::io(
                root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let entries = read_manifest(root)?;
        let samples = entries.iter().map(|e| load_sample(root, e)).collect::<Result<_>>()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            entries,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn map_all(s: &Sample, f: impl Fn(&Image, bool) -> Result<Image>) -> Result<Sample> {
    Ok(Sample {
        rgb: f(&s.rgb, false)?,
        depth: f(&s.depth, false)?,
        mask: f(&s.mask, true)?,
        seed: s.seed,
    })
}

/// Bilinear for rgb and depth, nearest for the mask.
pub fn resize_to(s: &Sample, width: usize, height: usize) -> Sample {
    map_all(s, |img, is_mask| {
        Ok(if is_mask {
            img.resize_nearest(width, height)
        } else {
            img.resize_bilinear(width, height)
        })
    })
    .expect("resize is infallible")
}

pub fn resize_to_input(s: &Sample, side: usize) -> Sample {
    resize_to(s, side, side)
}

/// Bring a network-resolution map back to the original image size.
pub fn rescale_prediction(pred: &Image, width: usize, height: usize) -> Image {
    pred.resize_bilinear(width, height)
}

/// One draw of the augmentation pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop_w: usize,
    pub crop_h: usize,
    /// Intermediate square side of the multi-scale step.
    pub scale_side: usize,
}

pub fn scale_sides(side: usize) -> [usize; 3] {
    SCALES.map(|f| ((f * side as f64 / SCALE_SNAP as f64).round() as usize).max(1) * SCALE_SNAP)
}

impl AugmentParams {
    /// No flip, full crop and the unit scale.
    pub fn identity(width: usize, height: usize, side: usize) -> Self {
        AugmentParams {
            flip: false,
            crop_x: 0,
            crop_y: 0,
            crop_w: width,
            crop_h: height,
            scale_side: scale_sides(side)[1],
        }
    }

    pub fn sample(rng: &mut Rng, width: usize, height: usize, side: usize) -> Self {
        let flip = rng::bernoulli(rng, 0.5);
        let frac = rng::uniform(rng, MIN_CROP, 1.0);
        let crop_w = ((width as f64 * frac).round() as usize).clamp(1, width);
        let crop_h = ((height as f64 * frac).round() as usize).clamp(1, height);
        let crop_x = rng::below(rng, width - crop_w + 1);
        let crop_y = rng::below(rng, height - crop_h + 1);
        let scale_side = scale_sides(side)[rng::below(rng, SCALES.len())];
        AugmentParams {
            flip,
            crop_x,
            crop_y,
            crop_w,
            crop_h,
            scale_side,
        }
    }

    /// Flip, crop, multi-scale resize, then resize to `side`. The same
    /// geometry is applied to all three maps.
    pub fn apply(&self, s: &Sample, side: usize) -> Result<Sample> {
        let flipped = if self.flip {
            map_all(s, |img, _| Ok(img.flip_horizontal()))?
        } else {
            s.clone()
        };
        let cropped = map_all(&flipped, |img, _| img.crop(self.crop_x, self.crop_y, self.crop_w, self.crop_h))?;
        let scaled = resize_to(&cropped, self.scale_side, self.scale_side);
        Ok(resize_to_input(&scaled, side))
    }
}

pub fn augment(s: &Sample, rng: &mut Rng, side: usize) -> Result<Sample> {
    let (w, h) = s.rgb.size();
    AugmentParams::sample(rng, w, h, side).apply(s, side)
}

#[cfg(test)]
mod tests;

//! Salient-object evaluation: structure measure, max F-measure, max
//! enhanced-alignment measure and mean absolute error.
//!
//! Predictions are single-channel maps in `[0, 1]`; ground truth is
//! binarized at 0.5. Threshold curves use the 256 thresholds `k / 255` with
//! `pred >= threshold`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::pnm;
use crate::error::{Error, Result};
use crate::image::Image;

pub const THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;
pub const ALPHA: f64 = 0.5;
/// Guard used by precision, recall, F and the alignment matrix.
pub const GUARD: f64 = 1e-8;
/// Guard used inside the structure measure.
const S_EPS: f64 = f64::EPSILON;

pub fn threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

/// A prediction / ground-truth pair as `f64` rows.
#[derive(Clone, Debug)]
pub struct Pair {
    pub width: usize,
    pub height: usize,
    pub pred: Vec<f64>,
    pub gt: Vec<bool>,
}

impl Pair {
    pub fn new(pred: &Image, gt: &Image) -> Result<Self> {
        if pred.channels != 1 || gt.channels != 1 || pred.size() != gt.size() {
            return Err(Error::shape(
                "metrics",
                format!(
                    "prediction {}x{}x{} vs ground truth {}x{}x{}",
                    pred.width, pred.height, pred.channels, gt.width, gt.height, gt.channels
                ),
            ));
        }
        Ok(Pair {
            width: pred.width,
            height: pred.height,
            pred: pred.data.iter().map(|&v| (v as f64).clamp(0.0, 1.0)).collect(),
            gt: gt.data.iter().map(|&v| v > 0.5).collect(),
        })
    }

    fn n(&self) -> usize {
        self.pred.len()
    }

    fn positives(&self) -> usize {
        self.gt.iter().filter(|&&g| g).count()
    }

    /// For every pixel, the number of thresholds it reaches minus one
    /// (the largest `k` with `k / 255 <= pred`).
    fn levels(&self) -> Vec<usize> {
        self.pred
            .iter()
            .map(|&p| {
                let mut k = ((p * 255.0).floor() as usize).min(255);
                while k < 255 && threshold(k + 1) <= p {
                    k += 1;
                }
                while k > 0 && threshold(k) > p {
                    k -= 1;
                }
                k
            })
            .collect()
    }

    /// `(predicted-positive, true-positive)` counts for every threshold.
    fn threshold_counts(&self) -> Vec<(usize, usize)> {
        let mut hist = vec![(0usize, 0usize); THRESHOLDS];
        for (&lv, &g) in self.levels().iter().zip(&self.gt) {
            hist[lv].0 += 1;
            hist[lv].1 += g as usize;
        }
        // pixels at level >= k are predicted positive at threshold k
        let mut acc = (0, 0);
        let mut out = vec![(0, 0); THRESHOLDS];
        for k in (0..THRESHOLDS).rev() {
            acc.0 += hist[k].0;
            acc.1 += hist[k].1;
            out[k] = acc;
        }
        out
    }
}

pub fn mae(p: &Pair) -> f64 {
    p.pred.iter().zip(&p.gt).map(|(&x, &g)| (x - g as u8 as f64).abs()).sum::<f64>() / p.n() as f64
}

/// F-measure at each threshold. Fails on an all-background ground truth.
pub fn f_curve(p: &Pair) -> Result<Vec<f64>> {
    let pos = p.positives();
    if pos == 0 {
        return Err(Error::Domain {
            op: "f_measure",
            detail: "ground truth has no salient pixel".into(),
        });
    }
    Ok(p.threshold_counts()
        .into_iter()
        .map(|(pp, tp)| {
            let prec = tp as f64 / (pp as f64 + GUARD);
            let rec = tp as f64 / (pos as f64 + GUARD);
            (1.0 + BETA2) * prec * rec / (BETA2 * prec + rec + GUARD)
        })
        .collect())
}

pub fn max_f(p: &Pair) -> Result<f64> {
    Ok(f_curve(p)?.into_iter().fold(0.0, f64::max))
}

/// Enhanced-alignment score at each threshold.
pub fn e_curve(p: &Pair) -> Vec<f64> {
    let n = p.n() as f64;
    let pos = p.positives();
    p.threshold_counts()
        .into_iter()
        .map(|(pp, tp)| {
            if pos == 0 {
                return (p.n() - pp) as f64 / n;
            }
            if pos == p.n() {
                return pp as f64 / n;
            }
            let mb = pp as f64 / n;
            let mg = pos as f64 / n;
            // pixel classes (binarized pred, gt) and their counts
            let classes = [
                (1.0, 1.0, tp),
                (1.0, 0.0, pp - tp),
                (0.0, 1.0, pos - tp),
                (0.0, 0.0, p.n() - pp - (pos - tp)),
            ];
            classes
                .iter()
                .map(|&(b, g, count)| {
                    let (db, dg) = (b - mb, g - mg);
                    let align = 2.0 * db * dg / (db * db + dg * dg + GUARD);
                    (align + 1.0).powi(2) / 4.0 * count as f64
                })
                .sum::<f64>()
                / n
        })
        .collect()
}

pub fn max_e(p: &Pair) -> f64 {
    e_curve(p).into_iter().fold(0.0, f64::max)
}

fn mean(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (if n > 0 { s / n as f64 } else { 0.0 }, n)
}

/// Foreground-distribution similarity of `values` (pixels where `mask`).
fn object_similarity(values: &[f64], mask: &[bool]) -> f64 {
    let sel: Vec<f64> = values.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let (x, n) = mean(sel.iter().copied());
    let sigma = if n > 1 {
        (sel.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + S_EPS)
}

fn object_score(p: &Pair) -> f64 {
    let u = p.positives() as f64 / p.n() as f64;
    let fg: Vec<f64> = p.pred.iter().zip(&p.gt).map(|(&x, &g)| if g { x } else { 0.0 }).collect();
    let bg: Vec<f64> = p.pred.iter().zip(&p.gt).map(|(&x, &g)| if g { 0.0 } else { 1.0 - x }).collect();
    let not_gt: Vec<bool> = p.gt.iter().map(|g| !g).collect();
    u * object_similarity(&fg, &p.gt) + (1.0 - u) * object_similarity(&bg, &not_gt)
}

/// SSIM-style similarity of one block.
fn block_similarity(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let dof = (n - 1.0).max(1.0);
    let sx = pred.iter().map(|v| (v - x).powi(2)).sum::<f64>() / dof;
    let sy = gt.iter().map(|v| (v - y).powi(2)).sum::<f64>() / dof;
    let sxy = pred.iter().zip(gt).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / dof;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + S_EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point `(x, y)`: rounded foreground centroid plus one, or the
/// rounded image center when there is no foreground.
fn centroid(p: &Pair) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, &g) in p.gt.iter().enumerate() {
        if g {
            sx += (i % p.width) as f64;
            sy += (i / p.width) as f64;
            n += 1;
        }
    }
    if n == 0 {
        return (
            (p.width as f64 / 2.0).round_ties_even() as usize,
            (p.height as f64 / 2.0).round_ties_even() as usize,
        );
    }
    let x = (sx / n as f64).round_ties_even() as usize + 1;
    let y = (sy / n as f64).round_ties_even() as usize + 1;
    (x.min(p.width), y.min(p.height))
}

fn region_score(p: &Pair) -> f64 {
    let (cx, cy) = centroid(p);
    let (w, h) = (p.width, p.height);
    let area = (w * h) as f64;
    let blocks = [(0, cx, 0, cy), (cx, w, 0, cy), (0, cx, cy, h), (cx, w, cy, h)];
    let mut score = 0.0;
    for (x0, x1, y0, y1) in blocks {
        let count = (x1 - x0) * (y1 - y0);
        if count == 0 {
            continue;
        }
        let mut bp = Vec::with_capacity(count);
        let mut bg = Vec::with_capacity(count);
        for y in y0..y1 {
            for x in x0..x1 {
                bp.push(p.pred[y * w + x]);
                bg.push(p.gt[y * w + x] as u8 as f64);
            }
        }
        score += count as f64 / area * block_similarity(&bp, &bg);
    }
    score
}

pub fn s_measure(p: &Pair) -> f64 {
    let (y, _) = mean(p.gt.iter().map(|&g| g as u8 as f64));
    let (mp, _) = mean(p.pred.iter().copied());
    if y == 0.0 {
        1.0 - mp
    } else if y == 1.0 {
        mp
    } else {
        (ALPHA * object_score(p) + (1.0 - ALPHA) * region_score(p)).max(0.0)
    }
}

/// Scores and curves for one image. An all-background ground truth has an
/// all-zero F curve.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyEval {
    pub s_alpha: f64,
    pub max_f: f64,
    pub max_e: f64,
    pub mae: f64,
    pub f_curve: Vec<f64>,
    pub e_curve: Vec<f64>,
}

pub fn evaluate(pred: &Image, gt: &Image) -> Result<SaliencyEval> {
    let p = Pair::new(pred, gt)?;
    let f = if p.positives() == 0 {
        vec![0.0; THRESHOLDS]
    } else {
        f_curve(&p)?
    };
    let e = e_curve(&p);
    Ok(SaliencyEval {
        s_alpha: s_measure(&p),
        max_f: f.iter().copied().fold(0.0, f64::max),
        max_e: e.iter().copied().fold(0.0, f64::max),
        mae: mae(&p),
        f_curve: f,
        e_curve: e,
    })
}

/// Dataset summary: means of S and MAE, maxima of the mean F and E curves.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEval {
    pub s_alpha: f64,
    pub max_f: f64,
    pub max_e: f64,
    pub mae: f64,
}

pub fn aggregate(evals: &[SaliencyEval]) -> DatasetEval {
    let n = evals.len().max(1) as f64;
    let mean_curve = |pick: fn(&SaliencyEval) -> &Vec<f64>| -> f64 {
        (0..THRESHOLDS)
            .map(|k| evals.iter().map(|e| pick(e)[k]).sum::<f64>() / n)
            .fold(0.0, f64::max)
    };
    DatasetEval {
        s_alpha: evals.iter().map(|e| e.s_alpha).sum::<f64>() / n,
        max_f: mean_curve(|e| &e.f_curve),
        max_e: mean_curve(|e| &e.e_curve),
        mae: evals.iter().map(|e| e.mae).sum::<f64>() / n,
    }
}

#[derive(Clone, Debug)]
pub struct DirReport {
    pub images: Vec<(String, SaliencyEval)>,
    pub mean: DatasetEval,
    /// Files that could not be read or scored, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl DirReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("name\tS\tmaxF\tmaxE\tMAE\n");
        let row = |s: &mut String, name: &str, a: f64, f: f64, e: f64, m: f64| {
            let _ = writeln!(s, "{name}\t{a:.4}\t{f:.4}\t{e:.4}\t{m:.4}");
        };
        for (name, e) in &self.images {
            row(&mut s, name, e.s_alpha, e.max_f, e.max_e, e.mae);
        }
        let m = &self.mean;
        row(&mut s, "MEAN", m.s_alpha, m.max_f, m.max_e, m.mae);
        s
    }
}

fn pgm_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeSet::new();
    for ent in rd {
        let ent = ent.map_err(|e| Error::io(dir, e))?;
        let path = ent.path();
        if path.extension().is_some_and(|x| x == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Score every `<name>.pgm` in `pred_dir` against `gt_dir/<name>.pgm`.
///
/// Names present on only one side fail with [`Error::Pairing`] listing
/// them. Unreadable or mismatched pairs are skipped and reported.
pub fn evaluate_dir(pred_dir: &Path, gt_dir: &Path) -> Result<DirReport> {
    let preds = pgm_stems(pred_dir)?;
    let gts = pgm_stems(gt_dir)?;
    let only_pred: Vec<&String> = preds.difference(&gts).collect();
    let only_gt: Vec<&String> = gts.difference(&preds).collect();
    if preds.intersection(&gts).next().is_none() || !only_pred.is_empty() || !only_gt.is_empty() {
        return Err(Error::Pairing(format!(
            "{} matched; only in predictions: {only_pred:?}; only in ground truth: {only_gt:?}",
            preds.intersection(&gts).count()
        )));
    }
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for name in preds.intersection(&gts) {
        let file = |d: &Path| -> PathBuf { d.join(format!("{name}.pgm")) };
        let scored = pnm::load_pgm(&file(pred_dir))
            .and_then(|p| pnm::load_pgm(&file(gt_dir)).and_then(|g| evaluate(&p, &g)));
        match scored {
            Ok(e) => images.push((name.clone(), e)),
            Err(e) => skipped.push((name.clone(), e.to_string())),
        }
    }
    let evals: Vec<SaliencyEval> = images.iter().map(|(_, e)| e.clone()).collect();
    Ok(DirReport {
        mean: aggregate(&evals),
        images,
        skipped,
    })
}

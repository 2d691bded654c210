//! Saliency and depth training objective.
//!
//! Every saliency level contributes `λ·(BCE + IoU + DEC)`; the depth map adds
//! one log-MSE term. Maps are `[H, W]`; saliency maps are logits.

use crate::decoder::Predictions;
use crate::error::{Error, Result, ResultExt};
use crate::tensor::{c, Graph, Real, Tensor, Var};

/// Smoothing of the soft IoU ratio.
pub const IOU_EPS: f64 = 1.0;
/// Offset inside the logarithms of log-MSE.
pub const LOGMSE_EPS: f64 = 1e-2;
/// Guard on the DEC weight sum.
pub const DEC_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Level weights, coarsest supervised map first, final map last.
    pub lambda: [f64; 4],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: [0.4, 0.6, 0.8, 1.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("loss weights must be positive, got {:?}", self.lambda)));
        }
        Ok(())
    }
}

fn same_shape<T: Real>(op: &'static str, g: &Graph<T>, x: Var, t: &Tensor<T>) -> Result<()> {
    if g.shape(x) != t.shape() {
        return Err(Error::shape(op, format!("prediction {:?} vs target {:?}", g.shape(x), t.shape())));
    }
    Ok(())
}

/// Mean binary cross-entropy on logits.
pub fn bce<T: Real>(g: &mut Graph<T>, logits: Var, gt: &Tensor<T>) -> Result<Var> {
    same_shape("bce_loss", g, logits, gt)?;
    let per = g.bce_with_logits(logits, gt)?;
    g.mean(per)
}

/// `1 - (Σpg + ε) / (Σp + Σg - Σpg + ε)` with `p = σ(logits)`.
pub fn iou<T: Real>(g: &mut Graph<T>, logits: Var, gt: &Tensor<T>) -> Result<Var> {
    same_shape("iou_loss", g, logits, gt)?;
    let p = g.sigmoid(logits)?;
    let gv = g.constant(gt.clone());
    let pg = g.mul(p, gv)?;
    let inter = g.sum(pg)?;
    let sp = g.sum(p)?;
    let sg: f64 = gt.data().iter().map(|v| v.as_f64()).sum();
    let union = g.sub(sp, inter)?;
    let union = g.add_scalar(union, sg + IOU_EPS)?;
    let num = g.add_scalar(inter, IOU_EPS)?;
    let ratio = g.div(num, union)?;
    let neg = g.scale(ratio, -1.0)?;
    g.add_scalar(neg, 1.0)
}

fn check_unit_range<T: Real>(op: &'static str, what: &str, t: &Tensor<T>) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        return Err(Error::Domain {
            op,
            detail: format!("{what} value {v} outside [0, 1]"),
        });
    }
    Ok(())
}

/// Mean of `(ln(pred + ε) - ln(gt + ε))²`.
pub fn logmse<T: Real>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>) -> Result<Var> {
    same_shape("logmse_loss", g, pred, gt)?;
    check_unit_range("logmse_loss", "prediction", g.value(pred))?;
    check_unit_range("logmse_loss", "target", gt)?;
    let eps = c::<T>(LOGMSE_EPS);
    let log_gt = Tensor::new(gt.shape(), gt.data().iter().map(|&v| (v + eps).ln()).collect())?;
    let shifted = g.add_scalar(pred, LOGMSE_EPS)?;
    let lp = g.log(shifted)?;
    let lg = g.constant(log_gt);
    let d = g.sub(lp, lg)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// `|pred - gt|` divided by its maximum; all zeros when the maximum is 0.
pub fn dec_weights<T: Real>(pred_depth: &Tensor<T>, gt_depth: &Tensor<T>) -> Result<Tensor<T>> {
    if pred_depth.shape() != gt_depth.shape() {
        return Err(Error::shape(
            "dec_weights",
            format!("prediction {:?} vs target {:?}", pred_depth.shape(), gt_depth.shape()),
        ));
    }
    let err: Vec<T> = pred_depth.data().iter().zip(gt_depth.data()).map(|(&p, &t)| (p - t).abs()).collect();
    let max = err.iter().copied().fold(T::zero(), T::max);
    let w = if max > T::zero() {
        err.into_iter().map(|e| e / max).collect()
    } else {
        vec![T::zero(); err.len()]
    };
    Tensor::new(pred_depth.shape(), w)
}

/// `Σ w·bce / (Σ w + ε)` with constant weights `w`.
pub fn dec<T: Real>(g: &mut Graph<T>, logits: Var, gt: &Tensor<T>, weights: &Tensor<T>) -> Result<Var> {
    same_shape("dec_loss", g, logits, gt)?;
    if weights.shape() != gt.shape() {
        return Err(Error::shape("dec_loss", format!("weights {:?} vs target {:?}", weights.shape(), gt.shape())));
    }
    let per = g.bce_with_logits(logits, gt)?;
    let w = g.constant(weights.clone());
    let weighted = g.mul(per, w)?;
    let s = g.sum(weighted)?;
    let wsum: f64 = weights.data().iter().map(|v| v.as_f64()).sum();
    g.scale(s, 1.0 / (wsum + DEC_EPS))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LevelTerms {
    pub bce: f64,
    pub iou: f64,
    pub dec: f64,
}

impl LevelTerms {
    pub fn sum(&self) -> f64 {
        self.bce + self.iou + self.dec
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub logmse: f64,
    /// Supervised levels; `None` where a level is not supervised.
    pub levels: [Option<LevelTerms>; 4],
}

impl LossReport {
    /// `logMSE + Σ λ_i (BCE_i + IoU_i + DEC_i)` from the stored parts.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        self.logmse
            + self
                .levels
                .iter()
                .zip(w.lambda)
                .filter_map(|(l, lam)| l.map(|l| lam * l.sum()))
                .sum::<f64>()
    }

    pub fn tsv_header() -> String {
        let mut cols = vec!["total".to_string(), "logmse".to_string()];
        for term in ["bce", "iou", "dec"] {
            cols.extend((1..=4).map(|i| format!("{term}{i}")));
        }
        cols.join("\t")
    }

    /// Same column order as [`LossReport::tsv_header`]; unsupervised levels print `-`.
    pub fn to_tsv(&self) -> String {
        let mut cols = vec![format!("{:.6}", self.total), format!("{:.6}", self.logmse)];
        for pick in [|l: &LevelTerms| l.bce, |l: &LevelTerms| l.iou, |l: &LevelTerms| l.dec] {
            cols.extend(self.levels.iter().map(|l| l.map_or("-".into(), |l| format!("{:.6}", pick(&l)))));
        }
        cols.join("\t")
    }
}

/// Ground truth for one sample, `[H, W]` each.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a, T> {
    pub mask: &'a Tensor<T>,
    pub depth: &'a Tensor<T>,
}

/// Full objective for one sample.
///
/// Levels 1-3 are the multi-level maps when present, level 4 the final map.
/// Depth terms are present only when the prediction has a depth map. DEC
/// weights come from the current depth prediction as constants, unless
/// `dec_override` supplies them.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    preds: &Predictions,
    targets: Targets<'_, T>,
    weights: &LossWeights,
    dec_override: Option<&Tensor<T>>,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    if !preds.mls.is_empty() && preds.mls.len() != 3 {
        return Err(Error::shape("total_loss", format!("{} multi-level maps, expected 0 or 3", preds.mls.len())));
    }
    let mut parts: Vec<Var> = Vec::new();
    let mut report = LossReport {
        total: 0.0,
        logmse: 0.0,
        levels: [None; 4],
    };
    let dec_w = match (preds.depth, dec_override) {
        (Some(_), Some(w)) => Some(w.clone()),
        (Some(d), None) => Some(dec_weights(g.value(d), targets.depth)?),
        (None, _) => None,
    };
    if let Some(d) = preds.depth {
        let l = logmse(g, d, targets.depth).ctx(|| "loss term logmse".into())?;
        report.logmse = g.value(l).item().as_f64();
        parts.push(l);
    }
    let mut maps: Vec<(usize, Var)> = preds.mls.iter().copied().enumerate().collect();
    maps.push((3, preds.saliency));
    for (lv, logits) in maps {
        let term = |name: &str| format!("loss term {name}{}", lv + 1);
        let b = bce(g, logits, targets.mask).ctx(|| term("bce"))?;
        let i = iou(g, logits, targets.mask).ctx(|| term("iou"))?;
        let mut lt = LevelTerms {
            bce: g.value(b).item().as_f64(),
            iou: g.value(i).item().as_f64(),
            dec: 0.0,
        };
        let mut sum = g.add(b, i)?;
        if let Some(w) = &dec_w {
            let d = dec(g, logits, targets.mask, w).ctx(|| term("dec"))?;
            lt.dec = g.value(d).item().as_f64();
            sum = g.add(sum, d)?;
        }
        report.levels[lv] = Some(lt);
        parts.push(g.scale(sum, weights.lambda[lv])?);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    report.total = g.value(total).item().as_f64();
    Ok((total, report))
}

#[cfg(test)]
mod tests;

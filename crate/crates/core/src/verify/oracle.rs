//! Plain-loop reference implementations used to cross-check the graph ops
//! and the metric fast paths. Deliberately naive: no shared code with the
//! implementations they check.

use crate::nn::ParamStore;
use crate::swin::WindowAttention;

/// Dense attention over all `n` tokens of `x` (`[n, dim]` row-major), using
/// the projections of `att`. `allowed` decides which pairs interact and
/// `bias(p, q, head)` is added to their logit.
#[allow(clippy::too_many_arguments)]
pub fn dense_attention(
    x: &[f64],
    n: usize,
    dim: usize,
    heads: usize,
    store: &ParamStore<f64>,
    att: &WindowAttention,
    allowed: impl Fn(usize, usize) -> bool,
    bias: impl Fn(usize, usize, usize) -> f64,
) -> Vec<f64> {
    let wq = store.get(att.qkv.weight).value.data();
    let bq = store.get(att.qkv.bias.expect("qkv bias")).value.data();
    let wp = store.get(att.proj.weight).value.data();
    let bp = store.get(att.proj.bias.expect("proj bias")).value.data();
    let lin = |row: &[f64], w: &[f64], b: &[f64], out: usize| -> Vec<f64> {
        (0..out)
            .map(|o| b[o] + (0..row.len()).map(|i| row[i] * w[i * out + o]).sum::<f64>())
            .collect()
    };
    let qkv: Vec<Vec<f64>> = (0..n).map(|t| lin(&x[t * dim..(t + 1) * dim], wq, bq, 3 * dim)).collect();
    let hd = dim / heads;
    let mut ctx = vec![0.0; n * dim];
    for h in 0..heads {
        for p in 0..n {
            let mut logits = Vec::new();
            for q in 0..n {
                if !allowed(p, q) {
                    continue;
                }
                let dot: f64 = (0..hd).map(|i| qkv[p][h * hd + i] * qkv[q][dim + h * hd + i]).sum();
                logits.push((q, dot / (hd as f64).sqrt() + bias(p, q, h)));
            }
            let m = logits.iter().map(|l| l.1).fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l.1 - m).exp()).sum();
            for &(q, l) in &logits {
                let a = (l - m).exp() / z;
                for i in 0..hd {
                    ctx[p * dim + h * hd + i] += a * qkv[q][2 * dim + h * hd + i];
                }
            }
        }
    }
    (0..n).flat_map(|t| lin(&ctx[t * dim..(t + 1) * dim], wp, bp, dim)).collect()
}

/// Shifted-window attention on a square `grid` by brute force: token `p`
/// sits at `p - shift (mod grid)` after the roll; two tokens interact when
/// they share a window and, for `shift > 0`, a region of the rolled map.
/// The bias is read from the table at the rolled relative offset.
pub fn shifted_window_attention(
    x: &[f64],
    grid: usize,
    win: usize,
    shift: usize,
    store: &ParamStore<f64>,
    att: &WindowAttention,
) -> Vec<f64> {
    let table = att.bias_table.map(|id| store.get(id).value.data().to_vec());
    let heads = att.heads;
    let rolled = |p: usize| ((p / grid + grid - shift) % grid, (p % grid + grid - shift) % grid);
    let region = |v: usize| {
        if v < grid - win {
            0
        } else if v < grid - shift {
            1
        } else {
            2
        }
    };
    let allowed = |p: usize, q: usize| {
        let (a, b) = (rolled(p), rolled(q));
        (a.0 / win, a.1 / win) == (b.0 / win, b.1 / win)
            && (shift == 0 || (region(a.0), region(a.1)) == (region(b.0), region(b.1)))
    };
    let bias = |p: usize, q: usize, h: usize| {
        let Some(table) = &table else { return 0.0 };
        let (a, b) = (rolled(p), rolled(q));
        let dy = (a.0 % win) as i64 - (b.0 % win) as i64 + win as i64 - 1;
        let dx = (a.1 % win) as i64 - (b.1 % win) as i64 + win as i64 - 1;
        table[(dy as usize * (2 * win - 1) + dx as usize) * heads + h]
    };
    dense_attention(x, grid * grid, att.dim, heads, store, att, allowed, bias)
}

pub fn naive_mae(pred: &[f64], gt: &[bool]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred[i] - if gt[i] { 1.0 } else { 0.0 }).abs();
    }
    s / pred.len() as f64
}

/// F-measure (beta² = 0.3) at thresholds `k / 255`, one pixel loop each.
pub fn naive_f_curve(pred: &[f64], gt: &[bool]) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 0..256 {
        let thr = k as f64 / 255.0;
        let (mut tp, mut pp, mut pos) = (0.0, 0.0, 0.0);
        for i in 0..pred.len() {
            let b = pred[i] >= thr;
            if b {
                pp += 1.0;
            }
            if gt[i] {
                pos += 1.0;
                if b {
                    tp += 1.0;
                }
            }
        }
        let prec = tp / (pp + 1e-8);
        let rec = tp / (pos + 1e-8);
        out.push(1.3 * prec * rec / (0.3 * prec + rec + 1e-8));
    }
    out
}

/// Enhanced alignment at thresholds `k / 255`, scored pixel by pixel.
pub fn naive_e_curve(pred: &[f64], gt: &[bool]) -> Vec<f64> {
    let n = pred.len() as f64;
    let g: Vec<f64> = gt.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mg = g.iter().sum::<f64>() / n;
    let mut out = Vec::new();
    for k in 0..256 {
        let thr = k as f64 / 255.0;
        let b: Vec<f64> = pred.iter().map(|&v| if v >= thr { 1.0 } else { 0.0 }).collect();
        let mb = b.iter().sum::<f64>() / n;
        let mut s = 0.0;
        for i in 0..b.len() {
            s += if mg == 0.0 {
                1.0 - b[i]
            } else if mg == 1.0 {
                b[i]
            } else {
                let (db, dg) = (b[i] - mb, g[i] - mg);
                let align = 2.0 * db * dg / (db * db + dg * dg + 1e-8);
                (align + 1.0) * (align + 1.0) / 4.0
            };
        }
        out.push(s / n);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn naive_bce(logits: &[f64], gt: &[f64]) -> Vec<f64> {
    logits
        .iter()
        .zip(gt)
        .map(|(&x, &g)| -(g * sigmoid(x).ln() + (1.0 - g) * (1.0 - sigmoid(x)).ln()))
        .collect()
}

pub fn naive_iou(logits: &[f64], gt: &[f64]) -> f64 {
    let p: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();
    let inter: f64 = p.iter().zip(gt).map(|(a, b)| a * b).sum();
    let union: f64 = p.iter().sum::<f64>() + gt.iter().sum::<f64>() - inter;
    1.0 - (inter + 1.0) / (union + 1.0)
}

/// `Σ λ (BCE + IoU + DEC) + logMSE` straight from the raw maps. `maps` are
/// the supervised logits in level order paired with their weight.
pub fn naive_total_loss(maps: &[(&[f64], f64)], mask: &[f64], depth: Option<(&[f64], &[f64])>) -> f64 {
    let n = mask.len() as f64;
    let weights = depth.map(|(pred, gt)| {
        let err: Vec<f64> = pred.iter().zip(gt).map(|(a, b)| (a - b).abs()).collect();
        let max = err.iter().copied().fold(0.0, f64::max);
        err.iter().map(|e| if max > 0.0 { e / max } else { 0.0 }).collect::<Vec<_>>()
    });
    let mut total = 0.0;
    for &(x, lambda) in maps {
        let bce = naive_bce(x, mask);
        let mut term = bce.iter().sum::<f64>() / n + naive_iou(x, mask);
        if let Some(w) = &weights {
            let num: f64 = bce.iter().zip(w).map(|(b, w)| b * w).sum();
            term += num / (w.iter().sum::<f64>() + 1e-8);
        }
        total += lambda * term;
    }
    if let Some((pred, gt)) = depth {
        total += pred
            .iter()
            .zip(gt)
            .map(|(a, b)| ((a + 0.01).ln() - (b + 0.01).ln()).powi(2))
            .sum::<f64>()
            / n;
    }
    total
}

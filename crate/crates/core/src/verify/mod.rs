//! Self-verification suites: shape algebra, finite-difference gradient
//! checks and brute-force oracles. Each check reports the measured error
//! next to its tolerance.

pub mod oracle;

use std::fmt;
use std::str::FromStr;

use crate::decoder::{Dftr, Mfa, Mff, ModelConfig, Predictions};
use crate::error::{Error, Result};
use crate::gradcheck::{check_inputs, check_params, check_params_sampled, project, random_tensor, GradCheck};
use crate::image::Image;
use crate::loss::{total_loss, LossWeights, Targets};
use crate::metrics::{self, Pair};
use crate::nn::{ParamBuilder, ParamStore, Session};
use crate::rng;
use crate::swin::{
    BlockSpec, Encoder, EncoderConfig, LevelShape, PatchEmbed, PatchMerge, SwinBlock, TokenMap, WindowAttention, WindowLayout,
};
use crate::tensor::{Graph, Tensor, Var};

/// Op-level finite-difference tolerance.
pub const OP_RTOL: f64 = 1e-4;
/// Whole-model finite-difference tolerance.
pub const MODEL_RTOL: f64 = 1e-3;
pub const ATTENTION_TOL: f64 = 1e-6;
pub const METRIC_TOL: f64 = 1e-9;
pub const LOSS_TOL: f64 = 1e-6;
/// Every loss term on a perfect prediction stays at or below this.
pub const PERFECT_LOSS_TOL: f64 = 1e-5;
/// Ideal metric scores on `pred == gt`; E-measure carries a 1e-8 guard.
pub const IDEAL_TOL: f64 = 1e-6;
const ATOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured < tolerance`.
    pub fn below(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            tolerance,
            passed: measured < tolerance,
        }
    }

    /// Passes when `measured <= tolerance`.
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Check {
            passed: measured <= tolerance,
            ..Check::below(name, measured, tolerance)
        }
    }

    /// Exact property; measured is 0 when it holds, 1 otherwise.
    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Check::at_most(name, if ok { 0.0 } else { 1.0 }, 0.0)
    }

    fn grad(r: GradCheck) -> Self {
        let tol = r.rtol;
        Check::below(r.name, r.max_err, tol)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status}\t{}\t{:.3e}\t{:.0e}", self.name, self.measured, self.tolerance)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Shapes,
    Gradcheck,
    Oracle,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(Suite::Shapes),
            "gradcheck" => Ok(Suite::Gradcheck),
            "oracle" => Ok(Suite::Oracle),
            "all" => Ok(Suite::All),
            _ => Err(Error::Config(format!("unknown suite `{s}`, expected shapes, gradcheck, oracle or all"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Shapes => "shapes",
            Suite::Gradcheck => "gradcheck",
            Suite::Oracle => "oracle",
            Suite::All => "all",
        })
    }
}

pub fn run(suite: Suite) -> Result<Vec<Check>> {
    match suite {
        Suite::Shapes => shapes(),
        Suite::Gradcheck => gradcheck(),
        Suite::Oracle => oracles(),
        Suite::All => {
            let mut out = shapes()?;
            out.extend(gradcheck()?);
            out.extend(oracles()?);
            Ok(out)
        }
    }
}

fn randomize(store: &mut ParamStore<f64>, seed: u64, amp: f64) {
    let mut r = rng::seeded(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng::uniform(&mut r, -amp, amp);
        }
    }
}

// ---------------------------------------------------------------- shapes

/// Encoder stage shapes on the default configuration and the decoder
/// stream ladder for every reduction ratio.
pub fn shapes() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let enc = EncoderConfig::default();
    let mut b = ParamBuilder::new(0);
    let encoder = Encoder::new(&mut b, &enc)?;
    let store = b.finish().cast::<f32>();
    let mut s = Session::inference(&store);
    let img = Tensor::full(&[enc.img_size, enc.img_size, 3], 0.5f32);
    let pyramid = encoder.forward(&mut s, &img)?;
    let side = enc.img_size;
    for (k, t) in pyramid.iter().enumerate() {
        // (H/4 x W/4, C), (H/8 x W/8, 2C), ...
        let grid = side / (4 << k);
        let want = [grid * grid, enc.embed_dim << k];
        out.push(Check::holds(
            format!("encoder stage {} is {}x{}", k + 1, want[0], want[1]),
            s.g.shape(t.x) == want && t.grid == (grid, grid),
        ));
    }
    let formula = enc.stage_shapes();
    out.push(Check::holds(
        "encoder stage_shapes agrees with forward",
        pyramid.iter().zip(&formula).all(|(t, l)| s.g.shape(t.x) == [l.tokens, l.channels]),
    ));

    for down in [4, 8, 16] {
        let mut cfg = ModelConfig::default();
        cfg.decoder.down = down;
        let (model, store) = Dftr::new(&cfg, 0)?;
        let store = store.cast::<f32>();
        let mut s = Session::inference(&store);
        let (p, feats) = model.forward_traced(&mut s, &img)?;
        let levels = cfg.decoder.level_shapes(&cfg.encoder);
        out.push(Check::holds(
            format!("decoder ladder, down {down}"),
            feats.check_ladder(&s, &levels).is_ok() && feats.depth.is_some(),
        ));
        let full = [side, side];
        out.push(Check::holds(
            format!("decoder outputs {side}x{side}, down {down}"),
            s.g.shape(p.saliency) == full
                && p.depth.is_some_and(|d| s.g.shape(d) == full)
                && p.mls.len() == 3
                && p.mls.iter().all(|&m| s.g.shape(m) == full),
        ));
    }
    Ok(out)
}

// ------------------------------------------------------------- gradcheck

fn op(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<Check> {
    Ok(Check::grad(check_inputs(name, inputs, OP_RTOL, ATOL, f)?))
}

fn params(name: &str, store: &ParamStore<f64>, f: impl Fn(&mut Session<f64>) -> Result<Var>) -> Result<Check> {
    Ok(Check::grad(check_params(name, store, OP_RTOL, ATOL, f)?))
}

/// Central differences against the tape for every graph op, each layer and
/// the whole tiny model under the training objective.
pub fn gradcheck() -> Result<Vec<Check>> {
    let r = |shape: &[usize], seed: u64| random_tensor(shape, -2.0, 2.0, seed);
    let pos = |shape: &[usize], seed: u64| random_tensor(shape, 0.5, 2.0, seed);
    let mut out = vec![
        op("op add/sub broadcast", &[r(&[3, 4], 1), r(&[4], 2)], |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let s = g.sub(s, v[1])?;
            project(g, s, 3)
        })?,
        op("op mul/div broadcast", &[r(&[3, 4], 4), pos(&[4], 5)], |g, v| {
            let m = g.mul(v[0], v[1])?;
            let d = g.div(m, v[1])?;
            let d = g.div(d, v[1])?;
            project(g, d, 6)
        })?,
        op("op gelu", &[r(&[17], 7)], |g, v| {
            let y = g.gelu(v[0])?;
            project(g, y, 8)
        })?,
        op("op sigmoid", &[r(&[3, 5], 9)], |g, v| {
            let y = g.sigmoid(v[0])?;
            project(g, y, 10)
        })?,
        op("op exp/scale/add_scalar", &[r(&[3, 5], 11)], |g, v| {
            let y = g.exp(v[0])?;
            let y = g.scale(y, 0.7)?;
            let y = g.add_scalar(y, 2.0)?;
            project(g, y, 12)
        })?,
        op("op log", &[pos(&[3, 5], 13)], |g, v| {
            let y = g.log(v[0])?;
            project(g, y, 14)
        })?,
        op("op matmul", &[r(&[5, 7], 15), r(&[7, 3], 16)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 17)
        })?,
        op("op batched matmul", &[r(&[2, 3, 4], 18), r(&[2, 4, 2], 19), r(&[4, 3], 20)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let z = g.matmul(v[0], v[2])?;
            let p = project(g, y, 21)?;
            let q = project(g, z, 22)?;
            g.add(p, q)
        })?,
        op("op softmax", &[r(&[4, 6], 23)], |g, v| {
            let y = g.softmax_lastdim(v[0])?;
            project(g, y, 24)
        })?,
        op("op layernorm", &[r(&[3, 8], 25), pos(&[8], 26), r(&[8], 27)], |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 28)
        })?,
        op("op reshape/permute/transpose/gather", &[r(&[2, 3, 4], 29)], |g, v| {
            let p = g.permute(v[0], &[2, 0, 1])?;
            let q = g.reshape(p, &[8, 3])?;
            let q = g.gather_rows(q, &[7, 0, 0, 3])?;
            let t = g.transpose_last(q)?;
            project(g, t, 30)
        })?,
        op("op concat/narrow/split", &[r(&[2, 3], 31), r(&[2, 5], 32)], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let n = g.narrow(c, 1, 2, 4)?;
            let parts = g.split(c, 1, &[6, 2])?;
            let a = project(g, n, 33)?;
            let b = project(g, parts[1], 34)?;
            g.add(a, b)
        })?,
        op("op upsample2x", &[r(&[9, 2], 35)], |g, v| {
            let y = g.upsample2x(v[0], (3, 3))?;
            project(g, y, 36)
        })?,
        op("op resize_bilinear", &[r(&[9, 2], 37)], |g, v| {
            let y = g.resize_bilinear(v[0], (3, 3), (7, 5))?;
            project(g, y, 38)
        })?,
        op("op sum/mean", &[r(&[3, 4], 39)], |g, v| {
            let w = g.constant(r(&[3, 4], 40));
            let m = g.mul(v[0], w)?;
            let s = g.sum(m)?;
            let a = g.mul(m, m)?;
            let a = g.mean(a)?;
            g.add(s, a)
        })?,
    ];
    let target = Tensor::new(&[10], [1., 0., 1., 1., 0., 0., 1., 0., 1., 0.].to_vec())?;
    out.push(op("op bce_with_logits", &[r(&[10], 41)], |g, v| {
        let y = g.bce_with_logits(v[0], &target)?;
        project(g, y, 42)
    })?);

    out.extend(layer_checks()?);
    out.push(loss_check()?);
    out.push(model_check()?);
    Ok(out)
}

fn layer_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for shift in [0, 1] {
        let mut b = ParamBuilder::new(60);
        let att = WindowAttention::new(&mut b, "a", 4, 2, 2, true)?;
        let mut store = b.finish();
        randomize(&mut store, 61, 0.5);
        let layout = WindowLayout::new((4, 4), 2, shift)?;
        let x = random_tensor(&[16, 4], -1.0, 1.0, 62);
        out.push(params(&format!("window attention, shift {shift}"), &store, |s| {
            let v = s.g.constant(x.clone());
            let y = att.forward(s, v, &layout)?;
            project(&mut s.g, y, 63)
        })?);
    }

    let spec = BlockSpec {
        dim: 4,
        heads: 2,
        window: 2,
        mlp_ratio: 2,
        rel_pos_bias: true,
    };
    let mut b = ParamBuilder::new(64);
    let block = SwinBlock::new(&mut b, "b", (4, 4), spec, true)?;
    let mut store = b.finish();
    randomize(&mut store, 65, 0.5);
    let x = random_tensor(&[16, 4], -1.0, 1.0, 66);
    out.push(params("swin block", &store, |s| {
        let v = s.g.constant(x.clone());
        let y = block.forward(s, v)?;
        project(&mut s.g, y, 67)
    })?);

    let mut b = ParamBuilder::new(68);
    let embed = PatchEmbed::new(&mut b, "pe", 3);
    let mut store = b.finish();
    randomize(&mut store, 69, 0.5);
    let img = random_tensor(&[8, 8, 3], 0.0, 1.0, 70);
    out.push(params("patch embed", &store, |s| {
        let y = embed.forward(s, &img)?;
        project(&mut s.g, y.x, 71)
    })?);

    let mut b = ParamBuilder::new(72);
    let merge = PatchMerge::new(&mut b, "pm", (4, 4), 2)?;
    let mut store = b.finish();
    randomize(&mut store, 73, 0.5);
    let x = random_tensor(&[16, 2], -1.0, 1.0, 74);
    out.push(params("patch merge", &store, |s| {
        let v = s.g.constant(x.clone());
        let y = merge.forward(s, TokenMap::new(v, (4, 4)))?;
        project(&mut s.g, y.x, 75)
    })?);

    let enc = EncoderConfig {
        window: 2,
        mlp_ratio: 1,
        ..EncoderConfig::default()
    };
    let fine = LevelShape {
        tokens: 16,
        channels: 4,
        grid: (4, 4),
    };
    let mut b = ParamBuilder::new(76);
    let mfa = Mfa::new(&mut b, "mfa", &enc, fine, 1)?;
    let mut store = b.finish();
    randomize(&mut store, 77, 0.5);
    let (coarse, fine_x) = (random_tensor(&[4, 8], -1.0, 1.0, 78), random_tensor(&[16, 4], -1.0, 1.0, 79));
    out.push(params("multi-scale aggregation", &store, |s| {
        let c = s.g.constant(coarse.clone());
        let f = s.g.constant(fine_x.clone());
        let z = mfa.forward(s, TokenMap::new(c, (2, 2)), TokenMap::new(f, (4, 4)))?;
        project(&mut s.g, z.x, 80)
    })?);

    let level = LevelShape {
        tokens: 16,
        channels: 4,
        grid: (4, 4),
    };
    let mut b = ParamBuilder::new(81);
    let mff = Mff::new(&mut b, "mff", &enc, level, 1)?;
    let mut store = b.finish();
    randomize(&mut store, 82, 0.5);
    let (zs, zd) = (random_tensor(&[16, 4], -1.0, 1.0, 83), random_tensor(&[16, 4], -1.0, 1.0, 84));
    out.push(params("cross-stream fusion", &store, |s| {
        let a = s.g.constant(zs.clone());
        let d = s.g.constant(zd.clone());
        let (ys, yd) = mff.forward(s, TokenMap::new(a, (4, 4)), TokenMap::new(d, (4, 4)))?;
        let p = project(&mut s.g, ys.x, 85)?;
        let q = project(&mut s.g, yd.x, 86)?;
        s.g.add(p, q)
    })?);
    Ok(out)
}

fn binary_mask(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng::bernoulli(&mut r, 0.4) as u8 as f64).collect()).expect("shape")
}

/// The full objective with respect to every predicted map. DEC weights
/// are held fixed so the objective is a smooth function of the maps.
fn loss_check() -> Result<Check> {
    let shape = [6, 6];
    let mask = binary_mask(&shape, 90);
    let depth = random_tensor(&shape, 0.0, 1.0, 91);
    let dec_w = random_tensor(&shape, 0.0, 1.0, 92);
    let inputs: Vec<Tensor<f64>> = (0..5).map(|k| random_tensor(&shape, -2.0, 2.0, 93 + k)).collect();
    op("training objective", &inputs, |g, v| {
        let depth_map = g.sigmoid(v[4])?;
        let preds = Predictions {
            saliency: v[3],
            depth: Some(depth_map),
            mls: v[..3].to_vec(),
        };
        let targets = Targets {
            mask: &mask,
            depth: &depth,
        };
        total_loss(g, &preds, targets, &LossWeights::default(), Some(&dec_w)).map(|(t, _)| t)
    })
}

/// Configuration (e) at toy width, trained objective, every parameter tensor probed.
pub fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.img_size = 32;
    cfg.encoder.embed_dim = 2;
    cfg.encoder.depths = [1, 1, 1, 1];
    cfg.encoder.heads = [1, 1, 1, 1];
    cfg.encoder.window = 2;
    cfg.encoder.mlp_ratio = 1;
    cfg.decoder.down = 2;
    cfg.decoder.block_depth = 1;
    cfg
}

/// Scalars probed per parameter tensor in the whole-model check.
pub const MODEL_PROBES: usize = 32;

fn model_check() -> Result<Check> {
    let cfg = tiny_model_config();
    let (model, mut store) = Dftr::new(&cfg, 5)?;
    randomize(&mut store, 6, 0.3);
    let side = cfg.encoder.img_size;
    let img = random_tensor(&[side, side, 3], 0.0, 1.0, 7);
    let mask = binary_mask(&[side, side], 8);
    let depth = random_tensor(&[side, side], 0.0, 1.0, 9);
    let dec_w = random_tensor(&[side, side], 0.0, 1.0, 10);
    let r = check_params_sampled("tiny model, training objective", &store, MODEL_RTOL, ATOL, MODEL_PROBES, |s| {
        let p = model.forward(s, &img)?;
        let targets = Targets {
            mask: &mask,
            depth: &depth,
        };
        total_loss(&mut s.g, &p, targets, &LossWeights::default(), Some(&dec_w)).map(|(t, _)| t)
    })?;
    Ok(Check::grad(r))
}

// --------------------------------------------------------------- oracles

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Window attention against brute-force dense attention.
fn attention_check(grid: usize, win: usize, shift: usize, seed: u64) -> Result<Check> {
    let (dim, heads) = (6, 2);
    let mut b = ParamBuilder::new(seed);
    let att = WindowAttention::new(&mut b, "a", dim, heads, win, true)?;
    let mut store = b.finish();
    randomize(&mut store, seed + 1, 0.5);
    let layout = WindowLayout::new((grid, grid), win, shift)?;
    let x = random_tensor(&[grid * grid, dim], -1.0, 1.0, seed + 2);
    let mut s = Session::inference(&store);
    let v = s.g.constant(x.clone());
    let y = att.forward(&mut s, v, &layout)?;
    let want = oracle::shifted_window_attention(x.data(), grid, win, shift, &store, &att);
    let what = if win == grid {
        format!("full-grid window attention vs dense, {grid}x{grid}")
    } else {
        format!("shifted window attention vs masked dense, {grid}x{grid} window {win} shift {shift}")
    };
    Ok(Check::below(what, max_diff(s.g.value(y).data(), &want), ATTENTION_TOL))
}

/// Random 16x16 prediction, half of it on exact threshold levels, and a
/// mask with both classes present.
pub fn random_metric_case(seed: u64) -> Result<(Image, Image)> {
    let mut r = rng::seeded(seed);
    let pred: Vec<f32> = (0..256)
        .map(|_| {
            if rng::bernoulli(&mut r, 0.5) {
                rng::below(&mut r, 256) as f32 / 255.0
            } else {
                rng::unit(&mut r) as f32
            }
        })
        .collect();
    let mut gt: Vec<f32> = (0..256).map(|_| rng::bernoulli(&mut r, 0.3) as u8 as f32).collect();
    gt[0] = 1.0;
    gt[1] = 0.0;
    Ok((Image::new(16, 16, 1, pred)?, Image::new(16, 16, 1, gt)?))
}

/// Metric fast paths against naive loops, and ideal scores on `pred == gt`.
pub fn metric_checks() -> Result<Vec<Check>> {
    let (mut mae, mut f, mut e, mut fmax, mut emax) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..20 {
        let (pred, gt) = random_metric_case(seed)?;
        let p = Pair::new(&pred, &gt)?;
        let nf = oracle::naive_f_curve(&p.pred, &p.gt);
        let ne = oracle::naive_e_curve(&p.pred, &p.gt);
        mae = mae.max((metrics::mae(&p) - oracle::naive_mae(&p.pred, &p.gt)).abs());
        f = f.max(max_diff(&metrics::f_curve(&p)?, &nf));
        e = e.max(max_diff(&metrics::e_curve(&p), &ne));
        fmax = fmax.max((metrics::max_f(&p)? - nf.iter().copied().fold(0.0, f64::max)).abs());
        emax = emax.max((metrics::max_e(&p) - ne.iter().copied().fold(0.0, f64::max)).abs());
    }
    let mut out = vec![
        Check::below("MAE vs naive loop, 20 random 16x16", mae, METRIC_TOL),
        Check::below("F curve vs naive loop, 20 random 16x16", f, METRIC_TOL),
        Check::below("max F vs naive loop", fmax, METRIC_TOL),
        Check::below("E curve vs naive loop, 20 random 16x16", e, METRIC_TOL),
        Check::below("max E vs naive loop", emax, METRIC_TOL),
    ];
    let (_, gt) = random_metric_case(99)?;
    let ev = metrics::evaluate(&gt, &gt)?;
    out.extend([
        Check::below("ideal MAE on pred == gt", ev.mae, IDEAL_TOL),
        Check::below("ideal max F on pred == gt", (1.0 - ev.max_f).abs(), IDEAL_TOL),
        Check::below("ideal max E on pred == gt", (1.0 - ev.max_e).abs(), IDEAL_TOL),
        Check::below("ideal S on pred == gt", (1.0 - ev.s_alpha).abs(), IDEAL_TOL),
    ]);
    Ok(out)
}

/// Loss recomposition, the per-pixel formula, perfect-prediction floors and
/// the default level weights.
pub fn loss_checks() -> Result<Vec<Check>> {
    let side = 8;
    let shape = [side, side];
    let mask = binary_mask(&shape, 120);
    let depth = random_tensor(&shape, 0.0, 1.0, 121);
    let logits: Vec<Tensor<f64>> = (0..4).map(|k| random_tensor(&shape, -3.0, 3.0, 122 + k)).collect();
    let pred_depth = random_tensor(&shape, 0.05, 0.95, 126);
    let weights = LossWeights::default();

    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = logits.iter().map(|t| g.constant(t.clone())).collect();
    let d = g.constant(pred_depth.clone());
    let preds = Predictions {
        saliency: vars[3],
        depth: Some(d),
        mls: vars[..3].to_vec(),
    };
    let targets = Targets {
        mask: &mask,
        depth: &depth,
    };
    let (_, report) = total_loss(&mut g, &preds, targets, &weights, None)?;
    let maps: Vec<(&[f64], f64)> = logits.iter().map(|t| t.data()).zip(weights.lambda).collect();
    let naive = oracle::naive_total_loss(&maps, mask.data(), Some((pred_depth.data(), depth.data())));

    // saturated logits on the right side of the mask, exact depth
    let mut g = Graph::<f64>::new();
    let perfect = Tensor::new(&shape, mask.data().iter().map(|&m| if m > 0.5 { 40.0 } else { -40.0 }).collect())?;
    let sal = g.constant(perfect.clone());
    let mls = (0..3).map(|_| g.constant(perfect.clone())).collect();
    let d = g.constant(depth.clone());
    let preds = Predictions {
        saliency: sal,
        depth: Some(d),
        mls,
    };
    let (_, ideal) = total_loss(&mut g, &preds, targets, &weights, None)?;
    let worst = ideal
        .levels
        .iter()
        .flatten()
        .flat_map(|l| [l.bce, l.iou, l.dec])
        .chain([ideal.logmse, ideal.total])
        .fold(0.0, f64::max);

    Ok(vec![
        Check::below("loss recomposes from reported parts", (report.recompose(&weights) - report.total).abs(), LOSS_TOL),
        Check::below("loss vs naive per-pixel formula", (report.total - naive).abs(), LOSS_TOL),
        Check::at_most("every loss term on a perfect prediction", worst, PERFECT_LOSS_TOL),
        Check::at_most("DEC with exact depth", ideal.levels.iter().flatten().map(|l| l.dec).fold(0.0, f64::max), 0.0),
        Check::holds("default level weights 0.4, 0.6, 0.8, 1.0", weights.lambda == [0.4, 0.6, 0.8, 1.0]),
    ])
}

/// Attention against dense brute force, metric fast paths against naive
/// loops, and the loss against its per-pixel formula.
pub fn oracles() -> Result<Vec<Check>> {
    let mut out = attention_checks()?;
    out.extend(metric_checks()?);
    out.extend(loss_checks()?);
    Ok(out)
}

/// Full-grid windows against dense attention and shifted windows against
/// masked dense attention, on 4x4 and 8x8 grids.
pub fn attention_checks() -> Result<Vec<Check>> {
    Ok(vec![
        attention_check(4, 4, 0, 100)?,
        attention_check(8, 8, 0, 101)?,
        attention_check(4, 2, 1, 102)?,
        attention_check(8, 4, 2, 103)?,
        attention_check(8, 2, 1, 104)?,
    ])
}

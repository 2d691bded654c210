//! SGD training with a single triangular learning-rate cycle, two
//! parameter groups, binary checkpoints and a tab-separated step log.

pub mod checkpoint;

use std::fmt::Write as _;

use crate::data::{self, Sample};
use crate::decoder::{Dftr, ModelConfig};
use crate::error::{Error, Result};
use crate::loss::{self, LevelTerms, LossReport, LossWeights, Targets};
use crate::nn::{ParamGroup, ParamStore, Session};
use crate::rng;
use crate::tensor::Tensor;

pub use checkpoint::Checkpoint;

/// Learning rates never drop below this fraction of their maximum.
pub const LR_FLOOR: f64 = 1e-3;

const ORDER_STREAM: u64 = 0x006f_7264_6572;
const AUGMENT_STREAM: u64 = 0x6175_676d;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr_backbone: f64,
    pub max_lr_other: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Also checkpoint after every this many epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Rescale the batch gradient to at most this global L2 norm; 0 disables.
    pub grad_clip: f64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 4,
            max_lr_backbone: 0.002,
            max_lr_other: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            checkpoint_every: 10,
            grad_clip: 0.0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        for (k, v) in [
            ("train.max_lr_backbone", self.max_lr_backbone),
            ("train.max_lr_other", self.max_lr_other),
            ("train.momentum", self.momentum),
            ("train.weight_decay", self.weight_decay),
            ("train.grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be a finite non-negative number, got {v}")));
            }
        }
        self.loss.validate()
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * self.steps_per_epoch(samples)
    }
}

/// One triangular cycle: linear 0 -> `max_lr` over `[0, total/2]`, then
/// `max_lr` -> 0 over `[total/2, total - 1]`, floored at `max_lr * LR_FLOOR`.
/// A single-step run uses `max_lr`.
pub fn cyclic_lr(step: usize, total_steps: usize, max_lr: f64) -> f64 {
    let peak = total_steps / 2;
    let floor = max_lr * LR_FLOOR;
    if step == peak {
        return max_lr;
    }
    let frac = if step < peak {
        step as f64 / peak as f64
    } else {
        let tail = total_steps.saturating_sub(1).max(peak + 1) - peak;
        1.0 - (step - peak) as f64 / tail as f64
    };
    (max_lr * frac.clamp(0.0, 1.0)).max(floor)
}

/// SGD with momentum and L2 weight decay:
/// `v <- m v + g + wd p`, `p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per parameter, in store order.
    pub velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(store: &ParamStore<f32>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// `grads` is indexed like the store; every parameter needs a gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &[Option<Tensor<f32>>],
        lr: impl Fn(ParamGroup) -> f64,
    ) -> Result<()> {
        if grads.len() != store.len() || self.velocity.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer has {} buffers and {} gradients for {} parameters",
                self.velocity.len(),
                grads.len(),
                store.len()
            )));
        }
        for (p, g) in store.iter().zip(grads) {
            if g.is_none() {
                return Err(Error::MissingGrad(p.name.clone()));
            }
        }
        let (m, wd) = (self.momentum as f32, self.weight_decay as f32);
        for ((p, g), v) in store.iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g.as_ref().expect("checked above");
            let rate = lr(p.group) as f32;
            let pd = p.value.data_mut();
            for ((pv, &gv), vv) in pd.iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = m * *vv + gv + wd * *pv;
                *pv -= rate * *vv;
            }
        }
        Ok(())
    }
}

/// One optimizer step as logged.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr_backbone: f64,
    pub lr_other: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Batch mean of the per-sample reports.
    pub loss: LossReport,
}

impl StepLog {
    pub fn tsv_header() -> String {
        format!("step\tepoch\tlr_backbone\tlr_other\tgrad_norm\t{}", LossReport::tsv_header())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{}",
            self.step,
            self.epoch,
            self.lr_backbone,
            self.lr_other,
            self.grad_norm,
            self.loss.to_tsv()
        );
        s
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mut levels = [None; 4];
    for (lv, slot) in levels.iter_mut().enumerate() {
        if reports.iter().all(|r| r.levels[lv].is_some()) {
            let mut acc = LevelTerms::default();
            for r in reports {
                let l = r.levels[lv].expect("checked");
                acc.bce += l.bce / n;
                acc.iou += l.iou / n;
                acc.dec += l.dec / n;
            }
            *slot = Some(acc);
        }
    }
    LossReport {
        total: reports.iter().map(|r| r.total).sum::<f64>() / n,
        logmse: reports.iter().map(|r| r.logmse).sum::<f64>() / n,
        levels,
    }
}

/// Name of the loss term or op behind a non-finite error, if it is one.
fn non_finite_term(e: &Error) -> Option<String> {
    let Error::NonFinite { op } = e.root() else {
        return None;
    };
    let mut cur = e;
    while let Error::Context { context, source } = cur {
        if let Some(term) = context.strip_prefix("loss term ") {
            return Some(term.to_string());
        }
        cur = source;
    }
    Some(op.to_string())
}

fn divergence(step: usize, e: Error) -> Error {
    match non_finite_term(&e) {
        Some(term) => Error::Divergence { step, term },
        None => e,
    }
}

/// Training state: model, `f32` parameters, optimizer and step counter.
pub struct Trainer {
    pub model: Dftr,
    pub params: ParamStore<f32>,
    pub opt: Sgd,
    pub cfg: TrainConfig,
    pub augment: bool,
    samples: Vec<Sample>,
    /// Optimizer steps taken so far.
    pub step: usize,
}

impl Trainer {
    /// Fresh model initialized from `cfg.seed`.
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, samples: Vec<Sample>, augment: bool) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = Dftr::new(model_cfg, cfg.seed)?;
        let params = store.cast::<f32>();
        let opt = Sgd::new(&params, cfg.momentum, cfg.weight_decay);
        let side = model.input_side();
        // without augmentation every epoch sees the same resized inputs
        let samples = if augment {
            samples
        } else {
            samples.iter().map(|s| data::resize_to_input(s, side)).collect()
        };
        Ok(Trainer {
            model,
            params,
            opt,
            cfg: cfg.clone(),
            augment,
            samples,
            step: 0,
        })
    }

    /// Continue from `ckpt`, which must come from the same model config and seed.
    pub fn resume(
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        samples: Vec<Sample>,
        augment: bool,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let mut t = Trainer::new(model_cfg, cfg, samples, augment)?;
        ckpt.check_model(model_cfg)?;
        if ckpt.seed != cfg.seed {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint seed {} vs configured seed {}",
                ckpt.seed, cfg.seed
            )));
        }
        ckpt.restore(&mut t.params, &mut t.opt)?;
        t.step = ckpt.step as usize;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model.cfg, self.step as u64, self.cfg.seed, &self.params, &self.opt)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.total_steps(self.samples.len())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.steps_per_epoch(self.samples.len())
    }

    /// Sample indices of batch `step`: a per-epoch shuffle, cut into batches.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let per = self.steps_per_epoch().max(1);
        let (epoch, b) = (step / per, step % per);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        rng::shuffle(&mut rng::seeded(rng::derive_seed(self.cfg.seed ^ ORDER_STREAM, epoch as u64)), &mut order);
        let lo = b * self.cfg.batch_size;
        order[lo.min(order.len())..(lo + self.cfg.batch_size).min(order.len())].to_vec()
    }

    fn prepare(&self, step: usize, slot: usize, idx: usize) -> Result<Sample> {
        if !self.augment {
            return Ok(self.samples[idx].clone());
        }
        let seed = rng::derive_seed(rng::derive_seed(self.cfg.seed ^ AUGMENT_STREAM, step as u64), slot as u64);
        data::augment(&self.samples[idx], &mut rng::seeded(seed), self.model.input_side())
    }

    /// Loss and gradients of one sample under the current parameters.
    pub fn sample_gradients(&self, s: &Sample) -> Result<(LossReport, Vec<Option<Tensor<f32>>>)> {
        let mut sess = Session::new(&self.params);
        let preds = self.model.forward(&mut sess, &s.rgb.to_tensor())?;
        let (mask, depth) = (s.mask.to_tensor::<f32>(), s.depth.to_tensor::<f32>());
        let targets = Targets {
            mask: &mask,
            depth: &depth,
        };
        let (total, report) = loss::total_loss(&mut sess.g, &preds, targets, &self.cfg.loss, None)?;
        sess.g.backward(total)?;
        Ok((report, sess.param_grads()))
    }

    /// Mean loss over the whole (unaugmented, resized) sample set.
    pub fn evaluate_loss(&self) -> Result<f64> {
        let side = self.model.input_side();
        let mut sum = 0.0;
        for s in &self.samples {
            let s = data::resize_to_input(s, side);
            let mut sess = Session::inference(&self.params);
            let preds = self.model.forward(&mut sess, &s.rgb.to_tensor())?;
            let (mask, depth) = (s.mask.to_tensor::<f32>(), s.depth.to_tensor::<f32>());
            let targets = Targets {
                mask: &mask,
                depth: &depth,
            };
            sum += loss::total_loss(&mut sess.g, &preds, targets, &self.cfg.loss, None)?.1.total;
        }
        Ok(sum / self.samples.len().max(1) as f64)
    }

    /// One optimizer step on the next batch.
    pub fn step_once(&mut self) -> Result<StepLog> {
        let step = self.step;
        let total = self.total_steps();
        let batch = self.batch_indices(step);
        if batch.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut reports = Vec::with_capacity(batch.len());
        let mut acc: Vec<Option<Tensor<f32>>> = vec![None; self.params.len()];
        for (slot, &idx) in batch.iter().enumerate() {
            let s = self.prepare(step, slot, idx)?;
            let (report, grads) = self.sample_gradients(&s).map_err(|e| divergence(step, e))?;
            if !report.total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    term: "total".into(),
                });
            }
            reports.push(report);
            for (a, g) in acc.iter_mut().zip(grads) {
                match (a.as_mut(), g) {
                    (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                    (None, Some(g)) => *a = Some(g),
                    _ => {}
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let grad_norm = acc
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|&x| (x as f64 * inv).powi(2))
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Divergence {
                step,
                term: "gradient".into(),
            });
        }
        let clip = if self.cfg.grad_clip > 0.0 && grad_norm > self.cfg.grad_clip {
            self.cfg.grad_clip / grad_norm
        } else {
            1.0
        };
        let scale = (inv * clip) as f32;
        for g in acc.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        let lr_backbone = cyclic_lr(step, total, self.cfg.max_lr_backbone);
        let lr_other = cyclic_lr(step, total, self.cfg.max_lr_other);
        self.opt.step(&mut self.params, &acc, |g| match g {
            ParamGroup::Backbone => lr_backbone,
            ParamGroup::Other => lr_other,
        })?;
        self.step += 1;
        Ok(StepLog {
            step,
            epoch: step / self.steps_per_epoch().max(1),
            lr_backbone,
            lr_other,
            grad_norm,
            loss: mean_report(&reports),
        })
    }

    /// Step until `until` (capped at the run length), passing each log to `sink`.
    pub fn run_until(&mut self, until: usize, mut sink: impl FnMut(&Trainer, &StepLog) -> Result<()>) -> Result<()> {
        let until = until.min(self.total_steps());
        while self.step < until {
            let log = self.step_once()?;
            sink(self, &log)?;
        }
        Ok(())
    }
}

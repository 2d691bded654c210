//! Central finite-difference checks of autodiff gradients, in `f64`.

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};
use crate::tensor::{Graph, Tensor, Var};

/// Default step for central differences.
pub const STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, atol / rtol)`.
    pub max_err: f64,
    pub rtol: f64,
    pub atol: f64,
    pub checked: usize,
    pub worst: String,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_err < self.rtol
    }
}

/// Error scaled so that `< rtol` means `|a - n| < max(rtol * max(|a|,|n|), atol)`.
pub fn scaled_err(analytic: f64, numeric: f64, rtol: f64, atol: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(atol / rtol);
    (analytic - numeric).abs() / denom
}

struct Tracker {
    max_err: f64,
    checked: usize,
    worst: String,
}

impl Tracker {
    fn new() -> Self {
        Tracker {
            max_err: 0.0,
            checked: 0,
            worst: String::new(),
        }
    }

    fn record(&mut self, err: f64, label: impl FnOnce() -> String) {
        self.checked += 1;
        if err > self.max_err || self.worst.is_empty() {
            self.max_err = self.max_err.max(err);
            self.worst = label();
        }
    }
}

/// Check d f / d inputs, where `f` builds a scalar from leaves bound to `inputs`.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor<f64>], rtol: f64, atol: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = probe.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut tr = Tracker::new();
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let orig = t.data()[k];
            probe[ti].data_mut()[k] = orig + STEP;
            let up = eval(&probe)?;
            probe[ti].data_mut()[k] = orig - STEP;
            let down = eval(&probe)?;
            probe[ti].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[ti].data()[k];
            tr.record(scaled_err(a, numeric, rtol, atol), || format!("input {ti}[{k}]: analytic {a:e} numeric {numeric:e}"));
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_err: tr.max_err,
        rtol,
        atol,
        checked: tr.checked,
        worst: tr.worst,
    })
}

/// Check d f / d params for every scalar of every parameter in `store`.
pub fn check_params<F>(name: &str, store: &ParamStore<f64>, rtol: f64, atol: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Session<f64>) -> Result<Var>,
{
    check_params_sampled(name, store, rtol, atol, usize::MAX, f)
}

/// Like [`check_params`], but probes at most `per_param` evenly spaced
/// scalars of each parameter tensor.
pub fn check_params_sampled<F>(
    name: &str,
    store: &ParamStore<f64>,
    rtol: f64,
    atol: f64,
    per_param: usize,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Session<f64>) -> Result<Var>,
{
    let mut s = Session::new(store);
    let out = f(&mut s)?;
    s.g.backward(out)?;
    let grads = s.param_grads();

    let eval = |probe: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::inference(probe);
        let out = f(&mut s)?;
        Ok(s.g.value(out).item())
    };

    let mut tr = Tracker::new();
    let mut probe = store.clone();
    for id in store.ids() {
        let p = store.get(id);
        let grad = grads[id.index()].as_ref();
        let n = p.value.len();
        let step = n.div_ceil(per_param.max(1));
        for k in (0..n).step_by(step) {
            let orig = p.value.data()[k];
            probe.get_mut(id).value.data_mut()[k] = orig + STEP;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig - STEP;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = grad.map_or(0.0, |g| g.data()[k]);
            tr.record(scaled_err(a, numeric, rtol, atol), || {
                format!("{}[{k}]: analytic {a:e} numeric {numeric:e}", p.name)
            });
        }
    }
    if tr.checked == 0 {
        return Err(Error::Backward("no parameters to check".into()));
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_err: tr.max_err,
        rtol,
        atol,
        checked: tr.checked,
        worst: tr.worst,
    })
}

/// Reduce a tensor-valued output to a scalar with fixed pseudo-random
/// weights so every output component contributes to the check.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut r = crate::rng::seeded(seed);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|_| crate::rng::uniform(&mut r, -1.0, 1.0)).collect();
    let w = g.constant(Tensor::new(&shape, w)?);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Random tensor with entries uniform in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = crate::rng::seeded(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| crate::rng::uniform(&mut r, lo, hi)).collect()).expect("shape")
}

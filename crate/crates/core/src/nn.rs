//! Named parameters, forward sessions and the two primitive layers
//! (linear, layer norm) everything else is assembled from.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group. The encoder is the backbone; everything else is `Other`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Other,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn push(&mut self, p: Param<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(&p.name),
            "duplicate parameter name {}",
            p.name
        );
        self.by_name.insert(p.name.clone(), self.params.len());
        self.params.push(p);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// SHA-256 over names, shapes and little-endian `f32` values, in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.name.len() as u32).to_le_bytes());
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    TruncNormal(f64),
}

/// Allocates and initializes parameters while a model is being assembled.
pub struct ParamBuilder {
    store: ParamStore<f64>,
    rng: Rng,
    group: ParamGroup,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore::new(),
            rng: rng::seeded(seed),
            group: ParamGroup::Backbone,
        }
    }

    pub fn set_group(&mut self, group: ParamGroup) {
        self.group = group;
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => (0..n).map(|_| rng::truncated_normal(&mut self.rng, std)).collect(),
        };
        let value = Tensor::new(shape, data).expect("parameter shape");
        self.store.push(Param {
            name: name.to_string(),
            group: self.group,
            value,
        })
    }

    pub fn finish(self) -> ParamStore<f64> {
        self.store
    }
}

/// One forward pass: a fresh graph plus lazily bound parameter leaves.
pub struct Session<'a, T: Real> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Session {
            g: Graph::no_grad(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// Leaf for parameter `id`, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.get(id).value.clone(), true);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient for every parameter that took part in the pass, indexed by
    /// [`ParamId`]. Call after `g.backward`.
    pub fn param_grads(&self) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.g.grad(v).cloned()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Projection init of the transformer blocks.
pub const BLOCK_INIT_STD: f64 = 0.02;

impl Linear {
    /// Truncated-normal weights with std [`BLOCK_INIT_STD`], zero bias.
    pub fn new(b: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::with_std(b, name, in_dim, out_dim, bias, BLOCK_INIT_STD)
    }

    /// Weights with std `1 / sqrt(in_dim)`, which keeps unit-scale inputs at unit scale.
    pub fn fan_in(b: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::with_std(b, name, in_dim, out_dim, bias, 1.0 / (in_dim as f64).sqrt())
    }

    pub fn with_std(b: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, bias: bool, std: f64) -> Self {
        let weight = b.param(&format!("{name}.weight"), &[in_dim, out_dim], Init::TruncNormal(std));
        let bias = bias.then(|| b.param(&format!("{name}.bias"), &[out_dim], Init::Zeros));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x · W (+ b)` on the last axis of `[.., in_dim]`.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let sh = s.g.shape(x).to_vec();
        if sh.last() != Some(&self.in_dim) {
            return Err(Error::shape(
                "linear",
                format!("input {sh:?} for {}->{}", self.in_dim, self.out_dim),
            ));
        }
        let w = s.p(self.weight);
        let flat = if sh.len() == 2 {
            x
        } else {
            s.g.reshape(x, &[sh.iter().product::<usize>() / self.in_dim, self.in_dim])?
        };
        let mut y = s.g.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = s.p(b);
            y = s.g.add(y, b)?;
        }
        if sh.len() != 2 {
            let mut out = sh;
            *out.last_mut().unwrap() = self.out_dim;
            y = s.g.reshape(y, &out)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: b.param(&format!("{name}.weight"), &[dim], Init::Ones),
            beta: b.param(&format!("{name}.bias"), &[dim], Init::Zeros),
            dim,
            eps: Self::EPS,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        s.g.layernorm(x, g, b, self.eps)
    }
}

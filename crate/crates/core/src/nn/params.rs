use std::ops::Index;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Ctx, Rng};
use crate::error::Result;
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Initialization rule for a freshly allocated parameter.
#[derive(Clone, Copy, Debug)]
pub enum ParamInit {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    Normal(f64),
}

/// Ordered, named collection of every trainable tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<F>>>,
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(Arc::new(tensor));
        ParamId(self.tensors.len() - 1)
    }

    pub fn alloc(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: ParamInit,
        rng: &mut Rng,
    ) -> ParamId {
        let tensor = match init {
            ParamInit::Zeros => Tensor::zeros(shape),
            ParamInit::Ones => Tensor::ones(shape),
            ParamInit::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| F::of(dist.sample(rng)))
            }
            ParamInit::TruncNormal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| loop {
                    let v: f64 = dist.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break F::of(v);
                    }
                })
            }
        };
        self.add(name, tensor)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    /// Mutable access; copies the tensor only if a forward pass still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter().map(|t| &**t))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Registers every parameter on `tape` (tracked leaves on a recording tape).
    pub fn bind(&self, tape: &Tape<F>) -> Bound<F> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    pub fn cast<G: Element>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] registered on one tape.
pub struct Bound<F> {
    vars: Vec<Var<F>>,
}

impl<F> Bound<F> {
    /// Wraps vars already on a tape, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var<F>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<F>] {
        &self.vars
    }
}

impl<F> Index<ParamId> for Bound<F> {
    type Output = Var<F>;

    fn index(&self, id: ParamId) -> &Var<F> {
        &self.vars[id.0]
    }
}

/// Affine projection `x @ weight + bias`, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.alloc(
            format!("{name}.weight"),
            &[in_dim, out_dim],
            ParamInit::TruncNormal(0.02),
            rng,
        );
        let bias = store.alloc(format!("{name}.bias"), &[out_dim], ParamInit::Zeros, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward<F: Element>(&self, ctx: &Ctx<'_, F>, x: &Var<F>) -> Result<Var<F>> {
        ctx.tape
            .linear(x, &ctx.params[self.weight], Some(&ctx.params[self.bias]))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        eps: f64,
    ) -> Self {
        Self {
            gamma: store.alloc(format!("{name}.gamma"), &[dim], ParamInit::Ones, rng),
            beta: store.alloc(format!("{name}.beta"), &[dim], ParamInit::Zeros, rng),
            eps,
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<F: Element>(&self, ctx: &Ctx<'_, F>, x: &Var<F>) -> Result<Var<F>> {
        ctx.tape
            .layer_norm(x, &ctx.params[self.gamma], &ctx.params[self.beta], self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn trunc_normal_stays_within_two_std() {
        let mut rng = Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let id = store.alloc("w", &[64, 64], ParamInit::TruncNormal(0.02), &mut rng);
        let t = store.get(id);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.sum_f64() / t.numel() as f64;
        assert!(mean.abs() < 2e-3);
    }

    #[test]
    fn get_mut_does_not_copy_when_unshared() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("x", Tensor::ones(&[3]));
        let before = store.get(id).data().as_ptr();
        store.get_mut(id).data_mut()[0] = 2.0;
        assert_eq!(before, store.get(id).data().as_ptr());
    }
}

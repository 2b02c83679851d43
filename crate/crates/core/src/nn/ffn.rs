use serde::{Deserialize, Serialize};

use super::{dropout, Ctx, Linear, ParamStore, Rng};
use crate::error::Result;
use crate::tensor::{Element, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    SwiGlu,
    /// Two-layer GELU MLP with a hidden width of 1.5x the SwiGLU hidden size,
    /// giving the same parameter budget.
    Mlp,
}

impl FfnKind {
    pub fn param_count(self, dim: usize, hidden: usize) -> usize {
        match self {
            FfnKind::SwiGlu => {
                2 * Linear::param_count(dim, hidden) + Linear::param_count(hidden, dim)
            }
            FfnKind::Mlp => {
                let h = MlpParams::hidden_for(hidden);
                Linear::param_count(dim, h) + Linear::param_count(h, dim)
            }
        }
    }
}

/// `SiLU(x W + b) * (x V + c)` followed by an output projection.
#[derive(Clone, Debug)]
pub struct SwiGluParams {
    pub gate: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl SwiGluParams {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            gate: Linear::new(store, rng, &format!("{name}.gate"), dim, hidden),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, hidden),
            out: Linear::new(store, rng, &format!("{name}.out"), hidden, dim),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpParams {
    pub fn hidden_for(swiglu_hidden: usize) -> usize {
        swiglu_hidden * 3 / 2
    }

    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        let h = Self::hidden_for(hidden);
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, h),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), h, dim),
        }
    }
}

#[derive(Clone, Debug)]
pub enum FfnParams {
    SwiGlu(SwiGluParams),
    Mlp(MlpParams),
}

impl FfnParams {
    pub fn new<F: Element>(
        kind: FfnKind,
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        match kind {
            FfnKind::SwiGlu => FfnParams::SwiGlu(SwiGluParams::new(store, rng, name, dim, hidden)),
            FfnKind::Mlp => FfnParams::Mlp(MlpParams::new(store, rng, name, dim, hidden)),
        }
    }

    pub fn forward<F: Element>(
        &self,
        ctx: &mut Ctx<'_, F>,
        x: &Var<F>,
        drop: f64,
    ) -> Result<Var<F>> {
        match self {
            FfnParams::SwiGlu(p) => swiglu_ffn(ctx, x, p, drop),
            FfnParams::Mlp(p) => mlp_ffn(ctx, x, p, drop),
        }
    }
}

/// SwiGLU feed-forward; dropout after the gated product and after the output
/// projection.
pub fn swiglu_ffn<F: Element>(
    ctx: &mut Ctx<'_, F>,
    x: &Var<F>,
    p: &SwiGluParams,
    drop: f64,
) -> Result<Var<F>> {
    let gate = p.gate.forward(ctx, x)?;
    let gate = ctx.tape.silu(&gate);
    let value = p.value.forward(ctx, x)?;
    let hidden = ctx.tape.mul(&gate, &value)?;
    let hidden = dropout(ctx, &hidden, drop)?;
    let out = p.out.forward(ctx, &hidden)?;
    dropout(ctx, &out, drop)
}

pub fn mlp_ffn<F: Element>(
    ctx: &mut Ctx<'_, F>,
    x: &Var<F>,
    p: &MlpParams,
    drop: f64,
) -> Result<Var<F>> {
    let hidden = p.fc1.forward(ctx, x)?;
    let hidden = ctx.tape.gelu(&hidden);
    let hidden = dropout(ctx, &hidden, drop)?;
    let out = p.fc2.forward(ctx, &hidden)?;
    dropout(ctx, &out, drop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamId};
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng as _, SeedableRng};

    fn run<P>(store: &ParamStore<f64>, x: Tensor<f64>, f: P) -> Tensor<f64>
    where
        P: Fn(&mut Ctx<'_, f64>, &Var<f64>) -> Result<Var<f64>>,
    {
        let tape = Tape::inference();
        let bound = store.bind(&tape);
        let mut rng = Rng::seed_from_u64(0);
        let mut ctx = Ctx::new(&tape, &bound, Mode::Eval, &mut rng);
        f(&mut ctx, &Var::constant(x)).unwrap().into_value()
    }

    fn fill(store: &mut ParamStore<f64>, id: ParamId, v: f64) {
        store.get_mut(id).data_mut().fill(v);
    }

    fn affine(store: &ParamStore<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
        let w = store.get(l.weight);
        let b = store.get(l.bias);
        (0..l.out_dim)
            .map(|j| b.data()[j] + (0..l.in_dim).map(|i| x[i] * w.at(&[i, j])).sum::<f64>())
            .collect()
    }

    fn silu(v: f64) -> f64 {
        v / (1.0 + (-v).exp())
    }

    fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = Rng::seed_from_u64(seed);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn zero_input_gives_output_bias() {
        let mut rng = Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = SwiGluParams::new(&mut store, &mut rng, "f", 4, 6);
        fill(&mut store, p.out.bias, 0.25);
        let y = run(&store, Tensor::zeros(&[3, 4]), |c, x| {
            swiglu_ffn(c, x, &p, 0.0)
        });
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn gate_collapse_when_value_path_is_constant_one() {
        let mut rng = Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = SwiGluParams::new(&mut store, &mut rng, "f", 4, 6);
        randomize(&mut store, 3);
        fill(&mut store, p.value.weight, 0.0);
        fill(&mut store, p.value.bias, 1.0);
        let x: Vec<f64> = vec![0.3, -0.7, 1.1, 0.2];
        let y = run(&store, Tensor::new(&[1, 4], x.clone()).unwrap(), |c, x| {
            swiglu_ffn(c, x, &p, 0.0)
        });
        let gated: Vec<f64> = affine(&store, &p.gate, &x).into_iter().map(silu).collect();
        let expect = affine(&store, &p.out, &gated);
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn swiglu_matches_composed_reference() {
        let mut rng = Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let p = SwiGluParams::new(&mut store, &mut rng, "f", 3, 5);
        randomize(&mut store, 5);
        let x: Vec<f64> = vec![0.9, -0.4, 0.1, -1.2, 0.5, 0.8];
        let y = run(&store, Tensor::new(&[2, 3], x.clone()).unwrap(), |c, x| {
            swiglu_ffn(c, x, &p, 0.0)
        });
        for (r, row) in x.chunks(3).enumerate() {
            let g = affine(&store, &p.gate, row);
            let v = affine(&store, &p.value, row);
            let h: Vec<f64> = g.iter().zip(&v).map(|(a, b)| silu(*a) * b).collect();
            let out = affine(&store, &p.out, &h);
            for c in 0..3 {
                assert!((y.at(&[r, c]) - out[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_zero_weights_and_reference() {
        let mut rng = Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let p = MlpParams::new(&mut store, &mut rng, "m", 4, 4);
        assert_eq!(store.get(p.fc1.weight).shape(), &[4, 6]);
        fill(&mut store, p.fc1.weight, 0.0);
        fill(&mut store, p.fc2.weight, 0.0);
        fill(&mut store, p.fc2.bias, -0.5);
        let y = run(&store, Tensor::ones(&[2, 4]), |c, x| mlp_ffn(c, x, &p, 0.0));
        assert!(y.data().iter().all(|&v| v == -0.5));

        randomize(&mut store, 7);
        let x: Vec<f64> = vec![0.2, -0.3, 0.7, 1.5];
        let y = run(&store, Tensor::new(&[1, 4], x.clone()).unwrap(), |c, x| {
            mlp_ffn(c, x, &p, 0.0)
        });
        let gelu = |v: f64| {
            0.5 * v
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
        };
        let h: Vec<f64> = affine(&store, &p.fc1, &x).into_iter().map(gelu).collect();
        let expect = affine(&store, &p.fc2, &h);
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_budgets_match() {
        // weights agree exactly; only the bias vectors differ
        let weights = 3 * 256 * 1024;
        assert_eq!(
            FfnKind::SwiGlu.param_count(256, 1024),
            weights + 2 * 1024 + 256
        );
        assert_eq!(FfnKind::Mlp.param_count(256, 1024), weights + 1536 + 256);
    }
}

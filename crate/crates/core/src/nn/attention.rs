use super::{dropout, Ctx, Linear, ParamStore, Rng};
use crate::error::{Error, Result};
use crate::tensor::{Element, Var};

/// Multi-head self-attention projections.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Score scaling `1 / sqrt(head_dim)`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Linear::param_count(dim, dim)
    }
}

/// Self-attention over axis `-2` of `x: [..., L, D]`; all leading axes are
/// independent groups.
pub fn mhsa<F: Element>(
    ctx: &mut Ctx<'_, F>,
    x: &Var<F>,
    p: &AttentionParams,
    attn_dropout: f64,
) -> Result<Var<F>> {
    let shape = x.shape().to_vec();
    let r = shape.len();
    if r < 2 || shape[r - 1] != p.dim {
        return Err(Error::ShapeMismatch {
            op: "mhsa",
            lhs: shape,
            rhs: vec![p.dim],
        });
    }
    let len = shape[r - 2];
    let groups = x.value().numel() / (len * p.dim);
    let (h, dh) = (p.heads, p.head_dim());
    let tape = ctx.tape;

    let split = |v: &Var<F>| -> Result<Var<F>> {
        let v = tape.reshape(v, &[groups, len, h, dh])?;
        tape.permute_reshape(&v, &[0, 2, 1, 3], &[groups * h, len, dh])
    };
    let q = split(&p.q.forward(ctx, x)?)?;
    let k = split(&p.k.forward(ctx, x)?)?;
    let v = split(&p.v.forward(ctx, x)?)?;

    let scores = tape.matmul_nt(&q, &k, F::of(p.scale()))?;
    let weights = tape.softmax(&scores)?;
    let weights = dropout(ctx, &weights, attn_dropout)?;
    let heads = tape.matmul(&weights, &v)?;

    let merged = tape.reshape(&heads, &[groups, h, len, dh])?;
    let merged = tape.permute_reshape(&merged, &[0, 2, 1, 3], &shape)?;
    p.o.forward(ctx, &merged)
}

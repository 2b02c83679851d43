use super::{
    drop_path, mhsa, AttentionParams, Ctx, DropSpec, FfnKind, FfnParams, LayerNormParams,
    ParamStore, Rng,
};
use crate::error::Result;
use crate::tensor::{Element, Var};

/// Gated transformer block: pre-LN attention and pre-LN gated feed-forward,
/// each on a residual branch.
#[derive(Clone, Debug)]
pub struct GtbParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

impl GtbParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        ffn: FfnKind,
        eps: f64,
    ) -> Result<Self> {
        let ln1 = LayerNormParams::new(store, rng, &format!("{name}.ln1"), dim, eps);
        let attn = AttentionParams::new(store, rng, &format!("{name}.attn"), dim, heads)?;
        let ln2 = LayerNormParams::new(store, rng, &format!("{name}.ln2"), dim, eps);
        let ffn = FfnParams::new(ffn, store, rng, &format!("{name}.ffn"), dim, hidden);
        Ok(Self {
            ln1,
            attn,
            ln2,
            ffn,
        })
    }

    pub fn param_count(dim: usize, hidden: usize, ffn: FfnKind) -> usize {
        2 * LayerNormParams::param_count(dim)
            + AttentionParams::param_count(dim)
            + ffn.param_count(dim, hidden)
    }
}

/// `y = z + DropPath(MSA(LN(z)))`, then `y + DropPath(FFN(LN(y)))`.
pub fn gtb_forward<F: Element>(
    ctx: &mut Ctx<'_, F>,
    z: &Var<F>,
    p: &GtbParams,
    drop: &DropSpec,
    path_rate: f64,
) -> Result<Var<F>> {
    let h = p.ln1.forward(ctx, z)?;
    let h = mhsa(ctx, &h, &p.attn, drop.attn_dropout)?;
    let h = drop_path(ctx, &h, path_rate)?;
    let y = ctx.tape.add(z, &h)?;

    let h = p.ln2.forward(ctx, &y)?;
    let h = p.ffn.forward(ctx, &h, drop.ffn_dropout)?;
    let h = drop_path(ctx, &h, path_rate)?;
    ctx.tape.add(&y, &h)
}

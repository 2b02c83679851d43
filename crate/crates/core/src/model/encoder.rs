use super::embed::{patch_embed, patch_recover, positional_encoding};
use super::{Axis, ModelConfig, PeKind};
use crate::error::{Error, Result};
use crate::nn::{
    gtb_forward, Ctx, DropSpec, GtbParams, LayerNormParams, Linear, ParamId, ParamInit, ParamStore,
    Rng,
};
use crate::tensor::{Element, Tensor, Var};

fn grid_dims<F: Element>(x: &Var<F>, op: &'static str) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, t, n, d] => Ok([b, t, n, d]),
        ref s => Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![0; 4],
        }),
    }
}

/// Gated block over the patches of every frame: `[B*T, N, D]`.
pub fn spatial_pass<F: Element>(
    ctx: &mut Ctx<'_, F>,
    x: &Var<F>,
    block: &GtbParams,
    drop: &DropSpec,
    path_rate: f64,
) -> Result<Var<F>> {
    let [b, t, n, d] = grid_dims(x, "spatial_pass")?;
    let flat = ctx.tape.reshape(x, &[b * t, n, d])?;
    let y = gtb_forward(ctx, &flat, block, drop, path_rate)?;
    ctx.tape.reshape(&y, &[b, t, n, d])
}

/// Gated block over the frames of every patch position: `[B*N, T, D]`.
pub fn temporal_pass<F: Element>(
    ctx: &mut Ctx<'_, F>,
    x: &Var<F>,
    block: &GtbParams,
    drop: &DropSpec,
    path_rate: f64,
) -> Result<Var<F>> {
    let [b, t, n, d] = grid_dims(x, "temporal_pass")?;
    let flat = ctx.tape.permute_reshape(x, &[0, 2, 1, 3], &[b * n, t, d])?;
    let y = gtb_forward(ctx, &flat, block, drop, path_rate)?;
    let y = ctx.tape.reshape(&y, &[b, n, t, d])?;
    ctx.tape.permute(&y, &[0, 2, 1, 3])
}

/// Gated block over all `T*N` tokens of each sample.
pub fn full_pass<F: Element>(
    ctx: &mut Ctx<'_, F>,
    x: &Var<F>,
    block: &GtbParams,
    drop: &DropSpec,
    path_rate: f64,
) -> Result<Var<F>> {
    let [b, t, n, d] = grid_dims(x, "full_pass")?;
    let flat = ctx.tape.reshape(x, &[b, t * n, d])?;
    let y = gtb_forward(ctx, &flat, block, drop, path_rate)?;
    ctx.tape.reshape(&y, &[b, t, n, d])
}

/// Parameters and layout of one predictor.
#[derive(Clone, Debug)]
pub struct PredFormer {
    pub cfg: ModelConfig,
    pub embed: Linear,
    pub embed_ln: LayerNormParams,
    pub pe: Option<ParamId>,
    /// Gated blocks grouped by PredFormer layer.
    pub layers: Vec<Vec<(Axis, GtbParams)>>,
    pub final_ln: Option<LayerNormParams>,
    pub decoder: Linear,
    sinusoid: Option<Tensor<f64>>,
}

impl PredFormer {
    /// Allocates every parameter in `store` in a fixed order.
    pub fn new<F: Element>(
        cfg: &ModelConfig,
        store: &mut ParamStore<F>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (t, n, d) = (cfg.frames_in, cfg.tokens(), cfg.dim);
        let embed = Linear::new(store, rng, "embed", cfg.patch_len(), d);
        let embed_ln = LayerNormParams::new(store, rng, "embed_ln", d, cfg.ln_eps);
        let (pe, sinusoid) = match cfg.pe {
            PeKind::SinusoidalAbsolute => (None, Some(positional_encoding(t, n, d)?)),
            PeKind::Learnable => (
                Some(store.alloc("pe", &[t, n, d], ParamInit::Normal(0.02), rng)),
                None,
            ),
            PeKind::None => (None, None),
        };
        let mut layers = Vec::new();
        let mut index = 0;
        for axes in cfg.variant.schedule() {
            let mut layer = Vec::with_capacity(axes.len());
            for axis in axes {
                let name = format!("blocks.{index}");
                let block = GtbParams::new(
                    store, rng, &name, d, cfg.heads, cfg.hidden, cfg.ffn, cfg.ln_eps,
                )?;
                layer.push((axis, block));
                index += 1;
            }
            layers.push(layer);
        }
        let final_ln = cfg
            .final_norm
            .then(|| LayerNormParams::new(store, rng, "final_ln", d, cfg.ln_eps));
        let decoder = Linear::new(store, rng, "decoder", d, cfg.patch_len());
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            embed_ln,
            pe,
            layers,
            final_ln,
            decoder,
            sinusoid,
        })
    }

    pub fn gtb_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn forward<F: Element>(&self, ctx: &mut Ctx<'_, F>, frames: &Var<F>) -> Result<Var<F>> {
        model_forward(ctx, self, frames)
    }
}

/// Runs every PredFormer layer of `model` over the token grid `[B, T, N, D]`.
pub fn encoder_forward<F: Element>(
    ctx: &mut Ctx<'_, F>,
    x: &Var<F>,
    model: &PredFormer,
) -> Result<Var<F>> {
    let drop = model.cfg.drop;
    let total = model.gtb_count();
    let mut index = 0;
    let mut x = x.clone();
    for layer in &model.layers {
        let input = x.clone();
        for (axis, block) in layer {
            let rate = drop.path_rate(index, total);
            x = match axis {
                Axis::Spatial => spatial_pass(ctx, &x, block, &drop, rate)?,
                Axis::Temporal => temporal_pass(ctx, &x, block, &drop, rate)?,
                Axis::Full => full_pass(ctx, &x, block, &drop, rate)?,
            };
            index += 1;
        }
        if model.cfg.variant.layer_skip {
            x = ctx.tape.add(&x, &input)?;
        }
    }
    Ok(x)
}

/// Frames `[B, T, C, H, W]` in, predicted frames of the same shape out.
pub fn model_forward<F: Element>(
    ctx: &mut Ctx<'_, F>,
    model: &PredFormer,
    frames: &Var<F>,
) -> Result<Var<F>> {
    let cfg = &model.cfg;
    let x = patch_embed(ctx, frames, cfg, &model.embed, &model.embed_ln)?;
    let x = match (&model.sinusoid, model.pe) {
        (Some(table), _) => {
            let table = ctx.tape.constant(table.cast());
            ctx.tape.add_trailing(&x, &table)?
        }
        (None, Some(id)) => ctx.tape.add_trailing(&x, &ctx.params[id])?,
        (None, None) => x,
    };
    let x = encoder_forward(ctx, &x, model)?;
    let x = match &model.final_ln {
        Some(ln) => ln.forward(ctx, &x)?,
        None => x,
    };
    patch_recover(ctx, &x, cfg, &model.decoder)
}

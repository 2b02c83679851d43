use super::{Axis, ModelConfig, PeKind};
use crate::nn::{FfnKind, GtbParams, LayerNormParams, Linear, MlpParams};

/// Exact trainable-parameter count of the model described by `cfg`.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let d = cfg.dim;
    let mut total = Linear::param_count(cfg.patch_len(), d) + LayerNormParams::param_count(d);
    if cfg.pe == PeKind::Learnable {
        total += cfg.frames_in * cfg.tokens() * d;
    }
    total += cfg.variant.gtb_count() * GtbParams::param_count(d, cfg.hidden, cfg.ffn);
    if cfg.final_norm {
        total += LayerNormParams::param_count(d);
    }
    total + Linear::param_count(d, cfg.patch_len())
}

/// Multiply-accumulates of one gated block applied to `groups` independent
/// sequences of length `len`.
pub fn gtb_flops(groups: u64, len: u64, dim: u64, hidden: u64, ffn: FfnKind) -> u64 {
    let tokens = groups * len;
    let projections = 4 * tokens * dim * dim;
    let attention = 2 * groups * len * len * dim;
    let ffn = match ffn {
        FfnKind::SwiGlu => 3 * tokens * dim * hidden,
        FfnKind::Mlp => 2 * tokens * dim * MlpParams::hidden_for(hidden as usize) as u64,
    };
    projections + attention + ffn
}

/// Analytic forward cost of one sample, counting a multiply-accumulate as one
/// FLOP. Norms, softmax and elementwise work are ignored.
pub fn estimate_flops(cfg: &ModelConfig) -> u64 {
    let t = cfg.frames_in as u64;
    let n = cfg.tokens() as u64;
    let d = cfg.dim as u64;
    let h = cfg.hidden as u64;
    let io = 2 * t * n * cfg.patch_len() as u64 * d;
    let blocks: u64 = cfg
        .variant
        .schedule()
        .into_iter()
        .flatten()
        .map(|axis| match axis {
            Axis::Spatial => gtb_flops(t, n, d, h, cfg.ffn),
            Axis::Temporal => gtb_flops(n, t, d, h, cfg.ffn),
            Axis::Full => gtb_flops(1, t * n, d, h, cfg.ffn),
        })
        .sum();
    io + blocks
}

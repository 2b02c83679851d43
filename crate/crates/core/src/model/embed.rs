use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNormParams, Linear};
use crate::tensor::{Element, Tape, Tensor, Var};

// [B, T, C, gh, p, gw, p] -> [B, T, gh, gw, C, p, p]
const TO_PATCHES: [usize; 7] = [0, 1, 3, 5, 2, 4, 6];
// inverse of TO_PATCHES
const FROM_PATCHES: [usize; 7] = [0, 1, 4, 2, 5, 3, 6];

/// Splits frames `[B, T, C, H, W]` into flattened patches `[B, T, N, C*p*p]`.
/// Patches are numbered row-major over the patch grid; each patch is laid out
/// channel, row, column.
pub(crate) fn patchify<F: Element>(
    tape: &Tape<F>,
    frames: &Var<F>,
    cfg: &ModelConfig,
) -> Result<Var<F>> {
    let s = frames.shape();
    if s.len() != 5 || s[1..] != cfg.frame_shape(s[0])[1..] {
        return Err(Error::ShapeMismatch {
            op: "patch_embed",
            lhs: s.to_vec(),
            rhs: cfg.frame_shape(1)[1..].to_vec(),
        });
    }
    let (b, t, c, p) = (s[0], s[1], cfg.channels, cfg.patch);
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let x = tape.reshape(frames, &[b, t, c, gh, p, gw, p])?;
    tape.permute_reshape(&x, &TO_PATCHES, &[b, t, gh * gw, cfg.patch_len()])
}

/// Inverse of [`patchify`].
pub(crate) fn unpatchify<F: Element>(
    tape: &Tape<F>,
    patches: &Var<F>,
    cfg: &ModelConfig,
) -> Result<Var<F>> {
    let s = patches.shape();
    if s.len() != 4 || s[2] != cfg.tokens() || s[3] != cfg.patch_len() {
        return Err(Error::ShapeMismatch {
            op: "patch_recover",
            lhs: s.to_vec(),
            rhs: vec![cfg.frames_out, cfg.tokens(), cfg.patch_len()],
        });
    }
    let (b, t, c, p) = (s[0], s[1], cfg.channels, cfg.patch);
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let x = tape.reshape(patches, &[b, t, gh, gw, c, p, p])?;
    tape.permute_reshape(&x, &FROM_PATCHES, &[b, t, c, cfg.height, cfg.width])
}

/// Patchify, project each patch to D, then layer-normalize.
pub fn patch_embed<F: Element>(
    ctx: &mut Ctx<'_, F>,
    frames: &Var<F>,
    cfg: &ModelConfig,
    embed: &Linear,
    ln: &LayerNormParams,
) -> Result<Var<F>> {
    let patches = patchify(ctx.tape, frames, cfg)?;
    let tokens = embed.forward(ctx, &patches)?;
    ln.forward(ctx, &tokens)
}

/// Projects every token to a patch and reassembles frames
/// `[B, T, C, H, W]`.
pub fn patch_recover<F: Element>(
    ctx: &mut Ctx<'_, F>,
    tokens: &Var<F>,
    cfg: &ModelConfig,
    decoder: &Linear,
) -> Result<Var<F>> {
    let patches = decoder.forward(ctx, tokens)?;
    unpatchify(ctx.tape, &patches, cfg)
}

/// Sin/cos code of a scalar position: channel `2k` holds
/// `sin(pos * 10000^(-2k/d))`, channel `2k+1` the matching cosine.
pub fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for k in 0..d / 2 {
        let freq = 10000f64.powf(-2.0 * k as f64 / d as f64);
        out[2 * k] = (pos * freq).sin();
        out[2 * k + 1] = (pos * freq).cos();
    }
    out
}

/// Absolute position table `[T, N, D]`; token `(t, n)` is coded at flattened
/// position `t * N + n`.
pub fn positional_encoding(frames: usize, tokens: usize, d: usize) -> Result<Tensor<f64>> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs an even dim, got {d}"
        )));
    }
    let mut data = Vec::with_capacity(frames * tokens * d);
    for t in 0..frames {
        for n in 0..tokens {
            data.extend(sinusoid((t * tokens + n) as f64, d));
        }
    }
    Tensor::new(&[frames, tokens, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VariantKind;
    use crate::nn::{Mode, ParamStore, Rng};
    use rand::SeedableRng;

    fn cfg(c: usize, h: usize, w: usize, p: usize) -> ModelConfig {
        let mut cfg = ModelConfig::tiny(VariantKind::BinaryTS);
        cfg.channels = c;
        cfg.height = h;
        cfg.width = w;
        cfg.patch = p;
        cfg
    }

    #[test]
    fn token_counts() {
        assert_eq!(cfg(1, 64, 64, 8).tokens(), 64);
        assert_eq!(cfg(1, 32, 64, 4).tokens(), 128);
    }

    #[test]
    fn patchify_matches_index_enumeration() {
        let cfg = cfg(2, 8, 8, 4);
        let (b, t) = (2, 2);
        let frames = Tensor::from_fn(&[b, t, 2, 8, 8], |i| i as f64);
        let tape = Tape::inference();
        let patches = patchify(&tape, &Var::constant(frames.clone()), &cfg).unwrap();
        let patches = patches.value();
        assert_eq!(patches.shape(), &[b, t, 4, 32]);
        for bi in 0..b {
            for ti in 0..t {
                for c in 0..2 {
                    for y in 0..8 {
                        for x in 0..8 {
                            let n = (y / 4) * 2 + x / 4;
                            let j = c * 16 + (y % 4) * 4 + x % 4;
                            assert_eq!(patches.at(&[bi, ti, n, j]), frames.at(&[bi, ti, c, y, x]));
                        }
                    }
                }
            }
        }
        let back = unpatchify(&tape, &Var::constant(patches.clone()), &cfg).unwrap();
        assert_eq!(back.value(), &frames);
    }

    #[test]
    fn rejects_mismatched_frames() {
        let cfg = cfg(1, 8, 8, 4);
        let tape = Tape::<f64>::inference();
        let x = Var::constant(Tensor::zeros(&[1, 2, 1, 8, 6]));
        assert!(patchify(&tape, &x, &cfg).is_err());
    }

    fn embed_setup(cfg: &ModelConfig) -> (ParamStore<f64>, Linear, LayerNormParams, Linear) {
        let mut rng = Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let embed = Linear::new(&mut store, &mut rng, "embed", cfg.patch_len(), cfg.dim);
        let ln = LayerNormParams::new(&mut store, &mut rng, "ln", cfg.dim, 1e-5);
        let dec = Linear::new(&mut store, &mut rng, "dec", cfg.dim, cfg.patch_len());
        (store, embed, ln, dec)
    }

    #[test]
    fn zero_frames_embed_to_beta() {
        let cfg = cfg(1, 8, 8, 4);
        let (mut store, embed, ln, _) = embed_setup(&cfg);
        for (i, v) in store.get_mut(ln.beta).data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        let tape = Tape::inference();
        let bound = store.bind(&tape);
        let mut rng = Rng::seed_from_u64(0);
        let mut ctx = Ctx::new(&tape, &bound, Mode::Eval, &mut rng);
        let x = Var::constant(Tensor::zeros(&cfg.frame_shape(1)));
        let y = patch_embed(&mut ctx, &x, &cfg, &embed, &ln).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 8]);
        for row in y.value().data().chunks(8) {
            for (i, v) in row.iter().enumerate() {
                assert!((v - i as f64 * 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_token_stays_in_its_patch() {
        let cfg = cfg(1, 8, 8, 4);
        let (mut store, _, _, dec) = embed_setup(&cfg);
        for v in store.get_mut(dec.weight).data_mut() {
            *v = 1.0;
        }
        let tape = Tape::inference();
        let bound = store.bind(&tape);
        let mut rng = Rng::seed_from_u64(0);
        let mut ctx = Ctx::new(&tape, &bound, Mode::Eval, &mut rng);

        let zeros = Var::constant(Tensor::zeros(&[1, 2, 4, 8]));
        let y = patch_recover(&mut ctx, &zeros, &cfg, &dec).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        let (t0, n0) = (1, 2);
        let tokens = Tensor::from_fn(&[1, 2, 4, 8], |i| {
            if i == (t0 * 4 + n0) * 8 + 3 {
                1.0
            } else {
                0.0
            }
        });
        let y = patch_recover(&mut ctx, &Var::constant(tokens), &cfg, &dec).unwrap();
        let y = y.value();
        for t in 0..2 {
            for r in 0..8 {
                for c in 0..8 {
                    let inside = t == t0 && r / 4 == n0 / 2 && c / 4 == n0 % 2;
                    assert_eq!(y.at(&[0, t, 0, r, c]) != 0.0, inside, "t={t} r={r} c={c}");
                }
            }
        }
    }

    #[test]
    fn sinusoid_at_zero() {
        let s = sinusoid(0.0, 16);
        for k in 0..8 {
            assert_eq!(s[2 * k], 0.0);
            assert_eq!(s[2 * k + 1], 1.0);
        }
    }

    #[test]
    fn positional_encoding_is_deterministic_and_rejects_odd_dim() {
        assert_eq!(
            positional_encoding(3, 5, 8).unwrap(),
            positional_encoding(3, 5, 8).unwrap()
        );
        assert!(positional_encoding(2, 2, 7).is_err());
    }

    #[test]
    fn positional_rows_are_distinct() {
        let (t, n, d) = (64, 64, 256);
        let pe = positional_encoding(t, n, d).unwrap();
        let rows: Vec<&[f64]> = pe.data().chunks(d).collect();
        // distance over the first 8 channels bounds the full row distance
        let mut min = f64::INFINITY;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d2: f64 = (0..8).map(|c| (rows[i][c] - rows[j][c]).powi(2)).sum();
                min = min.min(d2);
            }
        }
        assert!(min > 1e-6, "closest pair distance^2 {min}");
    }
}

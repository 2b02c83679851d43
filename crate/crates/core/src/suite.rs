//! Finite-difference checks over every differentiable building block and a
//! tiny end-to-end model, all in f64.

use rand::{Rng as _, SeedableRng};

use crate::error::Result;
use crate::model::{ModelConfig, PredFormer, VariantKind};
use crate::nn::{
    gtb_forward, mhsa, mlp_ffn, swiglu_ffn, AttentionParams, Bound, Ctx, DropSpec, FfnKind,
    GtbParams, MlpParams, Mode, ParamStore, Rng, SwiGluParams,
};
use crate::tensor::{grad_check_many, GradCheckReport, Tape, Tensor, Var};

pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn random(shape: &[usize], rng: &mut Rng, amp: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-amp..amp))
}

/// Contracts `y` with fixed non-uniform weights so every output element
/// contributes a distinct gradient.
fn probe(tape: &Tape<f64>, y: &Var<f64>) -> Result<Var<f64>> {
    let w = tape.constant(Tensor::from_fn(y.shape(), |i| (0.7 * i as f64 + 0.3).sin()));
    let prod = tape.mul(y, &w)?;
    Ok(tape.sum(&prod))
}

fn jittered(store: &mut ParamStore<f64>, rng: &mut Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

/// Checks a parameterized layer: input 0 is the activation, the rest are the
/// store's tensors in order.
fn layer_check<B>(
    store: &ParamStore<f64>,
    x: Tensor<f64>,
    h: f64,
    tol: f64,
    body: B,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Ctx<'_, f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    grad_check_many(
        |tape, vars| {
            let bound = Bound::from_vars(vars[1..].to_vec());
            let mut rng = Rng::seed_from_u64(0);
            let mut ctx = Ctx::new(tape, &bound, Mode::Eval, &mut rng);
            let y = body(&mut ctx, &vars[0])?;
            probe(tape, &y)
        },
        &inputs,
        h,
        tol,
    )
}

/// Runs every check at step `h` and tolerance `tol`.
pub fn gradcheck_suite(tol: f64, h: f64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    let mut push =
        |name: &'static str, report: GradCheckReport| out.push(GradCheckEntry { name, report });

    let x = random(&[3, 5], &mut rng, 2.0);
    push(
        "softmax",
        grad_check_many(|t, v| probe(t, &t.softmax(&v[0])?), &[x], h, tol)?,
    );

    let ln_in = [
        random(&[4, 6], &mut rng, 2.0),
        random(&[6], &mut rng, 1.5),
        random(&[6], &mut rng, 1.0),
    ];
    push(
        "layer_norm",
        grad_check_many(
            |t, v| probe(t, &t.layer_norm(&v[0], &v[1], &v[2], 1e-5)?),
            &ln_in,
            h,
            tol,
        )?,
    );

    let x = random(&[2, 3, 4], &mut rng, 3.0);
    push(
        "silu",
        grad_check_many(
            |t, v| probe(t, &t.silu(&v[0])),
            std::slice::from_ref(&x),
            h,
            tol,
        )?,
    );
    push(
        "gelu",
        grad_check_many(|t, v| probe(t, &t.gelu(&v[0])), &[x], h, tol)?,
    );

    let mm = [
        random(&[2, 3, 4], &mut rng, 1.0),
        random(&[2, 4, 5], &mut rng, 1.0),
    ];
    push(
        "matmul",
        grad_check_many(|t, v| probe(t, &t.matmul(&v[0], &v[1])?), &mm, h, tol)?,
    );
    let lin = [
        random(&[3, 4], &mut rng, 1.0),
        random(&[4, 2], &mut rng, 1.0),
        random(&[2], &mut rng, 1.0),
    ];
    push(
        "linear",
        grad_check_many(
            |t, v| probe(t, &t.linear(&v[0], &v[1], Some(&v[2]))?),
            &lin,
            h,
            tol,
        )?,
    );

    let x = random(&[2, 3, 8], &mut rng, 1.0);
    let mut store = ParamStore::new();
    let attn = AttentionParams::new(&mut store, &mut rng, "attn", 8, 2)?;
    jittered(&mut store, &mut rng);
    push(
        "mhsa",
        layer_check(&store, x.clone(), h, tol, |c, x| mhsa(c, x, &attn, 0.0))?,
    );

    let mut store = ParamStore::new();
    let ffn = SwiGluParams::new(&mut store, &mut rng, "ffn", 8, 12);
    jittered(&mut store, &mut rng);
    push(
        "swiglu_ffn",
        layer_check(&store, x.clone(), h, tol, |c, x| {
            swiglu_ffn(c, x, &ffn, 0.0)
        })?,
    );

    let mut store = ParamStore::new();
    let mlp = MlpParams::new(&mut store, &mut rng, "mlp", 8, 12);
    jittered(&mut store, &mut rng);
    push(
        "mlp_ffn",
        layer_check(&store, x.clone(), h, tol, |c, x| mlp_ffn(c, x, &mlp, 0.0))?,
    );

    let mut store = ParamStore::new();
    let gtb = GtbParams::new(&mut store, &mut rng, "gtb", 8, 2, 12, FfnKind::SwiGlu, 1e-5)?;
    jittered(&mut store, &mut rng);
    push(
        "gtb_forward",
        layer_check(&store, x, h, tol, |c, x| {
            gtb_forward(c, x, &gtb, &DropSpec::none(), 0.0)
        })?,
    );

    let cfg = ModelConfig::tiny(VariantKind::BinaryTS);
    let mut store = ParamStore::new();
    let model = PredFormer::new(&cfg, &mut store, &mut rng)?;
    jittered(&mut store, &mut rng);
    let frames = Tensor::from_fn(&cfg.frame_shape(1), |_| rng.random_range(0.0..1.0));
    let target = Tensor::from_fn(&cfg.frame_shape(1), |_| rng.random_range(0.0..1.0));
    let mut inputs = vec![frames];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let report = grad_check_many(
        |tape, vars| {
            let bound = Bound::from_vars(vars[1..].to_vec());
            let mut r = Rng::seed_from_u64(0);
            let mut ctx = Ctx::new(tape, &bound, Mode::Eval, &mut r);
            let y = model.forward(&mut ctx, &vars[0])?;
            tape.mse(&y, &tape.constant(target.clone()))
        },
        &inputs,
        h,
        tol,
    )?;
    push("predformer_tiny", report);
    Ok(out)
}

//! Central finite-difference verification of autodiff gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so near-zero gradients are
/// compared on an absolute scale instead of amplifying rounding noise.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub elements: usize,
    pub tol: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Checks the gradient of the scalar function `f` at `x`.
pub fn grad_check<Fun>(f: Fun, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    grad_check_many(
        |tape, vars| f(tape, &vars[0]),
        std::slice::from_ref(x),
        h,
        tol,
    )
}

/// Checks the gradient of `f` with respect to every element of every input.
pub fn grad_check_many<Fun>(
    f: Fun,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    Fun: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<f64>> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&tape, &vars)?;
        out.value().item()
    };

    let first = eval(inputs)?;
    let second = eval(inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;

    let mut worst = (0, 0);
    let mut max_rel = 0.0f64;
    let mut elements = 0;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(analytic.data()[j], numeric);
            if rel > max_rel || rel.is_nan() {
                max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = (i, j);
            }
            elements += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        elements,
        tol,
        passed: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sum_of_squares_passes_tight() {
        let x = random(&[3, 4], 1);
        let report = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(&sq))
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.elements, 12);
    }

    #[test]
    fn linear_layer_passes() {
        let x = random(&[2, 3], 2);
        let w = random(&[3, 4], 3);
        let b = random(&[4], 4);
        let r = random(&[2, 4], 5);
        let report = grad_check_many(
            |t, v| {
                let y = t.linear(&v[0], &v[1], Some(&v[2]))?;
                let weighted = t.mul(&y, &t.constant(r.clone()))?;
                Ok(t.sum(&weighted))
            },
            &[x, w, b],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn wrong_backward_rule_fails() {
        let x = random(&[5], 6);
        let report = grad_check(
            |t, x| {
                let value = x.value().map(|v| v * v);
                let xv = x.value().clone();
                // d(x^2)/dx is 2x; deliberately report 3x
                let sq = t.custom(
                    &[x],
                    value,
                    Box::new(move |g| vec![g.zip_map(&xv, |g, v| 3.0 * g * v).unwrap()]),
                );
                Ok(t.sum(&sq))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 0.3);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = random(&[2], 7);
        let err = grad_check(
            |t, x| {
                calls.set(calls.get() + 1.0);
                let bumped = t.scale(x, calls.get());
                Ok(t.sum(&bumped))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}

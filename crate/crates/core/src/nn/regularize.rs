use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// How the drop-path rate varies with depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropSchedule {
    /// Every block uses the same rate.
    Uniform,
    /// Rate grows linearly from 0 at the first block to the full rate at the last.
    Linear,
}

/// Dropout and stochastic-depth settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropSpec {
    pub attn_dropout: f64,
    pub ffn_dropout: f64,
    pub drop_path_rate: f64,
    pub schedule: DropSchedule,
}

impl Default for DropSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl DropSpec {
    pub fn none() -> Self {
        Self {
            attn_dropout: 0.0,
            ffn_dropout: 0.0,
            drop_path_rate: 0.0,
            schedule: DropSchedule::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("attn_dropout", self.attn_dropout),
            ("ffn_dropout", self.ffn_dropout),
            ("drop_path_rate", self.drop_path_rate),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        Ok(())
    }

    /// Drop-path probability for block `index` of `total`.
    pub fn path_rate(&self, index: usize, total: usize) -> f64 {
        match self.schedule {
            DropSchedule::Uniform => self.drop_path_rate,
            DropSchedule::Linear if total <= 1 => 0.0,
            DropSchedule::Linear => self.drop_path_rate * index as f64 / (total - 1) as f64,
        }
    }
}

/// Inverted dropout: zero each element with probability `p`, scale survivors
/// by `1 / (1 - p)`. Identity outside training or when `p == 0`.
pub fn dropout<F: Element>(ctx: &mut Ctx<'_, F>, x: &Var<F>, p: f64) -> Result<Var<F>> {
    if !ctx.training() || p <= 0.0 {
        return Ok(x.clone());
    }
    let scale = F::of(1.0 / (1.0 - p));
    let rng = &mut *ctx.rng;
    let mask = Tensor::from_fn(x.shape(), |_| {
        if rng.random::<f64>() < p {
            F::zero()
        } else {
            scale
        }
    });
    ctx.tape.mul_const(x, mask)
}

/// Stochastic depth over axis 0: each sample's residual branch is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
pub fn drop_path<F: Element>(ctx: &mut Ctx<'_, F>, x: &Var<F>, rate: f64) -> Result<Var<F>> {
    if !ctx.training() || rate <= 0.0 {
        return Ok(x.clone());
    }
    let samples = x.shape().first().copied().unwrap_or(1);
    let per_sample = x.value().numel() / samples;
    let scale = F::of(1.0 / (1.0 - rate));
    let keep: Vec<F> = (0..samples)
        .map(|_| {
            if ctx.rng.random::<f64>() < rate {
                F::zero()
            } else {
                scale
            }
        })
        .collect();
    let mask = Tensor::from_fn(x.shape(), |i| keep[i / per_sample]);
    ctx.tape.mul_const(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore, Rng};
    use crate::tensor::Tape;
    use rand::SeedableRng;

    fn run(mode: Mode, rate: f64, x: Tensor<f64>, seed: u64) -> Tensor<f64> {
        let tape = Tape::inference();
        let store = ParamStore::<f64>::new();
        let bound = store.bind(&tape);
        let mut rng = Rng::seed_from_u64(seed);
        let mut ctx = Ctx::new(&tape, &bound, mode, &mut rng);
        drop_path(&mut ctx, &Var::constant(x), rate)
            .unwrap()
            .into_value()
    }

    #[test]
    fn zero_rate_and_eval_are_identity() {
        let x = Tensor::from_fn(&[4, 3], |i| i as f64 + 1.0);
        assert_eq!(run(Mode::Train, 0.0, x.clone(), 1), x);
        assert_eq!(run(Mode::Eval, 0.0, x.clone(), 1), x);
        assert_eq!(run(Mode::Eval, 0.7, x.clone(), 1), x);
    }

    #[test]
    fn monte_carlo_keep_fraction_and_scale() {
        let n = 100_000;
        let x = Tensor::ones(&[n, 2]);
        let y = run(Mode::Train, 0.5, x, 7);
        let mut kept = 0;
        for row in y.data().chunks(2) {
            assert_eq!(row[0], row[1], "mask must be per sample");
            if row[0] != 0.0 {
                assert_eq!(row[0], 2.0);
                kept += 1;
            }
        }
        let frac = kept as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "keep fraction {frac}");
        let mean = y.sum_f64() / (2 * n) as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn schedules() {
        let uni = DropSpec {
            drop_path_rate: 0.2,
            ..DropSpec::none()
        };
        assert_eq!(uni.path_rate(0, 8), 0.2);
        assert_eq!(uni.path_rate(7, 8), 0.2);
        let lin = DropSpec {
            schedule: DropSchedule::Linear,
            ..uni
        };
        assert_eq!(lin.path_rate(0, 8), 0.0);
        assert!((lin.path_rate(7, 8) - 0.2).abs() < 1e-15);
        assert!((lin.path_rate(3, 7) - 0.1).abs() < 1e-15);
        assert_eq!(lin.path_rate(0, 1), 0.0);
    }

    #[test]
    fn rejects_out_of_range_probabilities() {
        let bad = DropSpec {
            ffn_dropout: 1.0,
            ..DropSpec::none()
        };
        assert!(bad.validate().is_err());
        assert!(DropSpec::none().validate().is_ok());
    }
}

use std::time::Instant;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_params, estimate_flops, PredFormer};
use crate::nn::{Ctx, Mode, ParamStore, Rng};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub variant: String,
    pub layers: usize,
    pub params: usize,
    pub flops_per_sample: u64,
    /// Median over repetitions of predicted frames per second.
    pub fps: f64,
    pub batch: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub repeats: usize,
}

/// `iters * batch * frames / seconds`.
pub fn fps_from(iters: usize, batch: usize, frames: usize, seconds: f64) -> f64 {
    (iters * batch * frames) as f64 / seconds
}

/// Times eval-mode forward passes on random frames: `warmup` untimed passes,
/// then three repetitions of `timed` passes; reports the median rate.
pub fn fps_bench(
    model: &PredFormer,
    store: &ParamStore<f32>,
    batch: usize,
    warmup: usize,
    timed: usize,
) -> Result<BenchResult> {
    if warmup < 3 || timed < 10 || batch == 0 {
        return Err(Error::Config(format!(
            "benchmark needs warmup >= 3, timed >= 10 and batch >= 1 (got {warmup}, {timed}, {batch})"
        )));
    }
    const REPEATS: usize = 3;
    let cfg = &model.cfg;
    let mut rng = Rng::seed_from_u64(0);
    let input = Tensor::from_fn(&cfg.frame_shape(batch), |_| rng.random::<f32>());
    let run = |rng: &mut Rng| -> Result<()> {
        let tape = Tape::inference();
        let bound = store.bind(&tape);
        let mut ctx = Ctx::new(&tape, &bound, Mode::Eval, rng);
        let out = model.forward(&mut ctx, &Var::constant(input.clone()))?;
        std::hint::black_box(out);
        Ok(())
    };
    for _ in 0..warmup {
        run(&mut rng)?;
    }
    let mut rates = Vec::with_capacity(REPEATS);
    for _ in 0..REPEATS {
        let start = Instant::now();
        for _ in 0..timed {
            run(&mut rng)?;
        }
        rates.push(fps_from(
            timed,
            batch,
            cfg.frames_out,
            start.elapsed().as_secs_f64(),
        ));
    }
    rates.sort_by(f64::total_cmp);
    Ok(BenchResult {
        variant: cfg.variant.kind.to_string(),
        layers: cfg.variant.layers,
        params: count_params(cfg),
        flops_per_sample: estimate_flops(cfg),
        fps: rates[REPEATS / 2],
        batch,
        warmup_iters: warmup,
        timed_iters: timed,
        repeats: REPEATS,
    })
}

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::{adamw_step, clip_global_norm, OptimizerState, TrainConfig};
use crate::data::{split_context_target, SequenceBatch};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PredFormer};
use crate::nn::{Ctx, Mode, ParamStore, Rng};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Mean squared error over all elements.
pub fn l2_loss<F: Element>(tape: &Tape<F>, pred: &Var<F>, target: &Var<F>) -> Result<Var<F>> {
    tape.mse(pred, target)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub seconds: f64,
}

const DROPOUT_STREAM: u64 = 1;
const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

/// Owns the model parameters, optimizer state and random streams of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: PredFormer,
    pub store: ParamStore<f32>,
    pub opt: OptimizerState<f32>,
    pub cfg: TrainConfig,
    pub dataset_len: usize,
    pub epoch: usize,
    /// Loss of every optimizer step so far.
    pub history: Vec<f64>,
    pub(crate) rng: Rng,
}

impl Trainer {
    /// Fresh run over a dataset of `dataset_len` sequences.
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, dataset_len: usize) -> Result<Self> {
        cfg.validate()?;
        if dataset_len == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        let mut init = Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = PredFormer::new(model_cfg, &mut store, &mut init)?;
        let opt = OptimizerState::new(&store);
        let mut rng = Rng::seed_from_u64(cfg.seed);
        rng.set_stream(DROPOUT_STREAM);
        Ok(Self {
            model,
            store,
            opt,
            cfg: cfg.clone(),
            dataset_len,
            epoch: 0,
            history: Vec::new(),
            rng,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset_len.div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.batches_per_epoch()
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Sequence order of `epoch`, a pure function of the seed and epoch.
    pub fn batch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(SHUFFLE_STREAM_BASE + epoch as u64);
        let mut order: Vec<usize> = (0..self.dataset_len).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Forward, L2 loss, backward, optional clipping and one AdamW update.
    pub fn train_step(&mut self, context: &Tensor<f32>, target: &Tensor<f32>) -> Result<StepStats> {
        let step = self.opt.step as usize;
        let lr = self.cfg.lr_at(step, self.total_steps())?;
        let (loss, mut grads) = {
            let tape = Tape::new();
            let bound = self.store.bind(&tape);
            let mut ctx = Ctx::new(&tape, &bound, Mode::Train, &mut self.rng);
            let pred = self
                .model
                .forward(&mut ctx, &tape.constant(context.clone()))?;
            let loss = l2_loss(&tape, &pred, &tape.constant(target.clone()))?;
            let value = loss.value().item()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at step {step} (lr {lr:e})"
                )));
            }
            let mut g = tape.backward(&loss)?;
            let grads: Vec<Tensor<f32>> = bound.vars().iter().map(|v| g.take(v)).collect();
            (value, grads)
        };
        let grad_norm = self.cfg.grad_clip.map(|c| clip_global_norm(&mut grads, c));
        adamw_step(
            &mut self.store,
            &grads,
            &mut self.opt,
            lr,
            &self.cfg.adamw(),
        )?;
        self.history.push(loss);
        Ok(StepStats {
            step: self.opt.step,
            loss,
            lr,
            grad_norm,
        })
    }

    /// One pass over `data` in the epoch's shuffled order.
    pub fn train_epoch(&mut self, data: &SequenceBatch) -> Result<EpochStats> {
        if data.len() != self.dataset_len {
            return Err(Error::Config(format!(
                "trainer was set up for {} sequences, got {}",
                self.dataset_len,
                data.len()
            )));
        }
        let start = Instant::now();
        let order = self.batch_order(self.epoch);
        let mut losses = Vec::new();
        let mut lrs = Vec::new();
        for idx in order.chunks(self.cfg.batch_size) {
            let (context, target) = split_context_target(&data.select(idx)?)?;
            let s = self.train_step(&context, &target)?;
            losses.push(s.loss);
            lrs.push(s.lr);
        }
        let stats = EpochStats {
            epoch: self.epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            losses,
            lrs,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        Ok(stats)
    }

    /// Eval-mode prediction, `batch_size` sequences at a time.
    pub fn predict(&self, context: &Tensor<f32>) -> Result<Tensor<f32>> {
        predict(&self.model, &self.store, context, self.cfg.batch_size)
    }
}

/// Eval-mode forward over `context` in chunks of `chunk` sequences.
pub(crate) fn predict(
    model: &PredFormer,
    store: &ParamStore<f32>,
    context: &Tensor<f32>,
    chunk: usize,
) -> Result<Tensor<f32>> {
    let n = context.shape()[0];
    let mut parts = Vec::new();
    let mut rng = Rng::seed_from_u64(0);
    for start in (0..n).step_by(chunk.max(1)) {
        let part = context.slice_axis0(start, (start + chunk).min(n))?;
        let tape = Tape::inference();
        let bound = store.bind(&tape);
        let mut ctx = Ctx::new(&tape, &bound, Mode::Eval, &mut rng);
        parts.push(model.forward(&mut ctx, &tape.constant(part))?.into_value());
    }
    let mut shape = parts[0].shape().to_vec();
    shape[0] = n;
    Tensor::new(
        &shape,
        parts.into_iter().flat_map(Tensor::into_data).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_moving_shapes, ShapeSpec};
    use crate::model::VariantKind;
    use crate::train::SchedulerKind;

    fn small() -> (ModelConfig, TrainConfig, SequenceBatch) {
        let mut m = ModelConfig::tiny(VariantKind::BinaryTS);
        m.height = 16;
        m.width = 16;
        m.patch = 4;
        m.drop.attn_dropout = 0.1;
        m.drop.drop_path_rate = 0.1;
        let spec = ShapeSpec {
            height: 16,
            width: 16,
            size_min: 3,
            size_max: 5,
            num_objects: 1,
            ..ShapeSpec::default()
        };
        let data = SequenceBatch::new(gen_moving_shapes(&spec, 5, 4).unwrap(), 2, 2).unwrap();
        let t = TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        (m, t, data)
    }

    #[test]
    fn l2_loss_cases() {
        let tape = Tape::<f64>::inference();
        let t = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let p = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64 + 1.0));
        assert_eq!(l2_loss(&tape, &t, &t).unwrap().value().item().unwrap(), 0.0);
        assert_eq!(l2_loss(&tape, &p, &t).unwrap().value().item().unwrap(), 1.0);
        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(l2_loss(&tape, &bad, &t).is_err());
    }

    #[test]
    fn l2_loss_matches_two_pass_f64() {
        use rand::Rng as _;
        let mut rng = Rng::seed_from_u64(3);
        let a: Vec<f32> = (0..1000).map(|_| rng.random()).collect();
        let b: Vec<f32> = (0..1000).map(|_| rng.random()).collect();
        let tape = Tape::<f32>::inference();
        let pa = tape.constant(Tensor::new(&[10, 100], a.clone()).unwrap());
        let pb = tape.constant(Tensor::new(&[10, 100], b.clone()).unwrap());
        let got = l2_loss(&tape, &pa, &pb).unwrap().value().item().unwrap() as f64;
        let diffs: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| *x as f64 - *y as f64)
            .collect();
        let expect = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        assert!((got - expect).abs() / expect < 1e-6);
    }

    #[test]
    fn lr_trace_follows_schedule_and_runs_are_identical() {
        let (m, t, data) = small();
        let mut a = Trainer::new(&m, &t, data.len()).unwrap();
        let mut b = Trainer::new(&m, &t, data.len()).unwrap();
        let total = a.total_steps();
        assert_eq!(total, 9);
        let mut step = 0;
        for _ in 0..3 {
            let sa = a.train_epoch(&data).unwrap();
            let sb = b.train_epoch(&data).unwrap();
            for lr in &sa.lrs {
                assert_eq!(
                    *lr,
                    crate::train::onecycle_lr(step, total, t.lr_max).unwrap()
                );
                step += 1;
            }
            assert_eq!(sa.losses, sb.losses);
        }
        assert!(a.history.iter().all(|l| l.is_finite()));
        assert!(a.train_epoch(&data).is_err(), "schedule is exhausted");
    }

    #[test]
    fn cosine_scheduler_and_clipping() {
        let (m, mut t, data) = small();
        t.scheduler = SchedulerKind::Cosine;
        t.lr_min = 1e-5;
        t.grad_clip = Some(0.5);
        let mut tr = Trainer::new(&m, &t, data.len()).unwrap();
        let (c, g) = split_context_target(&data.select(&[0, 1]).unwrap()).unwrap();
        let s = tr.train_step(&c, &g).unwrap();
        assert_eq!(s.lr, t.lr_max);
        assert!(s.grad_norm.unwrap() > 0.0);
    }

    #[test]
    fn shuffled_order_depends_on_epoch_only() {
        let (m, t, data) = small();
        let tr = Trainer::new(&m, &t, data.len()).unwrap();
        let mut o = tr.batch_order(1);
        assert_eq!(o, tr.batch_order(1));
        o.sort();
        assert_eq!(o, (0..5).collect::<Vec<_>>());
    }
}

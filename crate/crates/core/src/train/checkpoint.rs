//! `PFCK` checkpoints: magic, u16 version, u32 length-prefixed JSON header,
//! then one `.pfts` record per parameter, per first moment and per second
//! moment, in parameter order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig, Trainer};
use crate::data::{read_exact_or_truncated, read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PredFormer};
use crate::nn::{ParamStore, Rng};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: [u8; 4] = *b"PFCK";
pub const CKPT_VERSION: u16 = 1;

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    dataset_len: usize,
    epoch: usize,
    step: u64,
    rng: RngState,
    history: Vec<f64>,
    params: Vec<(String, Vec<usize>)>,
}

/// Complete resumable training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset_len: usize,
    pub epoch: usize,
    pub params: ParamStore<f32>,
    pub opt: OptimizerState<f32>,
    pub rng: RngState,
    pub history: Vec<f64>,
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.cfg.clone(),
            train: self.cfg.clone(),
            dataset_len: self.dataset_len,
            epoch: self.epoch,
            params: self.store.clone(),
            opt: self.opt.clone(),
            rng: RngState::capture(&self.rng),
            history: self.history.clone(),
        }
    }

    /// Rebuilds a trainer, checking that the stored tensors fit the model
    /// described by the stored config.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        let mut fresh = ParamStore::<f32>::new();
        let model = PredFormer::new(&ckpt.model, &mut fresh, &mut Rng::seed_from_u64(0))?;
        if fresh.len() != ckpt.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "model has {} parameter tensors, checkpoint has {}",
                fresh.len(),
                ckpt.params.len()
            )));
        }
        for ((name, t), (cname, ct)) in fresh.iter().zip(ckpt.params.iter()) {
            if name != cname || t.shape() != ct.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "expected {name} {:?}, found {cname} {:?}",
                    t.shape(),
                    ct.shape()
                )));
            }
        }
        Ok(Self {
            model,
            store: ckpt.params,
            opt: ckpt.opt,
            cfg: ckpt.train,
            dataset_len: ckpt.dataset_len,
            epoch: ckpt.epoch,
            history: ckpt.history,
            rng: ckpt.rng.restore(),
        })
    }

    /// Loads `path` and refuses it unless it was written for `expected`.
    pub fn resume(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.model != *expected {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint was written for a different model config ({} x{} vs {} x{})",
                ckpt.model.variant.kind,
                ckpt.model.variant.layers,
                expected.variant.kind,
                expected.variant.layers
            )));
        }
        Self::from_checkpoint(ckpt)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.checkpoint())
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let header = Header {
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        dataset_len: ckpt.dataset_len,
        epoch: ckpt.epoch,
        step: ckpt.opt.step,
        rng: ckpt.rng,
        history: ckpt.history.clone(),
        params: ckpt
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Corrupt(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in ckpt.params.iter() {
        write_tensor(&mut w, t)?;
    }
    for t in ckpt.opt.m.iter().chain(&ckpt.opt.v) {
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

fn read_record<R: Read>(r: &mut R, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let t = read_tensor(r)?.expect::<f32>()?;
    if t.shape() != shape {
        return Err(Error::Corrupt(format!(
            "record for {name} has shape {:?}, header says {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let head = read_exact_or_truncated(&mut r, 10)?;
    let found: [u8; 4] = head[..4].try_into().expect("4 bytes");
    if found != CKPT_MAGIC {
        return Err(Error::BadMagic {
            expected: CKPT_MAGIC,
            found,
        });
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CKPT_VERSION,
            found: version,
        });
    }
    let len = u32::from_le_bytes(head[6..10].try_into().expect("4 bytes")) as usize;
    let json = read_exact_or_truncated(&mut r, len)?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;

    let mut params = ParamStore::new();
    for (name, shape) in &header.params {
        params.add(name.clone(), read_record(&mut r, name, shape)?);
    }
    let mut moments = Vec::with_capacity(2 * header.params.len());
    for _ in 0..2 {
        for (name, shape) in &header.params {
            moments.push(read_record(&mut r, name, shape)?);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Corrupt("trailing bytes after checkpoint".into()));
    }
    let v = moments.split_off(header.params.len());
    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        dataset_len: header.dataset_len,
        epoch: header.epoch,
        params,
        opt: OptimizerState {
            m: moments,
            v,
            step: header.step,
        },
        rng: header.rng,
        history: header.history,
    })
}

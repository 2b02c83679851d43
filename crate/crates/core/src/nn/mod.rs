//! Neural building blocks: parameters, regularizers, attention, feed-forward
//! networks and the gated transformer block.

mod attention;
mod ffn;
mod gtb;
mod params;
mod regularize;

pub use attention::{mhsa, AttentionParams};
pub use ffn::{mlp_ffn, swiglu_ffn, FfnKind, FfnParams, MlpParams, SwiGluParams};
pub use gtb::{gtb_forward, GtbParams};
pub use params::{Bound, LayerNormParams, Linear, ParamId, ParamInit, ParamStore};
pub use regularize::{drop_path, dropout, DropSchedule, DropSpec};

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Tape};

/// Random number generator used for initialization, dropout and data.
pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a forward pass needs besides its inputs.
pub struct Ctx<'a, F> {
    pub tape: &'a Tape<F>,
    pub params: &'a Bound<F>,
    pub mode: Mode,
    pub rng: &'a mut Rng,
}

impl<'a, F: Element> Ctx<'a, F> {
    pub fn new(tape: &'a Tape<F>, params: &'a Bound<F>, mode: Mode, rng: &'a mut Rng) -> Self {
        Self {
            tape,
            params,
            mode,
            rng,
        }
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }
}

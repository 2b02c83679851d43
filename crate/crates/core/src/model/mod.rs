//! End-to-end predictor: patch embedding, positional encoding, the nine
//! encoder variants, patch recovery and analytic cost accounting.

mod cost;
mod embed;
mod encoder;

pub use cost::{count_params, estimate_flops, gtb_flops};
pub use embed::{patch_embed, patch_recover, positional_encoding, sinusoid};
pub use encoder::{
    encoder_forward, full_pass, model_forward, spatial_pass, temporal_pass, PredFormer,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DropSpec, FfnKind};

/// Attention axis of a single gated block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Over the N patches of each frame.
    Spatial,
    /// Over the T frames of each patch position.
    Temporal,
    /// Over all T*N tokens jointly.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantKind {
    #[serde(rename = "full_attention")]
    FullAttention,
    #[serde(rename = "fac_st")]
    FacST,
    #[serde(rename = "fac_ts")]
    FacTS,
    #[serde(rename = "binary_ts")]
    BinaryTS,
    #[serde(rename = "binary_st")]
    BinaryST,
    #[serde(rename = "triplet_tst")]
    TripletTST,
    #[serde(rename = "triplet_sts")]
    TripletSTS,
    #[serde(rename = "quad_tsst")]
    QuadTSST,
    #[serde(rename = "quad_stts")]
    QuadSTTS,
}

impl VariantKind {
    pub const ALL: [VariantKind; 9] = [
        VariantKind::FullAttention,
        VariantKind::FacST,
        VariantKind::FacTS,
        VariantKind::BinaryTS,
        VariantKind::BinaryST,
        VariantKind::TripletTST,
        VariantKind::TripletSTS,
        VariantKind::QuadTSST,
        VariantKind::QuadSTTS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::FullAttention => "full_attention",
            VariantKind::FacST => "fac_st",
            VariantKind::FacTS => "fac_ts",
            VariantKind::BinaryTS => "binary_ts",
            VariantKind::BinaryST => "binary_st",
            VariantKind::TripletTST => "triplet_tst",
            VariantKind::TripletSTS => "triplet_sts",
            VariantKind::QuadTSST => "quad_tsst",
            VariantKind::QuadSTTS => "quad_stts",
        }
    }

    /// Axis pattern of one interleaved layer; `None` for full and factorized
    /// encoders, whose blocks are not grouped into interleaved layers.
    pub fn pattern(self) -> Option<&'static [Axis]> {
        use Axis::{Spatial as S, Temporal as T};
        match self {
            VariantKind::FullAttention | VariantKind::FacST | VariantKind::FacTS => None,
            VariantKind::BinaryTS => Some(&[T, S]),
            VariantKind::BinaryST => Some(&[S, T]),
            VariantKind::TripletTST => Some(&[T, S, T]),
            VariantKind::TripletSTS => Some(&[S, T, S]),
            VariantKind::QuadTSST => Some(&[T, S, S, T]),
            VariantKind::QuadSTTS => Some(&[S, T, T, S]),
        }
    }

    /// Gated blocks contributed by one unit of `layers`.
    pub fn gtb_per_layer(self) -> usize {
        self.pattern().map_or(1, <[Axis]>::len)
    }

    pub fn is_factorized(self) -> bool {
        self != VariantKind::FullAttention
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        VariantKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| {
                let names: Vec<&str> = VariantKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown variant '{s}'; expected one of: {}",
                    names.join(", ")
                ))
            })
    }
}

/// Encoder variant and depth.
///
/// For interleaved variants `layers` counts PredFormer layers of 2, 3 or 4
/// blocks. For full attention and the factorized encoders it counts gated
/// blocks directly; factorized encoders give the first half to one axis and
/// the second half to the other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub kind: VariantKind,
    pub layers: usize,
    #[serde(default)]
    pub layer_skip: bool,
}

impl VariantSpec {
    pub fn new(kind: VariantKind, layers: usize) -> Self {
        Self {
            kind,
            layers,
            layer_skip: false,
        }
    }

    /// Deepest spec of `kind` that fits in `gtbs` gated blocks.
    pub fn with_gtb_budget(kind: VariantKind, gtbs: usize) -> Self {
        let layers = match kind {
            VariantKind::FacST | VariantKind::FacTS => gtbs / 2 * 2,
            _ => gtbs / kind.gtb_per_layer(),
        };
        Self::new(kind, layers)
    }

    pub fn gtb_count(&self) -> usize {
        self.layers * self.kind.gtb_per_layer()
    }

    /// Block axes grouped by PredFormer layer.
    pub fn schedule(&self) -> Vec<Vec<Axis>> {
        match self.kind {
            VariantKind::FullAttention => vec![vec![Axis::Full]; self.layers],
            VariantKind::FacST | VariantKind::FacTS => {
                let (first, second) = if self.kind == VariantKind::FacST {
                    (Axis::Spatial, Axis::Temporal)
                } else {
                    (Axis::Temporal, Axis::Spatial)
                };
                let half = self.layers / 2;
                (0..self.layers)
                    .map(|i| vec![if i < half { first } else { second }])
                    .collect()
            }
            kind => {
                let pattern = kind.pattern().expect("interleaved variant");
                vec![pattern.to_vec(); self.layers]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("variant needs at least one layer".into()));
        }
        if matches!(self.kind, VariantKind::FacST | VariantKind::FacTS)
            && !self.layers.is_multiple_of(2)
        {
            return Err(Error::Config(format!(
                "{} splits its blocks evenly between two stages; got {} blocks",
                self.kind, self.layers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeKind {
    SinusoidalAbsolute,
    Learnable,
    /// No positional code; the encoder is then equivariant to patch order.
    None,
}

/// Complete description of one predictor instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames_in: usize,
    pub frames_out: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub variant: VariantSpec,
    #[serde(default)]
    pub drop: DropSpec,
    pub pe: PeKind,
    pub ffn: FfnKind,
    /// LayerNorm between the encoder and the decoder.
    pub final_norm: bool,
    pub ln_eps: f64,
}

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    fn base(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        patch: usize,
        dim: usize,
        heads: usize,
        hidden: usize,
        variant: VariantSpec,
    ) -> Self {
        Self {
            frames_in: frames,
            frames_out: frames,
            channels,
            height,
            width,
            patch,
            dim,
            heads,
            hidden,
            variant,
            drop: DropSpec::none(),
            pe: PeKind::SinusoidalAbsolute,
            ffn: FfnKind::SwiGlu,
            final_norm: true,
            ln_eps: 1e-5,
        }
    }

    /// 64x64 single-channel digits, 10 -> 10 frames, 24 gated blocks.
    pub fn moving_mnist(kind: VariantKind) -> Self {
        Self::base(
            10,
            1,
            64,
            64,
            8,
            256,
            8,
            1024,
            VariantSpec::with_gtb_budget(kind, 24),
        )
    }

    /// 256x256 RGB poses, 4 -> 4 frames, 12 gated blocks.
    pub fn human36m(kind: VariantKind) -> Self {
        Self::base(
            4,
            3,
            256,
            256,
            8,
            256,
            8,
            1024,
            VariantSpec::with_gtb_budget(kind, 12),
        )
    }

    /// 32x32 two-channel traffic flow, 4 -> 4 frames.
    pub fn taxibj(kind: VariantKind, gtbs: usize) -> Self {
        Self::base(
            4,
            2,
            32,
            32,
            4,
            256,
            8,
            1024,
            VariantSpec::with_gtb_budget(kind, gtbs),
        )
    }

    /// 32x64 temperature fields, 12 -> 12 frames, SwiGLU hidden 512.
    pub fn weatherbench(kind: VariantKind, gtbs: usize) -> Self {
        Self::base(
            12,
            1,
            32,
            64,
            4,
            256,
            8,
            512,
            VariantSpec::with_gtb_budget(kind, gtbs),
        )
    }

    /// Reduced Moving-MNIST-like setting used for throughput comparisons:
    /// 32x32 frames, patch 4, D=128, 12 gated blocks.
    pub fn bench_analog(kind: VariantKind) -> Self {
        Self::base(
            10,
            1,
            32,
            32,
            4,
            128,
            8,
            512,
            VariantSpec::with_gtb_budget(kind, 12),
        )
    }

    /// Small setting used by the overfit run.
    pub fn overfit(kind: VariantKind, layers: usize) -> Self {
        Self::base(
            10,
            1,
            32,
            32,
            8,
            128,
            8,
            512,
            VariantSpec::new(kind, layers),
        )
    }

    /// Minimal setting for gradient checks: T=2, 4x4 frames with patch 2
    /// (N=4), D=8.
    pub fn tiny(kind: VariantKind) -> Self {
        Self::base(2, 1, 4, 4, 2, 8, 2, 16, VariantSpec::new(kind, 1))
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch
    }

    /// Patches per frame.
    pub fn tokens(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Values in one flattened patch, `C * p * p`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn frame_shape(&self, batch: usize) -> [usize; 5] {
        [
            batch,
            self.frames_in,
            self.channels,
            self.height,
            self.width,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames_in", self.frames_in),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("hidden", self.hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "frame size {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if self.frames_out != self.frames_in {
            return Err(Error::Config(format!(
                "frames_out ({}) must equal frames_in ({})",
                self.frames_out, self.frames_in
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !self.dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "model dim {} must be even",
                self.dim
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        self.variant.validate()?;
        self.drop.validate()
    }
}

//! Synthetic bouncing-shape sequences and the `.pfts` tensor file format.

mod tensor_file;

pub(crate) use tensor_file::read_exact_or_truncated;
pub use tensor_file::{
    encode_tensor, load_any, load_tensor, read_tensor, save_tensor, write_tensor, AnyTensor, MAGIC,
    VERSION,
};

use rand::Rng as _;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Cross,
    Disk,
}

impl ShapeKind {
    /// Whether pixel `(dy, dx)` of an `s x s` bounding box is covered.
    pub fn covers(self, s: usize, dy: usize, dx: usize) -> bool {
        match self {
            ShapeKind::Square => true,
            ShapeKind::Cross => {
                let th = (s / 3).max(1);
                let lo = (s - th) / 2;
                let band = lo..lo + th;
                band.contains(&dy) || band.contains(&dx)
            }
            ShapeKind::Disk => {
                let c = s as i64 - 1;
                let (y, x) = (2 * dy as i64 - c, 2 * dx as i64 - c);
                y * y + x * x <= (s * s) as i64
            }
        }
    }
}

/// Parameters of the moving-shapes generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub height: usize,
    pub width: usize,
    pub num_objects: usize,
    pub kinds: Vec<ShapeKind>,
    pub size_min: usize,
    pub size_max: usize,
    /// Per-axis speed magnitude range, pixels per frame.
    pub speed_min: usize,
    pub speed_max: usize,
    pub seed: u64,
    /// Permits `speed_min == 0`.
    #[serde(default)]
    pub allow_static: bool,
}

impl Default for ShapeSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_objects: 2,
            kinds: vec![ShapeKind::Square, ShapeKind::Cross, ShapeKind::Disk],
            size_min: 6,
            size_max: 8,
            speed_min: 1,
            speed_max: 3,
            seed: 0,
            allow_static: false,
        }
    }
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.height == 0 || self.width == 0 {
            return bad("canvas must be non-empty".into());
        }
        if self.num_objects == 0 || self.kinds.is_empty() {
            return bad("need at least one object and one shape kind".into());
        }
        if self.size_min == 0 || self.size_min > self.size_max {
            return bad(format!(
                "invalid size range {}..={}",
                self.size_min, self.size_max
            ));
        }
        if 2 * self.size_max >= self.height.min(self.width) {
            return bad(format!(
                "object size {} must be below half the canvas {}x{}",
                self.size_max, self.height, self.width
            ));
        }
        if self.speed_min > self.speed_max {
            return bad(format!(
                "invalid speed range {}..={}",
                self.speed_min, self.speed_max
            ));
        }
        if self.speed_min == 0 && !self.allow_static {
            return bad("speeds must be at least 1 unless allow_static is set".into());
        }
        Ok(())
    }
}

/// One step of a reflective walk on `[0, max]`.
pub fn bounce_step(pos: i64, vel: i64, max: i64) -> (i64, i64) {
    let (mut p, mut v) = (pos + vel, vel);
    loop {
        if p < 0 {
            p = -p;
            v = -v;
        } else if p > max {
            p = 2 * max - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

#[derive(Clone, Debug)]
struct Object {
    kind: ShapeKind,
    size: usize,
    pos: [i64; 2],
    vel: [i64; 2],
}

fn spawn(spec: &ShapeSpec, rng: &mut Rng) -> Object {
    let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
    let size = rng.random_range(spec.size_min..=spec.size_max);
    let pos = [
        rng.random_range(0..=(spec.height - size)) as i64,
        rng.random_range(0..=(spec.width - size)) as i64,
    ];
    let mut vel = [0i64; 2];
    for v in &mut vel {
        let speed = rng.random_range(spec.speed_min..=spec.speed_max) as i64;
        *v = if rng.random_bool(0.5) { speed } else { -speed };
    }
    Object {
        kind,
        size,
        pos,
        vel,
    }
}

fn rasterize(spec: &ShapeSpec, objects: &[Object], frame: &mut [f32]) {
    for o in objects {
        let (y0, x0) = (o.pos[0] as usize, o.pos[1] as usize);
        for dy in 0..o.size {
            for dx in 0..o.size {
                if o.kind.covers(o.size, dy, dx) {
                    let px = &mut frame[(y0 + dy) * spec.width + x0 + dx];
                    *px = px.max(1.0);
                }
            }
        }
    }
}

/// Frames of one sequence, `[frames, 1, H, W]` flattened.
fn sequence(spec: &ShapeSpec, seed: u64, frames: usize) -> Vec<f32> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut objects: Vec<Object> = (0..spec.num_objects)
        .map(|_| spawn(spec, &mut rng))
        .collect();
    let area = spec.height * spec.width;
    let mut out = vec![0.0f32; frames * area];
    for frame in out.chunks_exact_mut(area) {
        rasterize(spec, &objects, frame);
        for o in &mut objects {
            let max = [(spec.height - o.size) as i64, (spec.width - o.size) as i64];
            for a in 0..2 {
                (o.pos[a], o.vel[a]) = bounce_step(o.pos[a], o.vel[a], max[a]);
            }
        }
    }
    out
}

/// Generates `count` sequences of `frames_total` binary frames,
/// `[count, frames_total, 1, H, W]`. Sequence `i` is seeded with `seed ^ i`.
pub fn gen_moving_shapes(
    spec: &ShapeSpec,
    count: usize,
    frames_total: usize,
) -> Result<Tensor<f32>> {
    spec.validate()?;
    if count == 0 || frames_total == 0 {
        return Err(Error::Config(
            "count and frames_total must be positive".into(),
        ));
    }
    let seqs: Vec<Vec<f32>> = (0..count)
        .into_par_iter()
        .map(|i| sequence(spec, spec.seed ^ i as u64, frames_total))
        .collect();
    Tensor::new(
        &[count, frames_total, 1, spec.height, spec.width],
        seqs.concat(),
    )
}

/// Sequences `[B, T + T', C, H, W]` with the context/target split recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub frames: Tensor<f32>,
    pub context: usize,
    pub target: usize,
}

impl SequenceBatch {
    pub fn new(frames: Tensor<f32>, context: usize, target: usize) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 5 || s[1] != context + target || context == 0 || target == 0 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("expected [B, {context} + {target}, C, H, W]"),
            });
        }
        Ok(Self {
            frames,
            context,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-batch of the given sequence indices.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            frames: self.frames.gather_axis0(indices)?,
            ..*self
        })
    }
}

/// Splits a batch into its context prefix and target suffix along time.
pub fn split_context_target(batch: &SequenceBatch) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if batch.frames.shape().get(1) != Some(&(batch.context + batch.target)) {
        return Err(Error::ShapeMismatch {
            op: "split_context_target",
            lhs: batch.frames.shape().to_vec(),
            rhs: vec![batch.context, batch.target],
        });
    }
    batch.frames.split_axis1(batch.context)
}

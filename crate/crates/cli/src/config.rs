//! Run configuration: preset defaults, then the config file, then flags.

use std::fmt;
use std::path::{Path, PathBuf};

use predformer::data::{ShapeKind, ShapeSpec};
use predformer::model::{ModelConfig, PeKind, VariantKind, VariantSpec};
use predformer::nn::{DropSchedule, DropSpec, FfnKind};
use predformer::train::{SchedulerKind, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Bad command line or config file; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub const PRESETS: [&str; 7] = [
    "overfit",
    "tiny",
    "bench_analog",
    "moving_mnist",
    "human36m",
    "taxibj",
    "weatherbench",
];

pub const DEFAULT_PRESET: &str = "overfit";
pub const DEFAULT_VARIANT: VariantKind = VariantKind::BinaryTS;

pub fn preset_model(name: &str, kind: VariantKind) -> anyhow::Result<ModelConfig> {
    Ok(match name {
        "overfit" => ModelConfig::overfit(kind, 2),
        "tiny" => ModelConfig::tiny(kind),
        "bench_analog" => ModelConfig::bench_analog(kind),
        "moving_mnist" => ModelConfig::moving_mnist(kind),
        "human36m" => ModelConfig::human36m(kind),
        "taxibj" => ModelConfig::taxibj(kind, 8),
        "weatherbench" => ModelConfig::weatherbench(kind, 8),
        other => {
            return Err(usage(format!(
                "unknown preset `{other}`; expected one of: {}",
                PRESETS.join(", ")
            )))
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub preset: String,
    pub seed: u64,
    pub out: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: VariantKind,
    pub layers: usize,
    pub layer_skip: bool,
    pub frames_in: usize,
    pub frames_out: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub pe: PeKind,
    pub ffn: FfnKind,
    pub final_norm: bool,
    pub ln_eps: f64,
    pub attn_dropout: f64,
    pub ffn_dropout: f64,
    pub drop_path: f64,
    pub drop_schedule: DropSchedule,
}

impl From<&ModelConfig> for ModelSection {
    fn from(c: &ModelConfig) -> Self {
        Self {
            variant: c.variant.kind,
            layers: c.variant.layers,
            layer_skip: c.variant.layer_skip,
            frames_in: c.frames_in,
            frames_out: c.frames_out,
            channels: c.channels,
            height: c.height,
            width: c.width,
            patch: c.patch,
            dim: c.dim,
            heads: c.heads,
            hidden: c.hidden,
            pe: c.pe,
            ffn: c.ffn,
            final_norm: c.final_norm,
            ln_eps: c.ln_eps,
            attn_dropout: c.drop.attn_dropout,
            ffn_dropout: c.drop.ffn_dropout,
            drop_path: c.drop.drop_path_rate,
            drop_schedule: c.drop.schedule,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self) -> ModelConfig {
        ModelConfig {
            frames_in: self.frames_in,
            frames_out: self.frames_out,
            channels: self.channels,
            height: self.height,
            width: self.width,
            patch: self.patch,
            dim: self.dim,
            heads: self.heads,
            hidden: self.hidden,
            variant: VariantSpec {
                kind: self.variant,
                layers: self.layers,
                layer_skip: self.layer_skip,
            },
            drop: DropSpec {
                attn_dropout: self.attn_dropout,
                ffn_dropout: self.ffn_dropout,
                drop_path_rate: self.drop_path,
                schedule: self.drop_schedule,
            },
            pe: self.pe,
            ffn: self.ffn,
            final_norm: self.final_norm,
            ln_eps: self.ln_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub scheduler: SchedulerKind,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Write a checkpoint every this many epochs (and always after the last).
    pub checkpoint_every: usize,
}

impl From<&TrainConfig> for TrainSection {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr_max: c.lr_max,
            lr_min: c.lr_min,
            weight_decay: c.weight_decay,
            beta1: c.betas.0,
            beta2: c.betas.1,
            eps: c.eps,
            epochs: c.epochs,
            batch_size: c.batch_size,
            scheduler: c.scheduler,
            grad_clip: c.grad_clip.unwrap_or(0.0),
            checkpoint_every: 1,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            betas: (self.beta1, self.beta2),
            eps: self.eps,
            epochs: self.epochs,
            batch_size: self.batch_size,
            scheduler: self.scheduler,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: String,
    pub val: String,
    pub count: usize,
    pub val_count: usize,
    pub objects: usize,
    pub kinds: Vec<ShapeKind>,
    pub size_min: usize,
    pub size_max: usize,
    pub speed_min: usize,
    pub speed_max: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = ShapeSpec::default();
        Self {
            train: "data/train.pfts".into(),
            val: "data/val.pfts".into(),
            count: 64,
            val_count: 16,
            objects: s.num_objects,
            kinds: s.kinds,
            size_min: s.size_min,
            size_max: s.size_max,
            speed_min: s.speed_min,
            speed_max: s.speed_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Empty means `<out>/checkpoint.pfck`.
    pub checkpoint: String,
    /// Empty means `data.val`.
    pub data: String,
    pub batch_size: usize,
    /// File name inside the output directory; `.jsonl` selects JSON lines. The
    /// full report with per-frame metrics goes next to it as `.json`.
    pub report: String,
    pub dump_predictions: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: String::new(),
            data: String::new(),
            batch_size: 16,
            report: "metrics.csv".into(),
            dump_predictions: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub batch: usize,
    pub warmup: usize,
    pub iters: usize,
    /// Measure throughput; off gives the cost table only.
    pub timing: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            batch: 1,
            warmup: 3,
            iters: 10,
            timing: true,
        }
    }
}

/// Fully resolved configuration of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn defaults(preset: &str, kind: VariantKind, out: &str) -> anyhow::Result<Self> {
        let model = preset_model(preset, kind)?;
        let mut train = TrainConfig::default();
        if matches!(preset, "human36m" | "weatherbench") {
            train.lr_max = 5e-4;
        }
        Ok(Self {
            run: RunSection {
                preset: preset.into(),
                seed: 0,
                out: out.into(),
            },
            model: (&model).into(),
            train: (&train).into(),
            data: DataSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.to_config()
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.to_config(self.run.seed)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.run.out)
    }

    /// Generator settings for the training split; validation uses `seed + 1`.
    pub fn shape_spec(&self, split_offset: u64) -> ShapeSpec {
        ShapeSpec {
            height: self.model.height,
            width: self.model.width,
            num_objects: self.data.objects,
            kinds: self.data.kinds.clone(),
            size_min: self.data.size_min,
            size_max: self.data.size_max,
            speed_min: self.data.speed_min,
            speed_max: self.data.speed_max,
            seed: self.run.seed.wrapping_add(split_offset),
            allow_static: false,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the effective config to `<out>/effective_config.toml`.
    pub fn echo(&self) -> anyhow::Result<PathBuf> {
        let dir = self.out_dir();
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("effective_config.toml");
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}

/// Config-file and flag layers to apply on top of a preset.
#[derive(Clone, Debug, Default)]
pub struct Overlays {
    pub file: Table,
    pub flags: Table,
}

impl Overlays {
    pub fn load(path: Option<&Path>, flags: Table) -> anyhow::Result<Self> {
        let file = match path {
            None => Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| usage(format!("config {}: {e}", p.display())))?
            }
        };
        Ok(Self { file, flags })
    }

    fn lookup(&self, section: &str, key: &str) -> Option<&Value> {
        fn get<'a>(t: &'a Table, section: &str, key: &str) -> Option<&'a Value> {
            t.get(section)?.as_table()?.get(key)
        }
        get(&self.flags, section, key).or_else(|| get(&self.file, section, key))
    }

    pub fn touches(&self, section: &str) -> bool {
        [&self.file, &self.flags].iter().any(|t| {
            t.get(section)
                .and_then(Value::as_table)
                .is_some_and(|s| !s.is_empty())
        })
    }

    /// Merges the layers over the preset's defaults. `variant` forces the
    /// architecture kind and ignores any configured kind and depth.
    pub fn resolve(
        &self,
        default_out: &str,
        variant: Option<VariantKind>,
    ) -> anyhow::Result<RunConfig> {
        let preset = match self.lookup("run", "preset") {
            Some(Value::String(s)) => s.clone(),
            Some(other) => return Err(usage(format!("run.preset must be a string, got {other}"))),
            None => DEFAULT_PRESET.into(),
        };
        let kind = match (variant, self.lookup("model", "variant")) {
            (Some(k), _) => k,
            (None, Some(Value::String(s))) => {
                s.parse::<VariantKind>().map_err(|e| usage(e.to_string()))?
            }
            (None, Some(other)) => {
                return Err(usage(format!(
                    "model.variant must be a string, got {other}"
                )))
            }
            (None, None) => DEFAULT_VARIANT,
        };
        let base = RunConfig::defaults(&preset, kind, default_out)?;
        let mut merged = Table::try_from(&base).expect("config serializes");
        for layer in [&self.file, &self.flags] {
            let mut layer = layer.clone();
            if variant.is_some() {
                if let Some(Value::Table(m)) = layer.get_mut("model") {
                    m.remove("variant");
                    m.remove("layers");
                }
            }
            merge(&mut merged, layer, "")?;
        }
        RunConfig::deserialize(merged).map_err(|e| usage(format!("invalid config: {e}")))
    }
}

fn merge(dst: &mut Table, src: Table, prefix: &str) -> anyhow::Result<()> {
    for (key, value) in src {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match (dst.get_mut(&key), value) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s, &path)?,
            (Some(Value::Table(_)), _) => return Err(usage(format!("`{path}` must be a section"))),
            (None, _) if prefix.is_empty() => {
                return Err(usage(format!(
                    "unknown section `[{path}]`; expected run, model, train, data, eval or bench"
                )))
            }
            (None, _) => return Err(usage(format!("unknown key `{path}`"))),
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

/// Builds a nested table from `section.key = value` pairs.
pub fn flag_table<I>(pairs: I) -> Table
where
    I: IntoIterator<Item = (&'static str, &'static str, Value)>,
{
    let mut t = Table::new();
    for (section, key, value) in pairs {
        t.entry(section)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("section table")
            .insert(key.into(), value);
    }
    t
}

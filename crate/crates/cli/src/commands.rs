use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use predformer::data::{
    gen_moving_shapes, load_any, save_tensor, split_context_target, SequenceBatch,
};
use predformer::metrics::{emit_report, fps_bench, MetricsReport, ReportFormat, ReportRow};
use predformer::model::{count_params, estimate_flops, ModelConfig, PredFormer, VariantKind};
use predformer::nn::{ParamStore, Rng};
use predformer::suite::gradcheck_suite;
use predformer::train::{load_checkpoint, Trainer};
use predformer::Tensor;
use rand::SeedableRng;
use serde_json::json;

use crate::config::{Overlays, RunConfig};

/// A check ran and failed; exits with status 1.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn refuse_existing(paths: &[PathBuf], force: bool) -> anyhow::Result<()> {
    if force {
        return Ok(());
    }
    if let Some(p) = paths.iter().find(|p| p.exists()) {
        bail!("{} already exists; pass --force to overwrite", p.display());
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

/// Loads sequences and checks them against the model geometry.
fn load_sequences(path: &Path, cfg: &ModelConfig) -> anyhow::Result<SequenceBatch> {
    let frames = load_any(path)
        .with_context(|| format!("reading {}", path.display()))?
        .convert::<f32>();
    let s = frames.shape().to_vec();
    let expected = [
        cfg.frames_in + cfg.frames_out,
        cfg.channels,
        cfg.height,
        cfg.width,
    ];
    if s.len() != 5 || s[1..] != expected {
        bail!(
            "{} holds sequences of shape {:?}; the model expects [B, {}, {}, {}, {}]",
            path.display(),
            s,
            expected[0],
            expected[1],
            expected[2],
            expected[3]
        );
    }
    Ok(SequenceBatch::new(frames, cfg.frames_in, cfg.frames_out)?)
}

pub fn gen_data(ov: &Overlays, force: bool) -> anyhow::Result<()> {
    let cfg = ov.resolve("data", None)?;
    if cfg.model.channels != 1 {
        bail!(
            "moving shapes are single-channel; model.channels is {}",
            cfg.model.channels
        );
    }
    if cfg.data.count == 0 || cfg.data.val_count == 0 {
        bail!("data.count and data.val_count must be positive");
    }
    let out = cfg.out_dir();
    let names = ["train.pfts", "val.pfts", "manifest.json"];
    let paths: Vec<PathBuf> = names.iter().map(|n| out.join(n)).collect();
    refuse_existing(&paths, force)?;

    let frames = cfg.model.frames_in + cfg.model.frames_out;
    let mut splits = Vec::new();
    for (offset, count, path) in [
        (0, cfg.data.count, &paths[0]),
        (1, cfg.data.val_count, &paths[1]),
    ] {
        let spec = cfg.shape_spec(offset);
        spec.validate()?;
        let data = gen_moving_shapes(&spec, count, frames)?;
        std::fs::create_dir_all(&out)?;
        save_tensor(path, &data)?;
        splits.push(json!({
            "file": path.file_name().and_then(|n| n.to_str()),
            "count": count,
            "shape": data.shape(),
            "spec": spec,
        }));
        println!("wrote {} {:?}", path.display(), data.shape());
    }
    let manifest = json!({
        "generator": "moving_shapes",
        "seed": cfg.run.seed,
        "frames": frames,
        "context": cfg.model.frames_in,
        "target": cfg.model.frames_out,
        "train": splits[0],
        "val": splits[1],
    });
    std::fs::write(&paths[2], serde_json::to_string_pretty(&manifest)? + "\n")?;
    cfg.echo()?;
    Ok(())
}

pub struct TrainOpts {
    pub resume: Option<Option<PathBuf>>,
    pub until_epoch: Option<usize>,
    pub force: bool,
}

fn write_loss_log(path: &Path, trainer: &Trainer) -> anyhow::Result<()> {
    let total = trainer.total_steps();
    let per_epoch = trainer.batches_per_epoch();
    let mut text = String::from("step,epoch,loss,lr\n");
    for (step, loss) in trainer.history.iter().enumerate() {
        let lr = trainer.cfg.lr_at(step, total)?;
        writeln!(text, "{step},{},{loss},{lr}", step / per_epoch)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn train(ov: &Overlays, opts: &TrainOpts) -> anyhow::Result<()> {
    let cfg = ov.resolve("run", None)?;
    let model_cfg = cfg.model_config();
    let train_cfg = cfg.train_config();
    model_cfg.validate()?;
    train_cfg.validate()?;
    if cfg.train.checkpoint_every == 0 {
        bail!("train.checkpoint_every must be positive");
    }
    let data_path = PathBuf::from(&cfg.data.train);
    require_file(&data_path, "training data")?;
    let out = cfg.out_dir();
    let ckpt_path = out.join("checkpoint.pfck");
    let log_path = out.join("loss.csv");
    let resume_from = opts
        .resume
        .as_ref()
        .map(|p| p.clone().unwrap_or_else(|| ckpt_path.clone()));
    if let Some(p) = &resume_from {
        require_file(p, "checkpoint")?;
    } else {
        refuse_existing(&[ckpt_path.clone(), log_path.clone()], opts.force)?;
    }
    let data = load_sequences(&data_path, &model_cfg)?;

    let mut trainer = match &resume_from {
        Some(p) => {
            let t = Trainer::resume(p, &model_cfg)?;
            if t.cfg != train_cfg {
                bail!(
                    "checkpoint {} was written with different training settings",
                    p.display()
                );
            }
            if t.dataset_len != data.len() {
                bail!(
                    "checkpoint {} was trained on {} sequences, {} has {}",
                    p.display(),
                    t.dataset_len,
                    data_path.display(),
                    data.len()
                );
            }
            t
        }
        None => Trainer::new(&model_cfg, &train_cfg, data.len())?,
    };
    std::fs::create_dir_all(&out)?;
    cfg.echo()?;
    println!(
        "{} x{} ({} gated blocks, {} parameters), {} sequences, {} steps per epoch",
        model_cfg.variant.kind,
        model_cfg.variant.layers,
        trainer.model.gtb_count(),
        trainer.store.numel(),
        data.len(),
        trainer.batches_per_epoch()
    );
    let stop = opts
        .until_epoch
        .unwrap_or(train_cfg.epochs)
        .min(train_cfg.epochs);
    if trainer.epoch >= stop {
        println!("already at epoch {}; nothing to do", trainer.epoch);
        return Ok(());
    }
    while trainer.epoch < stop {
        let stats = trainer.train_epoch(&data)?;
        println!(
            "epoch {:>4}  loss {:.6e}  lr {:.3e}  {:.1}s",
            stats.epoch + 1,
            stats.mean_loss,
            stats.lrs.last().copied().unwrap_or(0.0),
            stats.seconds
        );
        if trainer.epoch % cfg.train.checkpoint_every == 0 || trainer.epoch == stop {
            trainer.save_checkpoint(&ckpt_path)?;
            write_loss_log(&log_path, &trainer)?;
        }
    }
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

pub struct EvalOpts {
    pub force: bool,
}

pub fn eval(ov: &Overlays, opts: &EvalOpts) -> anyhow::Result<()> {
    let cfg = ov.resolve("run", None)?;
    let out = cfg.out_dir();
    let ckpt_path = match cfg.eval.checkpoint.as_str() {
        "" => out.join("checkpoint.pfck"),
        p => PathBuf::from(p),
    };
    let data_path = PathBuf::from(match cfg.eval.data.as_str() {
        "" => &cfg.data.val,
        p => p,
    });
    require_file(&ckpt_path, "checkpoint")?;
    require_file(&data_path, "evaluation data")?;
    if cfg.eval.batch_size == 0 {
        bail!("eval.batch_size must be positive");
    }
    let report_path = out.join(&cfg.eval.report);
    let json_path = report_path.with_extension("json");
    if json_path == report_path {
        bail!("eval.report must not be a .json file; use .csv or .jsonl");
    }
    refuse_existing(&[report_path.clone(), json_path.clone()], opts.force)?;

    let ckpt = load_checkpoint(&ckpt_path)?;
    if ov.touches("model") && cfg.model_config() != ckpt.model {
        bail!(predformer::Error::CheckpointMismatch(format!(
            "configured model differs from the one stored in {}",
            ckpt_path.display()
        )));
    }
    let trainer = Trainer::from_checkpoint(ckpt)?;
    let model_cfg = trainer.model.cfg.clone();
    let data = load_sequences(&data_path, &model_cfg)?;
    let (_, target) = split_context_target(&data)?;

    std::fs::create_dir_all(&out)?;
    cfg.echo()?;
    let n = data.len();
    let mut pred = Vec::with_capacity(target.numel());
    for (i, start) in (0..n).step_by(cfg.eval.batch_size).enumerate() {
        let idx: Vec<usize> = (start..(start + cfg.eval.batch_size).min(n)).collect();
        let (context, _) = split_context_target(&data.select(&idx)?)?;
        let p = trainer.predict(&context)?;
        if cfg.eval.dump_predictions {
            let dir = out.join("predictions");
            std::fs::create_dir_all(&dir)?;
            save_tensor(dir.join(format!("batch_{i:04}.pfts")), &p)?;
        }
        pred.extend_from_slice(p.data());
    }
    let pred = Tensor::new(target.shape(), pred)?;
    let run_id = out
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("eval")
        .to_string();
    let report = MetricsReport::new(&run_id, &model_cfg, &pred, &target, None)?;
    emit_report(
        &[report.row()],
        &report_path,
        ReportFormat::from_path(&report_path),
    )?;
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "{} sequences  mse {:.6e}  mae {:.6e}  rmse {:.6e}  ssim {:.4}  psnr {:.2}",
        n, report.mse, report.mae, report.rmse, report.ssim, report.psnr
    );
    println!("report {}", report_path.display());
    Ok(())
}

pub struct BenchOpts {
    pub all_variants: bool,
}

pub fn bench(ov: &Overlays, opts: &BenchOpts) -> anyhow::Result<()> {
    let base = ov.resolve("run", None)?;
    let kinds: Vec<Option<VariantKind>> = if opts.all_variants {
        VariantKind::ALL.into_iter().map(Some).collect()
    } else {
        vec![None]
    };
    let mut rows = Vec::new();
    println!(
        "{:<16} {:>6} {:>5} {:>11} {:>10} {:>10}",
        "variant", "layers", "gtbs", "params", "gflops", "fps"
    );
    for kind in kinds {
        let cfg = ov.resolve("run", kind)?;
        let mc = cfg.model_config();
        mc.validate()?;
        let params = count_params(&mc);
        let flops = estimate_flops(&mc);
        let fps = if cfg.bench.timing {
            let mut rng = Rng::seed_from_u64(cfg.run.seed);
            let mut store = ParamStore::new();
            let model = PredFormer::new(&mc, &mut store, &mut rng)?;
            Some(
                fps_bench(
                    &model,
                    &store,
                    cfg.bench.batch,
                    cfg.bench.warmup,
                    cfg.bench.iters,
                )?
                .fps,
            )
        } else {
            None
        };
        println!(
            "{:<16} {:>6} {:>5} {:>11} {:>10.3} {:>10}",
            mc.variant.kind.name(),
            mc.variant.layers,
            mc.variant.gtb_count(),
            params,
            flops as f64 / 1e9,
            fps.map_or("-".into(), |f| format!("{f:.1}"))
        );
        rows.push(ReportRow {
            run_id: cfg.run.preset.clone(),
            variant: mc.variant.kind.name().into(),
            layers: mc.variant.layers,
            params,
            flops,
            fps,
            mse: None,
            mae: None,
            rmse: None,
            ssim: None,
            psnr: None,
        });
    }
    let out = base.out_dir();
    std::fs::create_dir_all(&out)?;
    base.echo()?;
    emit_report(&rows, out.join("bench.csv"), ReportFormat::Csv)?;
    Ok(())
}

pub fn gradcheck(tol: f64, step: f64) -> anyhow::Result<()> {
    if !(tol > 0.0 && step > 0.0) {
        bail!(crate::config::Usage(
            "--tol and --step must be positive".into()
        ));
    }
    let entries = gradcheck_suite(tol, step)?;
    let mut failed = Vec::new();
    for e in &entries {
        let r = &e.report;
        println!(
            "{} {:<16} max_rel_err {:.3e}  elements {:>5}  tol {:.1e}",
            if r.passed { "PASS" } else { "FAIL" },
            e.name,
            r.max_rel_error,
            r.elements,
            r.tol
        );
        if !r.passed {
            failed.push(e.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", entries.len());
        Ok(())
    } else {
        Err(CheckFailed(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            entries.len(),
            failed.join(", ")
        ))
        .into())
    }
}

/// Resolved config for commands that only print it.
pub fn show_config(ov: &Overlays) -> anyhow::Result<RunConfig> {
    ov.resolve("run", None)
}

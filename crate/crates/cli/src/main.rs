//! `predformer` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use predformer::model::VariantKind;
use predformer::suite::{DEFAULT_STEP, DEFAULT_TOL};
use toml::Value;

use config::{flag_table, usage, Overlays, Usage};

#[derive(Parser, Debug)]
#[command(
    name = "predformer",
    version,
    about = "Spatiotemporal video prediction with gated transformers"
)]
struct Cli {
    /// key=value config file with [run], [model], [train], [data], [eval] and [bench] sections.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<String>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Continue training from a checkpoint (default `<out>/checkpoint.pfck`).
    #[arg(long, global = true, num_args = 0..=1, value_name = "CHECKPOINT")]
    resume: Option<Option<PathBuf>>,
    /// Base settings: overfit, tiny, bench_analog, moving_mnist, human36m, taxibj, weatherbench.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate moving-shapes train/val sequences.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints and a loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Report parameters, FLOPs and throughput.
    Bench(BenchArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Print the effective config.
    Config,
}

#[derive(Args, Debug)]
struct ModelFlags {
    #[arg(long)]
    variant: Option<VariantKind>,
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    val_count: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Training sequences (.pfts).
    #[arg(long, value_name = "FILE")]
    data: Option<String>,
    /// Stop after this epoch; a later --resume continues the same schedule.
    #[arg(long, value_name = "EPOCH")]
    until_epoch: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<String>,
    /// Evaluation sequences (.pfts).
    #[arg(long, value_name = "FILE")]
    data: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Report file name inside the output directory (.csv or .jsonl).
    #[arg(long, value_name = "NAME")]
    report: Option<String>,
    /// Write each batch of predictions to `<out>/predictions/`.
    #[arg(long)]
    dump_predictions: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// One row per encoder variant.
    #[arg(long)]
    all_variants: bool,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    /// Skip throughput timing.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

fn model_flags(m: &ModelFlags) -> Vec<(&'static str, &'static str, Value)> {
    let mut v = Vec::new();
    if let Some(k) = m.variant {
        v.push(("model", "variant", Value::String(k.name().into())));
    }
    if let Some(l) = m.layers {
        v.push(("model", "layers", int(l)));
    }
    v
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("PREDFORMER_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        usage(format!(
            "PREDFORMER_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let mut pairs = Vec::new();
    if let Some(s) = cli.seed {
        pairs.push(("run", "seed", Value::Integer(s as i64)));
    }
    if let Some(o) = &cli.out {
        pairs.push(("run", "out", Value::String(o.clone())));
    }
    if let Some(p) = &cli.preset {
        pairs.push(("run", "preset", Value::String(p.clone())));
    }
    match &cli.command {
        Command::GenData(a) => {
            let opt = [
                ("count", a.count),
                ("val_count", a.val_count),
                ("objects", a.objects),
            ];
            pairs.extend(
                opt.into_iter()
                    .filter_map(|(k, v)| Some(("data", k, int(v?)))),
            );
        }
        Command::Train(a) => {
            pairs.extend(model_flags(&a.model));
            if let Some(e) = a.epochs {
                pairs.push(("train", "epochs", int(e)));
            }
            if let Some(b) = a.batch_size {
                pairs.push(("train", "batch_size", int(b)));
            }
            if let Some(lr) = a.lr {
                pairs.push(("train", "lr_max", Value::Float(lr)));
            }
            if let Some(d) = &a.data {
                pairs.push(("data", "train", Value::String(d.clone())));
            }
        }
        Command::Eval(a) => {
            if let Some(c) = &a.checkpoint {
                pairs.push(("eval", "checkpoint", Value::String(c.clone())));
            }
            if let Some(d) = &a.data {
                pairs.push(("eval", "data", Value::String(d.clone())));
            }
            if let Some(b) = a.batch_size {
                pairs.push(("eval", "batch_size", int(b)));
            }
            if let Some(r) = &a.report {
                pairs.push(("eval", "report", Value::String(r.clone())));
            }
            if a.dump_predictions {
                pairs.push(("eval", "dump_predictions", Value::Boolean(true)));
            }
        }
        Command::Bench(a) => {
            pairs.extend(model_flags(&a.model));
            let opt = [("batch", a.batch), ("warmup", a.warmup), ("iters", a.iters)];
            pairs.extend(
                opt.into_iter()
                    .filter_map(|(k, v)| Some(("bench", k, int(v?)))),
            );
            if a.no_timing {
                pairs.push(("bench", "timing", Value::Boolean(false)));
            }
        }
        Command::Gradcheck(_) | Command::Config => {}
    }
    if cli.resume.is_some() && !matches!(cli.command, Command::Train(_)) {
        return Err(usage("--resume only applies to `train`"));
    }
    let ov = Overlays::load(cli.config.as_deref(), flag_table(pairs))?;
    match cli.command {
        Command::GenData(_) => commands::gen_data(&ov, cli.force),
        Command::Train(a) => commands::train(
            &ov,
            &commands::TrainOpts {
                resume: cli.resume,
                until_epoch: a.until_epoch,
                force: cli.force,
            },
        ),
        Command::Eval(_) => commands::eval(&ov, &commands::EvalOpts { force: cli.force }),
        Command::Bench(a) => commands::bench(
            &ov,
            &commands::BenchOpts {
                all_variants: a.all_variants,
            },
        ),
        Command::Gradcheck(a) => commands::gradcheck(a.tol, a.step),
        Command::Config => {
            print!("{}", commands::show_config(&ov)?.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

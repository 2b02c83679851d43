//! Trains three encoder variants on the same synthetic moving-shapes data and
//! prints validation metrics. Output is exploratory only.
//!
//! `cargo run --release -p predformer --example compare_variants -- [epochs] [seed]`

use predformer::data::{gen_moving_shapes, split_context_target, SequenceBatch, ShapeSpec};
use predformer::metrics::evaluate;
use predformer::model::{count_params, estimate_flops, ModelConfig, VariantKind};
use predformer::train::{TrainConfig, Trainer};

fn main() -> predformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(60);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let spec = ShapeSpec {
        seed,
        ..ShapeSpec::default()
    };
    let train = SequenceBatch::new(gen_moving_shapes(&spec, 32, 20)?, 10, 10)?;
    let val_spec = ShapeSpec {
        seed: seed.wrapping_add(1),
        ..spec
    };
    let val = SequenceBatch::new(gen_moving_shapes(&val_spec, 8, 20)?, 10, 10)?;
    let (context, target) = split_context_target(&val)?;

    println!(
        "{:<15} {:>6} {:>9} {:>8} {:>11} {:>11} {:>7} {:>7}",
        "variant", "blocks", "params", "gflops", "val mse", "val mae", "ssim", "secs"
    );
    for (kind, layers) in [
        (VariantKind::FullAttention, 4),
        (VariantKind::FacTS, 4),
        (VariantKind::QuadTSST, 1),
    ] {
        let mut cfg = ModelConfig::overfit(kind, layers);
        cfg.dim = 64;
        cfg.heads = 4;
        cfg.hidden = 128;
        let tc = TrainConfig {
            epochs,
            batch_size: 8,
            lr_max: 2e-3,
            seed,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&cfg, &tc, train.len())?;
        let mut secs = 0.0;
        for _ in 0..epochs {
            secs += trainer.train_epoch(&train)?.seconds;
        }
        let pred = trainer.predict(&context)?;
        let (m, ssim, _) = evaluate(&pred, &target)?;
        println!(
            "{:<15} {:>6} {:>9} {:>8.3} {:>11.4e} {:>11.4e} {:>7.3} {:>7.1}",
            kind.name(),
            cfg.variant.gtb_count(),
            count_params(&cfg),
            estimate_flops(&cfg) as f64 / 1e9,
            m.mse,
            m.mae,
            ssim,
            secs
        );
    }
    Ok(())
}

//! Pixel and structural metrics, throughput measurement and report files.

mod bench;
mod report;
mod ssim;

pub use bench::{fps_bench, fps_from, BenchResult};
pub use report::{
    config_fingerprint, emit_report, parse_report, MetricsReport, ReportFormat, ReportRow,
    CSV_COLUMNS,
};
pub use ssim::{gaussian_taps, ssim_frame, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// PSNR reported for a perfect prediction.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
}

/// Mean squared, mean absolute and root mean squared error over all elements,
/// accumulated in f64.
pub fn pixel_metrics<F: Element>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<PixelMetrics> {
    pred.expect_same_shape(target, "pixel_metrics")?;
    let (mut se, mut ae) = (0.0f64, 0.0f64);
    for (p, t) in pred.data().iter().zip(target.data()) {
        let d = p.to_f64().unwrap_or(f64::NAN) - t.to_f64().unwrap_or(f64::NAN);
        se += d * d;
        ae += d.abs();
    }
    let n = pred.numel() as f64;
    let mse = se / n;
    Ok(PixelMetrics {
        mse,
        mae: ae / n,
        rmse: mse.sqrt(),
    })
}

/// `10 log10(1 / mse)` for unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr<F: Element>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<f64> {
    Ok(psnr_from_mse(pixel_metrics(pred, target)?.mse))
}

/// Mean SSIM over every `[H, W]` plane of `[..., C, H, W]` tensors, i.e. the
/// per-channel average of each frame, averaged over frames.
pub fn ssim<F: Element>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<f64> {
    pred.expect_same_shape(target, "ssim")?;
    let s = pred.shape();
    if s.len() < 2 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "SSIM needs at least [H, W]".into(),
        });
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let to64 = |v: &[F]| {
        v.iter()
            .map(|x| x.to_f64().unwrap_or(f64::NAN))
            .collect::<Vec<f64>>()
    };
    let mut total = 0.0;
    let mut planes = 0;
    for (a, b) in pred.data().chunks(h * w).zip(target.data().chunks(h * w)) {
        total += ssim_frame(&to64(a), &to64(b), h, w)?;
        planes += 1;
    }
    Ok(total / planes as f64)
}

/// Metrics of one future frame index, aggregated over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
}

/// Overall and per-frame metrics of predictions `[B, T', C, H, W]`.
pub fn evaluate<F: Element>(
    pred: &Tensor<F>,
    target: &Tensor<F>,
) -> Result<(PixelMetrics, f64, Vec<FrameMetrics>)> {
    pred.expect_same_shape(target, "evaluate")?;
    let s = pred.shape();
    if s.len() != 5 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected [B, T, C, H, W]".into(),
        });
    }
    let overall = pixel_metrics(pred, target)?;
    let overall_ssim = ssim(pred, target)?;
    let mut frames = Vec::with_capacity(s[1]);
    for t in 0..s[1] {
        let pick = |x: &Tensor<F>| -> Result<Tensor<F>> {
            let per = x.numel() / (s[0] * s[1]);
            let mut data = Vec::with_capacity(s[0] * per);
            for b in 0..s[0] {
                let start = (b * s[1] + t) * per;
                data.extend_from_slice(&x.data()[start..start + per]);
            }
            Tensor::new(&[s[0], s[2], s[3], s[4]], data)
        };
        let (p, g) = (pick(pred)?, pick(target)?);
        let m = pixel_metrics(&p, &g)?;
        frames.push(FrameMetrics {
            frame: t,
            mse: m.mse,
            mae: m.mae,
            ssim: ssim(&p, &g)?,
            psnr: psnr_from_mse(m.mse),
        });
    }
    Ok((overall, overall_ssim, frames))
}

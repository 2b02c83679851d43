use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    OneCycle,
    Cosine,
}

pub const ONECYCLE_PCT_START: f64 = 0.3;
pub const ONECYCLE_DIV: f64 = 25.0;
pub const ONECYCLE_FINAL_DIV: f64 = 1e4;

/// Cosine interpolation from `start` (at `pct = 0`) to `end` (at `pct = 1`).
fn cos_anneal(start: f64, end: f64, pct: f64) -> f64 {
    if pct == 0.0 {
        return start;
    }
    if pct == 1.0 {
        return end;
    }
    end + (start - end) / 2.0 * (1.0 + (PI * pct).cos())
}

/// Step at which the one-cycle schedule peaks.
pub fn onecycle_peak(total_steps: usize) -> usize {
    ((ONECYCLE_PCT_START * total_steps as f64).floor() as usize).min(total_steps.saturating_sub(1))
}

/// One-cycle learning rate: cosine warmup from `lr_max / 25` to `lr_max` at
/// the peak step, then cosine decay to `lr_max / 25 / 1e4` at the last step.
pub fn onecycle_lr(step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let initial = lr_max / ONECYCLE_DIV;
    let min = initial / ONECYCLE_FINAL_DIV;
    let peak = onecycle_peak(total_steps);
    let last = total_steps - 1;
    Ok(if step <= peak {
        if peak == 0 {
            lr_max
        } else {
            cos_anneal(initial, lr_max, step as f64 / peak as f64)
        }
    } else {
        cos_anneal(lr_max, min, (step - peak) as f64 / (last - peak) as f64)
    })
}

/// `lr_min + (lr_base - lr_min) (1 + cos(pi step / total)) / 2`, defined for
/// `0 <= step <= total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_base: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    Ok(cos_anneal(
        lr_base,
        lr_min,
        step as f64 / total_steps as f64,
    ))
}

//! Posterior quantile bounds over a density-ratio class: every prior or
//! likelihood within a multiplicative factor `c` of the assumed one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DrawSet;
use crate::uq::{order_stats, Interval, IntervalKind};

/// Probability levels at which the nominal posterior must be read so that
/// the bounds hold over the whole class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustLevels {
    pub lower_level: f64,
    pub upper_level: f64,
    pub c: f64,
    pub alpha: f64,
}

fn check(level: f64, c: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level {level} must lie in (0, 1)")));
    }
    if !(c >= 1.0 && c.is_finite()) {
        return Err(Error::InvalidInput(format!("c = {c} must be at least 1")));
    }
    Ok(())
}

/// For a single quantile level `a`: the smallest and largest levels of the
/// nominal posterior that the class can move the `a`-quantile to,
/// `a / (a + (1 - a) c^2)` and `a c^2 / (1 - a + a c^2)`.
pub fn robust_quantile_levels(a: f64, c: f64) -> Result<(f64, f64)> {
    check(a, c)?;
    let c2 = c * c;
    Ok((a / (a + (1.0 - a) * c2), a * c2 / (1.0 - a + a * c2)))
}

/// Levels for the two-sided `1 - alpha` interval: the infimum at `alpha/2`
/// and the supremum at `1 - alpha/2`.
pub fn robust_interval_levels(alpha: f64, c: f64) -> Result<RobustLevels> {
    check(alpha, c)?;
    let (lower_level, _) = robust_quantile_levels(alpha / 2.0, c)?;
    let (_, upper_level) = robust_quantile_levels(1.0 - alpha / 2.0, c)?;
    Ok(RobustLevels {
        lower_level,
        upper_level,
        c,
        alpha,
    })
}

/// Robust interval on draws that may be missing some of `total` draws.
/// Indices round outward, so the result always contains the nominal C1.
pub fn robust_interval_from(values: &[f64], total: usize, alpha: f64, c: f64) -> Result<Interval> {
    let levels = robust_interval_levels(alpha, c)?;
    let kq = levels.lower_level * total as f64;
    if kq < 1.0 - 1e-9 {
        return Err(Error::TooFewDraws {
            draws: total,
            level: levels.lower_level,
        });
    }
    let k_lo = ((kq + 1e-9).floor() as usize).max(1);
    let k_hi = ((levels.upper_level * total as f64 - 1e-9).ceil() as usize).min(total);
    let (lo, hi) = order_stats(values, total, k_lo, k_hi)?;
    Ok(Interval {
        lo,
        hi,
        alpha,
        kind: IntervalKind::Robust { c },
        draws_used: values.len(),
        draws_failed: total - values.len(),
        conservative: values.len() < total,
    })
}

/// One robust interval per outcome of a draw set.
pub fn robust_interval(draws: &DrawSet, alpha: f64, c: f64) -> Result<Vec<Interval>> {
    draws
        .draws
        .iter()
        .map(|v| robust_interval_from(v, draws.b, alpha, c))
        .collect()
}

//! How often do posterior draws reverse the ranking of two outcomes?

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReversal {
    pub first: String,
    pub second: String,
    /// Share of draws ordering the pair against the reference order; `None`
    /// when the reference itself is a tie.
    pub reversal: Option<f64>,
    pub first_below: f64,
    pub first_above: f64,
    pub ties: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// Pairwise reversal frequencies over jointly drawn outcomes. The reference
/// order comes from `reference` (e.g. point estimates) or the draw medians.
pub fn rank_reversals(labels: &[String], draws: &[Vec<f64>], reference: Option<&[f64]>) -> Result<Vec<PairReversal>> {
    if labels.len() != draws.len() {
        return Err(Error::LengthMismatch(format!("{} labels for {} outcomes", labels.len(), draws.len())));
    }
    if draws.len() < 2 {
        return Err(Error::InvalidInput("need at least two outcomes".into()));
    }
    let b = draws[0].len();
    if b == 0 {
        return Err(Error::InvalidInput("no draws".into()));
    }
    if let Some(k) = draws.iter().position(|d| d.len() != b) {
        return Err(Error::LengthMismatch(format!("outcome {} has {} draws, expected {b}", labels[k], draws[k].len())));
    }
    let reference: Vec<f64> = match reference {
        Some(r) if r.len() != draws.len() => {
            return Err(Error::LengthMismatch("reference needs one value per outcome".into()));
        }
        Some(r) => r.to_vec(),
        None => draws.iter().map(|d| median(d)).collect(),
    };
    let mut out = Vec::new();
    for a in 0..draws.len() {
        for c in (a + 1)..draws.len() {
            let (mut below, mut above, mut ties) = (0usize, 0usize, 0usize);
            for (x, y) in draws[a].iter().zip(&draws[c]) {
                match x.total_cmp(y) {
                    std::cmp::Ordering::Less => below += 1,
                    std::cmp::Ordering::Greater => above += 1,
                    std::cmp::Ordering::Equal => ties += 1,
                }
            }
            let bf = b as f64;
            let reversal = match reference[a].total_cmp(&reference[c]) {
                std::cmp::Ordering::Less => Some(above as f64 / bf),
                std::cmp::Ordering::Greater => Some(below as f64 / bf),
                std::cmp::Ordering::Equal => None,
            };
            out.push(PairReversal {
                first: labels[a].clone(),
                second: labels[c].clone(),
                reversal,
                first_below: below as f64 / bf,
                first_above: above as f64 / bf,
                ties: ties as f64 / bf,
            });
        }
    }
    Ok(out)
}

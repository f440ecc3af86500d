//! Does shrinking noisy log flows toward a gravity prior bias the implied
//! elasticity? Simulates the simple design `log tau = rho log dist`,
//! `log F ~ N(-eps log tau, s^2)`, `log F~ ~ N(log F, sigma^2)` on a line of
//! `n` locations with `dist_ij = |i - j|`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uq::{draw_rng, map_indexed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttenuationSimConfig {
    pub m: usize,
    pub b: usize,
    pub n: usize,
    pub rho: f64,
    pub epsilon: f64,
    /// Prior standard deviation.
    pub s: f64,
    /// Measurement-error standard deviation.
    pub varsigma: f64,
    pub seed: u64,
    /// Shrink toward zero instead of the fitted gravity prior.
    pub constant_prior: bool,
    pub workers: usize,
}

impl Default for AttenuationSimConfig {
    fn default() -> Self {
        Self {
            m: 100_000,
            b: 1000,
            n: 50,
            rho: 0.5,
            epsilon: 5.0,
            s: 0.1,
            varsigma: 0.1,
            seed: 0,
            constant_prior: false,
            workers: 1,
        }
    }
}

impl AttenuationSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.b == 0 {
            return Err(Error::InvalidInput("M and B must be positive".into()));
        }
        if self.n < 3 {
            return Err(Error::InvalidInput("need at least three locations for distance variation".into()));
        }
        if !(self.rho.is_finite() && self.rho != 0.0) {
            return Err(Error::InvalidInput("rho must be a non-zero number".into()));
        }
        if !self.epsilon.is_finite() || !(self.s > 0.0) || !(self.varsigma >= 0.0) {
            return Err(Error::InvalidInput("need finite eps, s > 0 and sigma >= 0".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidInput("need at least one worker".into()));
        }
        Ok(())
    }
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    sxy / sxx
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn one_rep(cfg: &AttenuationSimConfig, log_dist: &[f64], log_tau: &[f64], rep: usize) -> f64 {
    let mut rng = draw_rng(cfg.seed, rep, 0);
    let (s2, v2) = (cfg.s * cfg.s, cfg.varsigma * cfg.varsigma);
    let log_obs: Vec<f64> = log_tau
        .iter()
        .map(|lt| {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            -cfg.epsilon * lt + cfg.s * z1 + cfg.varsigma * z2
        })
        .collect();
    let beta = if cfg.constant_prior { 0.0 } else { slope(log_dist, &log_obs) };
    let w = s2 / (s2 + v2);
    let sd = if v2 == 0.0 { 0.0 } else { (1.0 / (1.0 / s2 + 1.0 / v2)).sqrt() };
    let mean: Vec<f64> = log_obs
        .iter()
        .zip(log_dist)
        .map(|(y, d)| w * y + (1.0 - w) * beta * d)
        .collect();
    let mut draw = vec![0.0; mean.len()];
    let mut bias: Vec<f64> = (0..cfg.b)
        .map(|_| {
            for (d, m) in draw.iter_mut().zip(&mean) {
                let z: f64 = rng.sample(StandardNormal);
                *d = m + sd * z;
            }
            -slope(log_tau, &draw) - cfg.epsilon
        })
        .collect();
    median(&mut bias)
}

/// Median posterior bias of the implied elasticity, one per outer rep.
pub fn run_attenuation_sim(cfg: &AttenuationSimConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (mut log_dist, mut log_tau) = (Vec::new(), Vec::new());
    for j in 0..cfg.n {
        for i in 0..cfg.n {
            if i != j {
                let d = (i as f64 - j as f64).abs().ln();
                log_dist.push(d);
                log_tau.push(cfg.rho * d);
            }
        }
    }
    Ok(map_indexed(cfg.m, cfg.workers, |r| one_rep(cfg, &log_dist, &log_tau, r)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> AttenuationSimConfig {
        AttenuationSimConfig {
            m: 40,
            b: 50,
            n: 15,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_worker_free() {
        let a = run_attenuation_sim(&small()).unwrap();
        let b = run_attenuation_sim(&AttenuationSimConfig { workers: 3, ..small() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
    }

    #[test]
    fn no_noise_is_ols_on_true_flows() {
        let cfg = AttenuationSimConfig { varsigma: 0.0, ..small() };
        let bias = run_attenuation_sim(&cfg).unwrap();
        // with no noise every posterior draw is the true flow matrix
        let mean = bias.iter().sum::<f64>() / bias.len() as f64;
        assert!(mean.abs() < 0.1);
        assert!(bias.iter().all(|b| b.is_finite()));
    }

    #[test]
    fn constant_prior_attenuates() {
        let cfg = AttenuationSimConfig { constant_prior: true, ..small() };
        let bias = run_attenuation_sim(&cfg).unwrap();
        let mean = bias.iter().sum::<f64>() / bias.len() as f64;
        // posterior slope on log tau is -w eps with w = 1/2
        assert!((mean + 2.5).abs() < 0.3, "{mean}");
    }

    #[test]
    fn rejects_bad_config() {
        assert!(run_attenuation_sim(&AttenuationSimConfig { n: 2, ..small() }).is_err());
        assert!(run_attenuation_sim(&AttenuationSimConfig { rho: 0.0, ..small() }).is_err());
        assert!(run_attenuation_sim(&AttenuationSimConfig { rho: -0.5, ..small() }).is_ok());
    }
}

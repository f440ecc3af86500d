//! Synthetic gravity worlds with known parameters, for testing and demos.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::eb::MirrorPanel;
use crate::error::Result;
use crate::model::{DistanceMatrix, FlowMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub n: usize,
    pub epsilon: f64,
    /// Loading of log costs on log distance.
    pub rho: f64,
    /// Standard deviation of the idiosyncratic part of log costs.
    pub cost_noise: f64,
    /// Standard deviation of true log flows around the gravity mean.
    pub s: f64,
    /// Measurement-error variance of reported log flows.
    pub sigma2: f64,
    /// Own flow as a multiple of the location's off-diagonal total.
    pub own_multiple: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n: 10,
            epsilon: 5.0,
            rho: 0.5,
            cost_noise: 0.1,
            s: 0.3,
            sigma2: 0.05,
            own_multiple: 3.0,
            seed: 0,
        }
    }
}

/// A world with true and reported flows.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub distances: DistanceMatrix,
    pub log_costs: DMatrix<f64>,
    pub true_flows: FlowMatrix,
    /// Off-diagonal flows with log-normal reporting noise; own flows exact.
    pub observed: FlowMatrix,
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("C{i:02}")).collect()
}

/// Locations on the unit square, `log F = a_i + c_j - eps log tau + s z`.
pub fn gravity_world(cfg: &WorldConfig) -> Result<World> {
    let n = cfg.n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pos: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
    let dist = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            let (dx, dy) = (pos[i].0 - pos[j].0, pos[i].1 - pos[j].1);
            1.0 + 10.0 * (dx * dx + dy * dy).sqrt()
        }
    });
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let orig: Vec<f64> = (0..n).map(|_| 0.5 * normal()).collect();
    let dest: Vec<f64> = (0..n).map(|_| 0.5 * normal()).collect();
    let mut log_costs = DMatrix::zeros(n, n);
    let mut true_f = DMatrix::zeros(n, n);
    let mut obs = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            if i == j {
                continue;
            }
            let lt = cfg.rho * dist[(i, j)].ln() + cfg.cost_noise * normal();
            log_costs[(i, j)] = lt;
            let lf = orig[i] + dest[j] - cfg.epsilon * lt + cfg.s * normal();
            true_f[(i, j)] = lf.exp();
            obs[(i, j)] = (lf + cfg.sigma2.sqrt() * normal()).exp();
        }
    }
    for i in 0..n {
        let own = cfg.own_multiple * true_f.row(i).sum();
        true_f[(i, i)] = own;
        obs[(i, i)] = own;
    }
    let l = labels(n);
    Ok(World {
        distances: DistanceMatrix::new(l.clone(), dist)?,
        log_costs,
        true_flows: FlowMatrix::new(l.clone(), true_f)?,
        observed: FlowMatrix::new(l, obs)?,
    })
}

/// Mirror panel drawn from the spike-and-slab model with constant `p`, `b`
/// and noise variance, true flows from the world's gravity mean.
pub fn mirror_panel(world: &World, years: usize, p: f64, b: f64, s: f64, sigma2: f64, seed: u64) -> MirrorPanel {
    let n = world.true_flows.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = world.true_flows.values().map(|v| v.ln());
    let mut report1 = Vec::with_capacity(years);
    let mut report2 = Vec::with_capacity(years);
    for _ in 0..years {
        let mut r1 = DMatrix::zeros(n, n);
        let mut r2 = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                if i == j || rng.random::<f64>() < p {
                    continue;
                }
                let z: f64 = rng.sample(StandardNormal);
                let lf = base[(i, j)] + s * z;
                for r in [&mut r1, &mut r2] {
                    let zero = rng.random::<f64>() < b;
                    let e: f64 = rng.sample(StandardNormal);
                    r[(i, j)] = if zero { 0.0 } else { (lf + sigma2.sqrt() * e).exp() };
                }
            }
        }
        report1.push(r1);
        report2.push(r2);
    }
    MirrorPanel {
        labels: world.true_flows.labels().to_vec(),
        years: (0..years as i64).map(|t| 2000 + t).collect(),
        report1,
        report2,
    }
}

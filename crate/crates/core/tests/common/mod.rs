//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Posterior mean and variance of `log F` given `log F~ = log f_obs` under
/// `log F ~ N(mu, s2)` and `log F~ | log F ~ N(log F, sigma2)`, by the
/// midpoint rule on `points` nodes over +-12 prior standard deviations.
pub fn posterior_quadrature(f_obs: f64, mu: f64, s2: f64, sigma2: f64, points: usize) -> (f64, f64) {
    let y = f_obs.ln();
    let sd = s2.sqrt();
    let (lo, hi) = (mu.min(y) - 12.0 * sd, mu.max(y) + 12.0 * sd);
    let h = (hi - lo) / points as f64;
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for k in 0..points {
        let x = lo + (k as f64 + 0.5) * h;
        let w = (-(x - mu).powi(2) / (2.0 * s2) - (y - x).powi(2) / (2.0 * sigma2)).exp();
        z += w;
        m1 += w * x;
        m2 += w * x * x;
    }
    let mean = m1 / z;
    (mean, m2 / z - mean * mean)
}

/// Welfare changes from a Newton solve of the income system, with world
/// income fixed and the equations read up to a common factor.
pub fn armington_oracle(f: &DMatrix<f64>, tau: &DMatrix<f64>, eps: f64, tol: f64) -> Vec<f64> {
    let n = f.nrows();
    let y: Vec<f64> = (0..n).map(|i| f.row(i).sum()).collect();
    let e: Vec<f64> = (0..n).map(|j| f.column(j).sum()).collect();
    let lam = DMatrix::from_fn(n, n, |i, j| f[(i, j)] / e[j]);
    let shares = |yp: &[f64]| {
        DMatrix::from_fn(n, n, |i, j| {
            let num = (tau[(i, j)] * yp[i]).powf(-eps);
            let den: f64 = (0..n).map(|k| lam[(k, j)] * (tau[(k, j)] * yp[k]).powf(-eps)).sum();
            num / den
        })
    };
    let resid = |x: &DVector<f64>| -> DVector<f64> {
        let yp: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let lp = shares(&yp);
        let lhs: Vec<f64> = (0..n).map(|i| yp[i] * y[i]).collect();
        let rhs: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| lp[(i, j)] * lam[(i, j)] * e[j] * yp[j]).sum())
            .collect();
        let c = rhs.iter().sum::<f64>() / lhs.iter().sum::<f64>();
        let mut r = DVector::zeros(n);
        for i in 0..n - 1 {
            r[i] = (rhs[i] / (c * lhs[i])).ln();
        }
        r[n - 1] = lhs.iter().sum::<f64>() / y.iter().sum::<f64>() - 1.0;
        r
    };
    let mut x = DVector::zeros(n);
    for _ in 0..200 {
        let r = resid(&x);
        if r.amax() < tol {
            break;
        }
        let mut jac = DMatrix::zeros(n, n);
        for k in 0..n {
            let h = 1e-7;
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            jac.set_column(k, &((resid(&xp) - resid(&xm)) / (2.0 * h)));
        }
        let step = jac.lu().solve(&r).expect("nonsingular jacobian");
        x -= step;
    }
    let yp: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let lp = shares(&yp);
    (0..n).map(|i| lp[(i, i)].powf(-1.0 / eps)).collect()
}

/// OLS of `y` on `x` plus origin and destination dummies (destination 0
/// dropped), over the listed dyads, via the normal equations.
pub fn dense_fe_ols(n: usize, obs: &[(usize, usize, f64, f64)]) -> f64 {
    let k = 1 + n + (n - 1);
    let mut xtx = DMatrix::zeros(k, k);
    let mut xty = DVector::zeros(k);
    for &(i, j, x, y) in obs {
        let mut row = DVector::zeros(k);
        row[0] = x;
        row[1 + i] = 1.0;
        if j > 0 {
            row[n + j] = 1.0;
        }
        xtx += &row * row.transpose();
        xty += &row * y;
    }
    let sol = xtx.cholesky().expect("full rank design").solve(&xty);
    sol[0]
}

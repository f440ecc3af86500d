//! Weighted least squares on two-way (origin, destination) fixed effects.
//!
//! Observations live on an `n x n` dyad grid; a weight of zero excludes the
//! dyad. Origin effects are eliminated in closed form and the destination
//! effects solve an `(n-1) x (n-1)` Laplacian system, so a projection costs
//! `O(n^3)` regardless of how many dyads are included.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub(crate) struct FeProjector {
    weights: DMatrix<f64>,
    row_sum: Vec<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl FeProjector {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        let n = weights.nrows();
        if n < 2 {
            return Err(Error::InsufficientData(
                "two-way fixed effects need at least two locations".into(),
            ));
        }
        let row_sum: Vec<f64> = (0..n).map(|i| weights.row(i).sum()).collect();
        let col_sum: Vec<f64> = (0..n).map(|j| weights.column(j).sum()).collect();
        if let Some(i) = row_sum.iter().position(|r| *r <= 0.0) {
            return Err(Error::InsufficientData(format!("origin {i} has no observations")));
        }
        if let Some(j) = col_sum.iter().position(|c| *c <= 0.0) {
            return Err(Error::InsufficientData(format!(
                "destination {j} has no observations"
            )));
        }
        // M = diag(C) - W' diag(1/R) W, with destination 0 pinned to zero.
        let m = n - 1;
        let mut lap = DMatrix::zeros(m, m);
        for i in 0..n {
            let inv = 1.0 / row_sum[i];
            for a in 1..n {
                let wa = weights[(i, a)];
                if wa == 0.0 {
                    continue;
                }
                for b in 1..n {
                    lap[(a - 1, b - 1)] -= wa * weights[(i, b)] * inv;
                }
            }
        }
        for j in 1..n {
            lap[(j - 1, j - 1)] += col_sum[j];
        }
        let chol = if m == 0 {
            None
        } else {
            Some(Cholesky::new(lap).ok_or_else(|| {
                Error::InsufficientData("fixed effects are not connected".into())
            })?)
        };
        Ok(Self {
            weights,
            row_sum,
            chol,
        })
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn included(&self, i: usize, j: usize) -> bool {
        self.weights[(i, j)] > 0.0
    }

    /// Weighted LS fit of `v` on the two-way effects, normalized so that the
    /// first origin effect is zero. Entries of `v` on excluded dyads are ignored.
    pub fn fit(&self, v: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let w = &self.weights;
        let wv = |i: usize, j: usize| if w[(i, j)] > 0.0 { w[(i, j)] * v[(i, j)] } else { 0.0 };
        let row_wv: Vec<f64> = (0..n).map(|i| (0..n).map(|j| wv(i, j)).sum()).collect();
        let mut rhs = DVector::zeros(n - 1);
        for j in 1..n {
            let mut s = 0.0;
            for i in 0..n {
                if w[(i, j)] > 0.0 {
                    s += wv(i, j) - w[(i, j)] * row_wv[i] / self.row_sum[i];
                }
            }
            rhs[j - 1] = s;
        }
        let mut dest = vec![0.0; n];
        if let Some(chol) = &self.chol {
            let sol = chol.solve(&rhs);
            dest[1..].copy_from_slice(sol.as_slice());
        }
        let mut orig: Vec<f64> = (0..n)
            .map(|i| {
                let s: f64 = (0..n).map(|j| w[(i, j)] * dest[j]).sum();
                (row_wv[i] - s) / self.row_sum[i]
            })
            .collect();
        let shift = orig[0];
        for a in orig.iter_mut() {
            *a -= shift;
        }
        for c in dest.iter_mut() {
            *c += shift;
        }
        (orig, dest)
    }

    /// `v - fitted` on included dyads, zero elsewhere.
    pub fn residual(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let (a, c) = self.fit(v);
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| {
            if self.included(i, j) {
                v[(i, j)] - a[i] - c[j]
            } else {
                0.0
            }
        })
    }

    /// Diagonal of the weighted hat matrix of the two-way effects design,
    /// zero on excluded dyads. Invariant under rescaling the weights.
    pub fn leverage(&self) -> DMatrix<f64> {
        let n = self.n();
        let w = &self.weights;
        // (A'WA)^-1 by blocks: origins are diag(R), destinations solve the
        // Schur complement G = lap^-1, coupled through r_i = W[i, 1..] / R_i.
        let g = self.chol.as_ref().map(|c| c.inverse());
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            let r = DVector::from_fn(n - 1, |b, _| w[(i, b + 1)] / self.row_sum[i]);
            let (gr, rgr) = match &g {
                Some(g) => {
                    let gr = g * &r;
                    let rgr = r.dot(&gr);
                    (gr, rgr)
                }
                None => (DVector::zeros(0), 0.0),
            };
            for j in 0..n {
                if w[(i, j)] <= 0.0 {
                    continue;
                }
                let quad = match &g {
                    Some(g) if j > 0 => g[(j - 1, j - 1)] - 2.0 * gr[j - 1] + rgr,
                    _ => rgr,
                };
                out[(i, j)] = w[(i, j)] * (1.0 / self.row_sum[i] + quad);
            }
        }
        out
    }

    /// `sum w x y` over included dyads.
    pub fn dot(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        let n = self.n();
        let mut s = 0.0;
        for j in 0..n {
            for i in 0..n {
                let w = self.weights[(i, j)];
                if w > 0.0 {
                    s += w * x[(i, j)] * y[(i, j)];
                }
            }
        }
        s
    }
}

/// Result of regressing `y` on one covariate plus two-way effects.
pub(crate) struct FeRegression {
    pub slope: f64,
    pub orig: Vec<f64>,
    pub dest: Vec<f64>,
    /// Covariate after partialling out the effects (zero off-sample).
    pub x_resid: DMatrix<f64>,
    /// `y` after partialling out the effects.
    pub y_resid: DMatrix<f64>,
}

/// Frisch-Waugh: the slope comes from the effect-partialled variables, and
/// the effects are refit on `y - slope * x`.
pub(crate) fn regress(proj: &FeProjector, y: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<FeRegression> {
    let x_resid = proj.residual(x);
    let y_resid = proj.residual(y);
    let sxx = proj.dot(&x_resid, &x_resid);
    let n = proj.n();
    let mean_w: f64 = proj.weights().sum();
    let x_mean = proj.dot(x, &DMatrix::from_element(n, n, 1.0)) / mean_w;
    let centered = x.map(|v| v - x_mean);
    let total = proj.dot(&centered, &centered);
    // Spread must be material relative to the level of x, not just nonzero.
    let scale = proj.dot(x, x);
    if !(sxx > 1e-10 * total.max(f64::MIN_POSITIVE)) || !(total > 1e-12 * scale) {
        return Err(Error::Collinear);
    }
    let slope = proj.dot(&x_resid, &y_resid) / sxx;
    let rest = y - x * slope;
    let (orig, dest) = proj.fit(&rest);
    Ok(FeRegression {
        slope,
        orig,
        dest,
        x_resid,
        y_resid,
    })
}

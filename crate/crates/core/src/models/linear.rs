use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ModelError, TabularDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Whether diagonal jitter was needed to factor the Gram matrix.
    pub jittered: bool,
}

impl LinearModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

pub const GRAM_JITTER: f64 = 1e-8;

/// Least squares with intercept via the normal equations of the centred
/// problem. A near-singular Gram matrix gets `1e-8` (relative to its mean
/// diagonal) added to the diagonal.
pub fn train_ols(data: &TabularDataset) -> Result<LinearModel, ModelError> {
    let (n, p) = (data.len(), data.n_features());
    if n < p + 1 {
        return Err(ModelError::Underdetermined { samples: n, needed: p + 1 });
    }
    let x_mean: Vec<f64> = (0..p).map(|j| stable_mean((0..n).map(|i| data.row(i)[j]))).collect();
    let y_mean = stable_mean(data.y.iter().copied());
    let xc = DMatrix::from_fn(n, p, |i, j| data.row(i)[j] - x_mean[j]);
    let yc = DVector::from_iterator(n, data.y.iter().map(|y| y - y_mean));
    let gram = xc.transpose() * &xc;
    let rhs = xc.transpose() * yc;

    let max_diag = gram.diagonal().iter().fold(0.0f64, |m, v| m.max(*v));
    let well_posed = gram.clone().cholesky().filter(|c| {
        let l = c.l_dirty();
        (0..p).all(|k| l[(k, k)] * l[(k, k)] > 1e-12 * max_diag)
    });
    let (chol, jittered) = match well_posed {
        Some(c) => (c, false),
        None => {
            let mean_diag = (gram.trace() / p as f64).max(1.0);
            let mut g = gram;
            for k in 0..p {
                g[(k, k)] += GRAM_JITTER * mean_diag;
            }
            (g.cholesky().ok_or(ModelError::Numerical("Gram matrix not positive definite".into()))?, true)
        }
    };
    let w = chol.solve(&rhs);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Numerical("non-finite OLS weights".into()));
    }
    let intercept = y_mean - w.iter().zip(&x_mean).map(|(a, b)| a * b).sum::<f64>();
    Ok(LinearModel { weights: w.iter().copied().collect(), intercept, jittered })
}

/// Mean computed around the first value, exact for constant input.
pub(crate) fn stable_mean(mut it: impl Iterator<Item = f64>) -> f64 {
    let Some(first) = it.next() else { return 0.0 };
    let (mut s, mut n) = (0.0, 1usize);
    for v in it {
        s += v - first;
        n += 1;
    }
    first + s / n as f64
}

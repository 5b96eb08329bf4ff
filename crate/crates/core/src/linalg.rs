use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{MscError, Result};

/// Ridge added to a Gram matrix whose Cholesky pivots underflow.
pub const GRAM_RIDGE: f64 = 1e-8;

/// Solves the symmetric positive (semi)definite system `g x = b`.
///
/// A `ridge · I` jitter is added when the plain factorization fails or a
/// pivot falls below `1e-12` of the largest diagonal entry; the jitter grows
/// tenfold up to six times before giving up.
pub(crate) fn solve_spd(g: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    if g.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let scale = g.diagonal().iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    if !scale.is_finite() {
        return Err(MscError::numeric("non-finite Gram matrix"));
    }
    if let Some(chol) = Cholesky::new(g.clone()) {
        if well_conditioned(&chol, scale) {
            return Ok(chol.solve(b));
        }
    }
    let mut jitter = ridge.max(f64::MIN_POSITIVE);
    for _ in 0..7 {
        let mut gj = g.clone();
        for d in 0..gj.nrows() {
            gj[(d, d)] += jitter;
        }
        if let Some(chol) = Cholesky::new(gj) {
            let x = chol.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Ok(x);
            }
        }
        jitter *= 10.0;
    }
    Err(MscError::numeric("Gram matrix is not positive definite even after ridge jitter"))
}

fn well_conditioned(chol: &Cholesky<f64, nalgebra::Dyn>, scale: f64) -> bool {
    let l = chol.l_dirty();
    (0..l.nrows()).all(|d| {
        let p = l[(d, d)] * l[(d, d)];
        p.is_finite() && p > 1e-12 * scale
    })
}

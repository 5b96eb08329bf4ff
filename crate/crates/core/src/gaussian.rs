//! Gaussian densities and closed-form M-step updates for the simple and
//! spatially correlated models.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{MscError, Result};
use crate::linalg::{solve_spd, GRAM_RIDGE};
use crate::model::{Dataset, Dictionary, MixtureState, ResponsibilityMatrix, SupportMask};
use crate::spatial::PrecisionFactor;

/// Lower bound applied to every variance estimate.
pub const SIGMA2_FLOOR: f64 = 1e-12;

/// Noise precision `Ω = R⁻¹ / σ²`, held as `σ²` and a factor of `R`.
#[derive(Clone, Copy, Debug)]
pub struct Precision<'a> {
    pub sigma2: f64,
    pub corr: &'a PrecisionFactor,
}

impl<'a> Precision<'a> {
    pub fn new(sigma2: f64, corr: &'a PrecisionFactor) -> Self {
        Self { sigma2, corr }
    }
}

/// `log N(x | η, σ² R)` evaluated through the factorization of `R`.
pub fn log_density_gaussian(x: &DVector<f64>, eta: &DVector<f64>, precision: Precision<'_>) -> Result<f64> {
    let m = x.len();
    if eta.len() != m || precision.corr.dim() != m {
        return Err(MscError::invalid("dimension mismatch in Gaussian density"));
    }
    if !(precision.sigma2 > 0.0 && precision.sigma2.is_finite()) {
        return Err(MscError::numeric("covariance is not positive definite"));
    }
    let quad = precision.corr.quad_form(&(x - eta));
    Ok(log_density_from_quad(quad, precision.sigma2, precision.corr.log_det(), m))
}

/// Density from the unscaled quadratic form `rᵀ R⁻¹ r` and `log|R|`.
pub(crate) fn log_density_from_quad(quad: f64, sigma2: f64, log_det_r: f64, m: usize) -> f64 {
    let mf = m as f64;
    -0.5 * (quad / sigma2 + mf * (2.0 * PI).ln() + mf * sigma2.ln() + log_det_r)
}

/// `σ² = (1/m) Σ_j w_j ‖x - η_j‖²`, floored.
pub fn update_sigma2_simple(x: &DVector<f64>, etas: &[DVector<f64>], w: &[f64]) -> Result<f64> {
    let quads: Vec<f64> = etas.iter().map(|eta| (x - eta).norm_squared()).collect();
    sigma2_from_quads(&quads, w, x.len(), SIGMA2_FLOOR)
}

/// `σ² = (1/m) Σ_j w_j r_jᵀ R⁻¹ r_j`, floored.
pub fn update_sigma2_spatial(
    x: &DVector<f64>,
    etas: &[DVector<f64>],
    w: &[f64],
    corr: &PrecisionFactor,
) -> Result<f64> {
    let quads: Vec<f64> = etas.iter().map(|eta| corr.quad_form(&(x - eta))).collect();
    sigma2_from_quads(&quads, w, x.len(), SIGMA2_FLOOR)
}

pub(crate) fn sigma2_from_quads(quads: &[f64], w: &[f64], m: usize, floor: f64) -> Result<f64> {
    if quads.len() != w.len() {
        return Err(MscError::invalid("one weight per component mean is required"));
    }
    if w.iter().any(|&v| !(0.0..=1.0 + 1e-12).contains(&v)) {
        return Err(MscError::invalid("responsibilities must lie in [0, 1]"));
    }
    let total: f64 = w.iter().sum();
    if total > 1.0 + 1e-8 {
        return Err(MscError::invalid("responsibilities sum to more than one"));
    }
    if total == 0.0 {
        return Err(MscError::DegenerateSignal {
            index: 0,
            reason: "all responsibilities are zero".into(),
        });
    }
    let s: f64 = quads.iter().zip(w).filter(|(_, &wj)| wj > 0.0).map(|(q, wj)| wj * q).sum();
    Ok((s / m as f64).max(floor))
}

/// Weighted least squares coefficients of `x` on the atoms selected by
/// `mask`, returned as a length-`K` vector with zeros off-support.
pub fn update_alpha_wls(
    x: &DVector<f64>,
    dictionary: &Dictionary,
    mask: &SupportMask,
    precision: Precision<'_>,
) -> Result<DVector<f64>> {
    if mask.popcount() > x.len() {
        return Err(MscError::invalid(format!(
            "support of {} atoms is wider than the signal dimension {}",
            mask.popcount(),
            x.len()
        )));
    }
    // σ² scales both sides of the normal equations and cancels.
    let xw = precision.corr.whiten(x);
    let dw = precision.corr.whiten_matrix(&dictionary.select(mask));
    let gram = dw.tr_mul(&dw);
    let rhs = dw.tr_mul(&xw);
    let coef = solve_spd(&gram, &rhs, GRAM_RIDGE)?;
    Ok(mask.embed(coef.as_slice()))
}

/// On-support WLS solution from a full `K × K` whitened Gram matrix and
/// the whitened cross products `Dᵀ Ω x`.
pub(crate) fn wls_from_gram(gram: &DMatrix<f64>, cross: &DVector<f64>, mask: &SupportMask, ridge: f64) -> Result<Vec<f64>> {
    let atoms = mask.atoms();
    let g = DMatrix::from_fn(atoms.len(), atoms.len(), |a, b| gram[(atoms[a], atoms[b])]);
    let rhs = DVector::from_fn(atoms.len(), |a, _| cross[atoms[a]]);
    Ok(solve_spd(&g, &rhs, ridge)?.as_slice().to_vec())
}

/// Per-signal whitened quantities reused across an EM iteration.
#[derive(Clone, Debug)]
pub(crate) struct WhitenedSignal {
    pub factor: Arc<PrecisionFactor>,
    pub x: DVector<f64>,
    pub dict: Arc<DMatrix<f64>>,
    pub gram: Arc<DMatrix<f64>>,
    pub cross: DVector<f64>,
}

impl WhitenedSignal {
    /// `‖L⁻¹(x - η)‖²` for on-support coefficients.
    pub fn quad(&self, mask: &SupportMask, coefs: &[f64]) -> f64 {
        let mut r = self.x.clone();
        for (&a, &c) in mask.atoms().iter().zip(coefs) {
            r.axpy(-c, &self.dict.column(a), 1.0);
        }
        r.norm_squared()
    }
}

/// Whitens every signal (and the dictionary) against its correlation factor.
pub(crate) fn whiten_dataset(
    data: &Dataset,
    dictionary: &Dictionary,
    factors: Option<&[Arc<PrecisionFactor>]>,
) -> Vec<WhitenedSignal> {
    match factors {
        None => {
            let identity = Arc::new(PrecisionFactor::identity(data.dim()));
            let dict = Arc::new(dictionary.atoms().clone());
            let gram = Arc::new(dict.tr_mul(&dict));
            (0..data.len())
                .into_par_iter()
                .map(|i| {
                    let x = data.signal(i).into_owned();
                    let cross = dict.tr_mul(&x);
                    WhitenedSignal { factor: identity.clone(), x, dict: dict.clone(), gram: gram.clone(), cross }
                })
                .collect()
        }
        Some(factors) => (0..data.len())
            .into_par_iter()
            .map(|i| {
                let factor = factors[i].clone();
                let x = factor.whiten(&data.signal(i).into_owned());
                let dict = factor.whiten_matrix(dictionary.atoms());
                let gram = dict.tr_mul(&dict);
                let cross = dict.tr_mul(&x);
                WhitenedSignal { factor, x, dict: Arc::new(dict), gram: Arc::new(gram), cross }
            })
            .collect(),
    }
}

/// Unnormalized minimizer of the expected loss over atom `k`, holding all
/// other atoms and every coefficient fixed.
///
/// Solves `(Σ_i s_i Ω_i) d = Σ_i Ω_i v_i` with `s_i = Σ_j w_ij c_ijk²` and
/// `v_i = Σ_j w_ij c_ijk (x_i - Σ_{l≠k} c_ijl d_l)`.
pub fn solve_dictionary_column(
    k: usize,
    data: &Dataset,
    state: &MixtureState,
    w: &ResponsibilityMatrix,
    precisions: &[Precision<'_>],
) -> Result<DVector<f64>> {
    if precisions.len() != data.len() {
        return Err(MscError::invalid("one precision per signal is required"));
    }
    let sigma2: Vec<f64> = precisions.iter().map(|p| p.sigma2).collect();
    if precisions.iter().all(|p| p.corr.is_identity()) {
        return column_target(k, data, state, w, &sigma2, None, GRAM_RIDGE);
    }
    let inverses: Vec<DMatrix<f64>> = precisions.par_iter().map(|p| p.corr.inverse()).collect();
    column_target(k, data, state, w, &sigma2, Some(&inverses), GRAM_RIDGE)
}

/// Simple-model column update with scalar weights
/// `ν_ijk = (w_ij c_ijk / σ_i²) / Σ (w_ij c_ijk² / σ_i²)`.
pub fn solve_dictionary_column_simple(
    k: usize,
    data: &Dataset,
    state: &MixtureState,
    w: &ResponsibilityMatrix,
    sigma2: &[f64],
) -> Result<DVector<f64>> {
    column_target(k, data, state, w, sigma2, None, GRAM_RIDGE)
}

pub(crate) fn column_target(
    k: usize,
    data: &Dataset,
    state: &MixtureState,
    w: &ResponsibilityMatrix,
    sigma2: &[f64],
    inverses: Option<&[DMatrix<f64>]>,
    ridge: f64,
) -> Result<DVector<f64>> {
    let m = data.dim();
    let contributions: Vec<(f64, DVector<f64>)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = data.signal(i);
            let mut s = 0.0;
            let mut v = DVector::zeros(m);
            for (j, mask) in state.supports.iter().enumerate() {
                let wij = w.get(i, j);
                let Some(pos) = mask.position(k) else { continue };
                let coefs = state.coefficients.get(i, j);
                let c = coefs[pos];
                if wij == 0.0 || c == 0.0 {
                    continue;
                }
                let mut r = x.into_owned();
                for (&a, &cl) in mask.atoms().iter().zip(coefs) {
                    if a != k {
                        r.axpy(-cl, &state.dictionary.atom(a), 1.0);
                    }
                }
                s += wij * c * c;
                v.axpy(wij * c, &r, 1.0);
            }
            (s, v)
        })
        .collect();

    match inverses {
        None => {
            let mut denom = 0.0;
            let mut num = DVector::zeros(m);
            for (i, (s, v)) in contributions.iter().enumerate() {
                denom += s / sigma2[i];
                num.axpy(1.0 / sigma2[i], v, 1.0);
            }
            if !(denom > 0.0) {
                return Err(MscError::AtomUnused(k));
            }
            Ok(num / denom)
        }
        Some(inv) => {
            let mut lhs = DMatrix::<f64>::zeros(m, m);
            let mut rhs = DVector::zeros(m);
            let mut used = false;
            for (i, (s, v)) in contributions.iter().enumerate() {
                if *s == 0.0 {
                    continue;
                }
                used = true;
                let c = s / sigma2[i];
                lhs.zip_apply(&inv[i], |a, b| *a += c * b);
                rhs.gemv(1.0 / sigma2[i], &inv[i], v, 1.0);
            }
            if !used {
                return Err(MscError::AtomUnused(k));
            }
            solve_spd(&lhs, &rhs, ridge)
        }
    }
}

/// Installs a new atom `k` normalized to unit length and multiplies every
/// coefficient on atom `k` by the removed scale, leaving each `η_ij` intact.
pub fn apply_dictionary_column(state: &mut MixtureState, k: usize, column: &DVector<f64>) -> Result<()> {
    let scale = state.dictionary.set_atom_normalized(k, column)?;
    let positions: Vec<Option<usize>> = state.supports.iter().map(|m| m.position(k)).collect();
    for row in state.coefficients.rows_mut() {
        for (coefs, pos) in row.iter_mut().zip(&positions) {
            if let Some(p) = pos {
                coefs[*p] *= scale;
            }
        }
    }
    Ok(())
}

/// Block-coordinate update of atom `k` followed by renormalization.
pub fn update_dictionary_column(
    k: usize,
    data: &Dataset,
    state: &mut MixtureState,
    w: &ResponsibilityMatrix,
    precisions: &[Precision<'_>],
) -> Result<()> {
    let column = solve_dictionary_column(k, data, state, w, precisions)?;
    apply_dictionary_column(state, k, &column)
}

/// Expected complete-data log-likelihood
/// `Σ_i Σ_j w_ij (log π_j + log N(x_i | η_ij, Σ_i))`; zero weights contribute nothing.
pub fn q_function_gaussian(
    data: &Dataset,
    state: &MixtureState,
    w: &ResponsibilityMatrix,
    precisions: &[Precision<'_>],
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..data.len() {
        let x = data.signal(i).into_owned();
        for j in 0..state.n_components() {
            let wij = w.get(i, j);
            if wij == 0.0 {
                continue;
            }
            let ld = log_density_gaussian(&x, &state.eta(i, j), precisions[i])?;
            total += wij * (state.weights[j].ln() + ld);
        }
    }
    Ok(total)
}

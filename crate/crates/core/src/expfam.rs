//! Poisson and binomial mixtures with canonical links: densities, IRLS
//! coefficient updates and gradient-ascent dictionary updates.

use nalgebra::{DMatrix, DVector, DVectorView};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::{ln_binomial, ln_factorial};

use crate::error::{MscError, Result};
use crate::linalg::{solve_spd, GRAM_RIDGE};
use crate::model::{Dataset, Dictionary, MixtureState, ResponsibilityMatrix, SupportMask};

/// Natural parameters are clamped to `[-ETA_CLAMP, ETA_CLAMP]`.
pub const ETA_CLAMP: f64 = 30.0;
/// Lower bound on IRLS weights.
pub const IRLS_WEIGHT_FLOOR: f64 = 1e-10;
/// Step used when the Barzilai-Borwein ratio is unusable.
pub const BB_FALLBACK_STEP: f64 = 1e-3;

/// An exponential family with unit dispersion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ExpFamilySpec {
    Poisson,
    Binomial { trials: u32 },
}

impl ExpFamilySpec {
    pub fn binomial(trials: u32) -> Result<Self> {
        if trials == 0 {
            return Err(MscError::invalid("binomial trials must be at least 1"));
        }
        Ok(ExpFamilySpec::Binomial { trials })
    }

    /// Number of trials for the binomial family, `None` for Poisson.
    pub fn trials(&self) -> Option<u32> {
        match *self {
            ExpFamilySpec::Poisson => None,
            ExpFamilySpec::Binomial { trials } => Some(trials),
        }
    }

    /// Mean `g(η)` at a clamped natural parameter.
    pub fn mean(&self, eta: f64) -> f64 {
        let e = clamp_eta(eta);
        match *self {
            ExpFamilySpec::Poisson => e.exp(),
            ExpFamilySpec::Binomial { trials } => trials as f64 * logistic(e),
        }
    }

    /// `∂g/∂η`, which equals the variance for a canonical link.
    pub fn variance(&self, eta: f64) -> f64 {
        let e = clamp_eta(eta);
        match *self {
            ExpFamilySpec::Poisson => e.exp(),
            ExpFamilySpec::Binomial { trials } => {
                let p = logistic(e);
                trials as f64 * p * (1.0 - p)
            }
        }
    }

    /// Cumulant `A(η)`.
    pub fn cumulant(&self, eta: f64) -> f64 {
        let e = clamp_eta(eta);
        match *self {
            ExpFamilySpec::Poisson => e.exp(),
            ExpFamilySpec::Binomial { trials } => trials as f64 * softplus(e),
        }
    }

    /// Checks that every entry is an admissible count.
    pub fn validate(&self, x: &[f64]) -> Result<()> {
        for &v in x {
            if !(v >= 0.0) || v.fract() != 0.0 || !v.is_finite() {
                return Err(MscError::invalid(format!("{v} is not a nonnegative integer count")));
            }
            if let ExpFamilySpec::Binomial { trials } = *self {
                if v > trials as f64 {
                    return Err(MscError::invalid(format!("count {v} exceeds {trials} trials")));
                }
            }
        }
        Ok(())
    }

    /// `Σ log h(x_ℓ)`; depends on the signal only.
    pub fn log_base_measure(&self, x: &[f64]) -> f64 {
        match *self {
            ExpFamilySpec::Poisson => x.iter().map(|&v| -ln_factorial(v as u64)).sum(),
            ExpFamilySpec::Binomial { trials } => {
                x.iter().map(|&v| ln_binomial(trials as u64, v as u64)).sum()
            }
        }
    }

    /// `Σ x_ℓ η_ℓ - A(η_ℓ)` with clamped `η`.
    pub(crate) fn natural_loglik(&self, x: DVectorView<'_, f64>, eta: &DVector<f64>) -> f64 {
        x.iter().zip(eta.iter()).map(|(&xv, &e)| xv * clamp_eta(e) - self.cumulant(e)).sum()
    }
}

fn clamp_eta(eta: f64) -> f64 {
    if eta.is_nan() {
        return eta;
    }
    eta.clamp(-ETA_CLAMP, ETA_CLAMP)
}

fn logistic(e: f64) -> f64 {
    if e >= 0.0 {
        1.0 / (1.0 + (-e).exp())
    } else {
        let z = e.exp();
        z / (1.0 + z)
    }
}

fn softplus(e: f64) -> f64 {
    e.max(0.0) + (-e.abs()).exp().ln_1p()
}

/// Componentwise `g(η)` with `η` clamped first.
pub fn inverse_link(family: ExpFamilySpec, eta: &DVector<f64>) -> DVector<f64> {
    eta.map(|e| family.mean(e))
}

/// `log h(x) + ηᵀx - Σ A(η)` for a count vector.
pub fn log_density_expfam(family: ExpFamilySpec, x: &DVector<f64>, eta: &DVector<f64>) -> Result<f64> {
    if x.len() != eta.len() {
        return Err(MscError::invalid("dimension mismatch in exponential-family density"));
    }
    family.validate(x.as_slice())?;
    Ok(family.log_base_measure(x.as_slice()) + family.natural_loglik(x.as_view(), eta))
}

/// One IRLS step for the coefficients of `x` on the atoms in `mask`,
/// linearized at `eta_t`. Returns a length-`K` vector.
pub fn irls_alpha_update(
    x: &DVector<f64>,
    dictionary: &Dictionary,
    mask: &SupportMask,
    eta_t: &DVector<f64>,
    family: ExpFamilySpec,
) -> Result<DVector<f64>> {
    if x.len() != eta_t.len() || x.len() != dictionary.dim() {
        return Err(MscError::invalid("dimension mismatch in IRLS update"));
    }
    if mask.popcount() > x.len() {
        return Err(MscError::invalid("support is wider than the signal dimension"));
    }
    let mu = inverse_link(family, eta_t);
    let var = eta_t.map(|e| family.variance(e));
    let coef = irls_from_moments(x, &dictionary.select(mask), eta_t, &mu, &var)?;
    Ok(mask.embed(&coef))
}

/// Weighted least squares of the working response `η + (x - μ)/v` on the
/// columns of `dj` with weights `v`.
pub(crate) fn irls_from_moments(
    x: &DVector<f64>,
    dj: &DMatrix<f64>,
    eta: &DVector<f64>,
    mu: &DVector<f64>,
    var: &DVector<f64>,
) -> Result<Vec<f64>> {
    if var.iter().all(|&v| !(v >= IRLS_WEIGHT_FLOOR)) {
        return Err(MscError::DegenerateSignal {
            index: 0,
            reason: "all IRLS weights vanish".into(),
        });
    }
    let m = x.len();
    let p = dj.ncols();
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for l in 0..m {
        let w = var[l].max(IRLS_WEIGHT_FLOOR);
        let z = eta[l].clamp(-ETA_CLAMP, ETA_CLAMP) + (x[l] - mu[l]) / w;
        for a in 0..p {
            let da = dj[(l, a)];
            rhs[a] += w * da * z;
            for b in a..p {
                gram[(a, b)] += w * da * dj[(l, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    Ok(solve_spd(&gram, &rhs, GRAM_RIDGE)?.as_slice().to_vec())
}

/// One IRLS step on the on-support coefficients, halved back towards the
/// current value until `Σ xη - A(η)` does not decrease. Returns the old
/// coefficients when no halving helps.
pub(crate) fn irls_step_safeguarded(
    family: ExpFamilySpec,
    x: DVectorView<'_, f64>,
    dictionary: &Dictionary,
    mask: &SupportMask,
    current: &[f64],
) -> Result<Vec<f64>> {
    let dj = dictionary.select(mask);
    let coef_t = DVector::from_column_slice(current);
    let eta_t = &dj * &coef_t;
    let xo = x.into_owned();
    let mu = inverse_link(family, &eta_t);
    let var = eta_t.map(|e| family.variance(e));
    let proposal = DVector::from_vec(irls_from_moments(&xo, &dj, &eta_t, &mu, &var)?);
    let base = family.natural_loglik(x, &eta_t);
    let mut step = proposal - &coef_t;
    for _ in 0..30 {
        let cand = &coef_t + &step;
        let value = family.natural_loglik(x, &(&dj * &cand));
        if value >= base && cand.iter().all(|v| v.is_finite()) {
            return Ok(cand.as_slice().to_vec());
        }
        step *= 0.5;
    }
    Ok(current.to_vec())
}

/// Score of the expected log-likelihood with respect to atom `k`:
/// `Σ_{i, j ∋ k} w_ij c_ijk (x_i - g(η_ij))`.
pub fn score_dictionary_column(
    k: usize,
    data: &Dataset,
    state: &MixtureState,
    w: &ResponsibilityMatrix,
    family: ExpFamilySpec,
) -> Result<DVector<f64>> {
    if !state.supports.iter().any(|m| m.contains(k)) {
        return Err(MscError::AtomUnused(k));
    }
    let m = data.dim();
    let parts: Vec<DVector<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = data.signal(i);
            let mut u = DVector::zeros(m);
            for (j, mask) in state.supports.iter().enumerate() {
                let wij = w.get(i, j);
                let Some(pos) = mask.position(k) else { continue };
                if wij == 0.0 {
                    continue;
                }
                let c = state.coefficients.get(i, j)[pos];
                let eta = state.eta(i, j);
                for l in 0..m {
                    u[l] += wij * c * (x[l] - family.mean(eta[l]));
                }
            }
            u
        })
        .collect();
    Ok(parts.into_iter().fold(DVector::zeros(m), |acc, u| acc + u))
}

/// `τ = Δdᵀ ΔU / ‖ΔU‖²`, or [`BB_FALLBACK_STEP`] when that ratio is
/// non-finite, non-positive or `‖ΔU‖² < 1e-20`.
pub fn bb_step_size(d_prev: &DVector<f64>, d_curr: &DVector<f64>, u_prev: &DVector<f64>, u_curr: &DVector<f64>) -> f64 {
    let dd = d_curr - d_prev;
    let du = u_curr - u_prev;
    let denom = du.norm_squared();
    if denom < 1e-20 {
        return BB_FALLBACK_STEP;
    }
    let tau = dd.dot(&du) / denom;
    if tau.is_finite() && tau > 0.0 {
        tau
    } else {
        BB_FALLBACK_STEP
    }
}

/// `d + τ U`.
pub fn ascent_step(d: &DVector<f64>, u: &DVector<f64>, tau: f64) -> DVector<f64> {
    d + u * tau
}

/// Previous column and score of one atom, for the Barzilai-Borwein step.
#[derive(Clone, Debug, Default)]
pub struct ColumnHistory {
    prev: Option<(DVector<f64>, DVector<f64>)>,
}

impl ColumnHistory {
    /// Step size for the current iterate. The ratio is formed on the
    /// gradient of the negated objective so that it is positive near a
    /// maximum.
    pub fn step(&self, d_curr: &DVector<f64>, u_curr: &DVector<f64>) -> f64 {
        match &self.prev {
            None => BB_FALLBACK_STEP,
            Some((d_prev, u_prev)) => bb_step_size(d_prev, d_curr, &-u_prev, &-u_curr),
        }
    }

    pub fn record(&mut self, d: DVector<f64>, u: DVector<f64>) {
        self.prev = Some((d, u));
    }

    pub fn clear(&mut self) {
        self.prev = None;
    }
}

/// Outcome of one gradient update of a dictionary column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColumnStep {
    pub tau: f64,
    pub halvings: u32,
    pub accepted: bool,
}

/// One gradient-ascent step on atom `k` with a Barzilai-Borwein step size,
/// followed by renormalization. The step is halved up to 20 times if the
/// expected log-likelihood restricted to components containing `k` drops,
/// and rejected (column kept) if it still does.
pub fn gradient_update_column(
    k: usize,
    data: &Dataset,
    state: &mut MixtureState,
    w: &ResponsibilityMatrix,
    family: ExpFamilySpec,
    history: &mut ColumnHistory,
) -> Result<ColumnStep> {
    let u = score_dictionary_column(k, data, state, w, family)?;
    let d = state.dictionary.atom(k).into_owned();
    let tau0 = history.step(&d, &u);
    history.record(d.clone(), u.clone());

    let terms = slice_terms(k, data, state, w);
    let base = slice_value(family, data, &terms, None);
    let mut tau = tau0;
    for halvings in 0..=20u32 {
        let cand = ascent_step(&d, &u, tau);
        let delta = &cand - &d;
        let value = slice_value(family, data, &terms, Some(&delta));
        if value >= base && value.is_finite() && cand.norm() > 0.0 {
            crate::gaussian::apply_dictionary_column(state, k, &cand)?;
            return Ok(ColumnStep { tau, halvings, accepted: true });
        }
        tau *= 0.5;
    }
    Ok(ColumnStep { tau: tau0, halvings: 20, accepted: false })
}

struct SliceTerm {
    i: usize,
    w: f64,
    c: f64,
    eta: DVector<f64>,
}

fn slice_terms(k: usize, data: &Dataset, state: &MixtureState, w: &ResponsibilityMatrix) -> Vec<SliceTerm> {
    let mut terms = Vec::new();
    for i in 0..data.len() {
        for (j, mask) in state.supports.iter().enumerate() {
            let wij = w.get(i, j);
            if wij == 0.0 {
                continue;
            }
            if let Some(pos) = mask.position(k) {
                terms.push(SliceTerm { i, w: wij, c: state.coefficients.get(i, j)[pos], eta: state.eta(i, j) });
            }
        }
    }
    terms
}

fn slice_value(family: ExpFamilySpec, data: &Dataset, terms: &[SliceTerm], delta: Option<&DVector<f64>>) -> f64 {
    let vals: Vec<f64> = terms
        .par_iter()
        .map(|t| {
            let x = data.signal(t.i);
            match delta {
                None => t.w * family.natural_loglik(x, &t.eta),
                Some(dd) => t.w * family.natural_loglik(x, &(&t.eta + dd * t.c)),
            }
        })
        .collect();
    vals.iter().sum()
}

/// Expected complete-data log-likelihood for an exponential-family mixture.
pub fn q_function_expfam(
    data: &Dataset,
    state: &MixtureState,
    w: &ResponsibilityMatrix,
    family: ExpFamilySpec,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..data.len() {
        let x = data.signal(i).into_owned();
        for j in 0..state.n_components() {
            let wij = w.get(i, j);
            if wij == 0.0 {
                continue;
            }
            total += wij * (state.weights[j].ln() + log_density_expfam(family, &x, &state.eta(i, j))?);
        }
    }
    Ok(total)
}

//! Spatial and temporal correlation kernels, their factorization, and the
//! per-signal update of the correlation parameter `ω`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MscError, Result};

/// Diagonal inflation applied before every correlation factorization.
pub const NUGGET: f64 = 1e-8;
/// Largest nugget tried before a factorization is declared failed.
pub const MAX_NUGGET: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    /// `exp(-ω Δ)`
    Exponential,
    /// `exp(-ω Δ²)`
    Gaussian,
    /// `ω^(-Δ)`, for time lags.
    Autoregressive,
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::Exponential => "exponential",
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Autoregressive => "autoregressive",
        })
    }
}

impl FromStr for KernelFamily {
    type Err = MscError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exp" | "exponential" => Ok(KernelFamily::Exponential),
            "gauss" | "gaussian" | "sqexp" => Ok(KernelFamily::Gaussian),
            "ar" | "autoregressive" | "autocorrelated" => Ok(KernelFamily::Autoregressive),
            other => Err(MscError::invalid(format!("unknown correlation kernel `{other}`"))),
        }
    }
}

/// A kernel family together with the admissible range of `ω`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationKernel {
    pub family: KernelFamily,
    pub omega_lo: f64,
    pub omega_hi: f64,
}

impl CorrelationKernel {
    /// Kernel with the default bounds for its family.
    pub fn new(family: KernelFamily) -> Self {
        let omega_lo = match family {
            KernelFamily::Autoregressive => 1.0 + 1e-6,
            _ => 1e-4,
        };
        Self { family, omega_lo, omega_hi: 1e3 }
    }

    pub fn with_bounds(family: KernelFamily, omega_lo: f64, omega_hi: f64) -> Result<Self> {
        let min_lo = if family == KernelFamily::Autoregressive { 1.0 } else { 0.0 };
        if !(omega_lo > min_lo && omega_hi.is_finite() && omega_hi > omega_lo) {
            return Err(MscError::invalid(format!(
                "invalid ω bounds [{omega_lo}, {omega_hi}] for the {family} kernel"
            )));
        }
        Ok(Self { family, omega_lo, omega_hi })
    }

    pub fn contains(&self, omega: f64) -> bool {
        omega >= self.omega_lo && omega <= self.omega_hi
    }

    pub fn clamp(&self, omega: f64) -> f64 {
        omega.clamp(self.omega_lo, self.omega_hi)
    }

    /// Starting value: effective range at the median distance for the
    /// exponential and Gaussian kernels, 2 for the autoregressive kernel.
    pub fn initial_omega(&self, dist: &DistanceMatrix) -> f64 {
        let med = dist.median_offdiagonal();
        let omega = match self.family {
            KernelFamily::Exponential => 3.0 / med,
            KernelFamily::Gaussian => 3.0 / (med * med),
            KernelFamily::Autoregressive => 2.0,
        };
        self.clamp(omega)
    }

    fn entry(&self, omega: f64, delta: f64) -> f64 {
        match self.family {
            KernelFamily::Exponential => (-omega * delta).exp(),
            KernelFamily::Gaussian => (-omega * delta * delta).exp(),
            KernelFamily::Autoregressive => (-delta * omega.ln()).exp(),
        }
    }
}

/// Symmetric matrix of pairwise Euclidean distances between locations.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix(DMatrix<f64>, Option<DistinctDistances>);

/// Distinct off-diagonal distances and, per entry, the index into them.
/// Kept only when there are few (grid locations), so kernel entries can be
/// evaluated once per distinct distance.
#[derive(Clone, Debug, PartialEq)]
struct DistinctDistances {
    values: Vec<f64>,
    index: Vec<u32>,
}

impl DistinctDistances {
    fn build(dist: &DMatrix<f64>) -> Option<Self> {
        let m = dist.nrows();
        let mut values: Vec<f64> = dist.iter().copied().collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        if values.len() * 4 > m * m {
            return None;
        }
        let index = dist
            .iter()
            .map(|d| values.binary_search_by(|v| v.total_cmp(d)).expect("value is present") as u32)
            .collect();
        Some(Self { values, index })
    }
}

impl DistanceMatrix {
    /// Distances between the rows of an `m × p` location matrix.
    pub fn from_locations(locations: &DMatrix<f64>) -> Self {
        let m = locations.nrows();
        let mut dist = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in (a + 1)..m {
                let d = (locations.row(a) - locations.row(b)).norm();
                dist[(a, b)] = d;
                dist[(b, a)] = d;
            }
        }
        let distinct = DistinctDistances::build(&dist);
        Self(dist, distinct)
    }

    pub fn from_matrix(dist: DMatrix<f64>) -> Result<Self> {
        if !dist.is_square() {
            return Err(MscError::invalid("distance matrix must be square"));
        }
        let m = dist.nrows();
        for a in 0..m {
            if dist[(a, a)] != 0.0 {
                return Err(MscError::invalid("distance matrix must have a zero diagonal"));
            }
            for b in 0..m {
                let v = dist[(a, b)];
                if !(v >= 0.0 && v.is_finite()) || v != dist[(b, a)] {
                    return Err(MscError::invalid("distances must be finite, nonnegative and symmetric"));
                }
            }
        }
        let distinct = DistinctDistances::build(&dist);
        Ok(Self(dist, distinct))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// Median of the strictly positive off-diagonal distances (1 if none).
    pub fn median_offdiagonal(&self) -> f64 {
        let m = self.dim();
        let mut v: Vec<f64> = (0..m)
            .flat_map(|a| ((a + 1)..m).map(move |b| (a, b)))
            .map(|(a, b)| self.0[(a, b)])
            .filter(|&d| d > 0.0)
            .collect();
        if v.is_empty() {
            return 1.0;
        }
        v.sort_by(f64::total_cmp);
        let mid = v.len() / 2;
        if v.len() % 2 == 1 {
            v[mid]
        } else {
            0.5 * (v[mid - 1] + v[mid])
        }
    }
}

/// Correlation matrix `R(ω)` (unit diagonal, no nugget).
pub fn build_correlation_matrix(
    kernel: &CorrelationKernel,
    omega: f64,
    dist: &DistanceMatrix,
) -> Result<DMatrix<f64>> {
    if !kernel.contains(omega) {
        return Err(MscError::invalid(format!(
            "ω = {omega} outside [{}, {}]",
            kernel.omega_lo, kernel.omega_hi
        )));
    }
    Ok(correlation_unchecked(kernel, omega, dist))
}

fn correlation_unchecked(kernel: &CorrelationKernel, omega: f64, dist: &DistanceMatrix) -> DMatrix<f64> {
    let m = dist.dim();
    match &dist.1 {
        Some(distinct) => {
            let entries: Vec<f64> = distinct.values.iter().map(|&d| kernel.entry(omega, d)).collect();
            let mut r = DMatrix::from_iterator(m, m, distinct.index.iter().map(|&i| entries[i as usize]));
            r.fill_diagonal(1.0);
            r
        }
        None => DMatrix::from_fn(m, m, |a, b| if a == b { 1.0 } else { kernel.entry(omega, dist.0[(a, b)]) }),
    }
}

/// Cholesky factor of `R + nugget·I` with its cached log-determinant.
/// The identity is represented without storing a matrix.
#[derive(Clone, Debug)]
pub struct PrecisionFactor {
    lower: Option<DMatrix<f64>>,
    dim: usize,
    log_det: f64,
    nugget: f64,
}

impl PrecisionFactor {
    pub fn identity(m: usize) -> Self {
        Self { lower: None, dim: m, log_det: 0.0, nugget: 0.0 }
    }

    /// Factorizes `r + nugget·I`, escalating the nugget tenfold from 1e-8
    /// up to 1e-4 on failure.
    pub fn factorize(r: &DMatrix<f64>) -> Result<Self> {
        Self::factorize_with_nugget(r, NUGGET)
    }

    pub fn factorize_with_nugget(r: &DMatrix<f64>, nugget: f64) -> Result<Self> {
        if !r.is_square() {
            return Err(MscError::invalid("correlation matrix must be square"));
        }
        let m = r.nrows();
        let mut nug = nugget;
        loop {
            let mut a = r.clone();
            for d in 0..m {
                a[(d, d)] += nug;
            }
            if let Some(chol) = Cholesky::new(a) {
                let l = chol.unpack();
                let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
                if log_det.is_finite() {
                    return Ok(Self { lower: Some(l), dim: m, log_det, nugget: nug });
                }
            }
            if nug >= MAX_NUGGET {
                return Err(MscError::numeric(format!(
                    "correlation matrix is not positive definite with nugget {nug:e}"
                )));
            }
            nug = (nug * 10.0).min(MAX_NUGGET);
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn is_identity(&self) -> bool {
        self.lower.is_none()
    }

    /// Lower-triangular factor `L` with `L Lᵀ = R + nugget·I`.
    pub fn lower(&self) -> DMatrix<f64> {
        self.lower.clone().unwrap_or_else(|| DMatrix::identity(self.dim, self.dim))
    }

    /// `L⁻¹ v`
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.lower {
            None => v.clone(),
            Some(l) => {
                let mut out = v.clone();
                l.solve_lower_triangular_mut(&mut out);
                out
            }
        }
    }

    /// `L⁻¹ A`
    pub fn whiten_matrix(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.lower {
            None => a.clone(),
            Some(l) => {
                let mut out = a.clone();
                l.solve_lower_triangular_mut(&mut out);
                out
            }
        }
    }

    /// `R⁻¹ v`
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.lower {
            None => v.clone(),
            Some(l) => {
                let mut out = v.clone();
                l.solve_lower_triangular_mut(&mut out);
                l.tr_solve_lower_triangular_mut(&mut out);
                out
            }
        }
    }

    /// `vᵀ R⁻¹ v`
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        self.whiten(v).norm_squared()
    }

    /// Dense `R⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        match &self.lower {
            None => DMatrix::identity(self.dim, self.dim),
            Some(l) => {
                let mut linv = DMatrix::identity(self.dim, self.dim);
                l.solve_lower_triangular_mut(&mut linv);
                linv.transpose() * &linv
            }
        }
    }
}

/// Outcome of one `ω` update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OmegaUpdate {
    pub omega: f64,
    /// True when the Newton proposal itself was not accepted.
    pub newton_rejected: bool,
}

/// Per-signal slice of the expected log-likelihood as a function of `ω`:
/// `-½ Σ_j w_j r_jᵀ R(ω)⁻¹ r_j / σ² - ½ log|R(ω)|`.
pub struct OmegaObjective<'a> {
    kernel: &'a CorrelationKernel,
    dist: &'a DistanceMatrix,
    residuals: Vec<(f64, DVector<f64>)>,
    sigma2: f64,
    nugget: f64,
}

impl<'a> OmegaObjective<'a> {
    /// Terms with zero weight are dropped.
    pub fn new(
        kernel: &'a CorrelationKernel,
        dist: &'a DistanceMatrix,
        residuals: Vec<(f64, DVector<f64>)>,
        sigma2: f64,
    ) -> Self {
        let residuals = residuals.into_iter().filter(|(w, _)| *w > 0.0).collect();
        Self { kernel, dist, residuals, sigma2, nugget: NUGGET }
    }

    pub(crate) fn with_nugget(mut self, nugget: f64) -> Self {
        self.nugget = nugget;
        self
    }

    /// Objective value; `-∞` where the correlation matrix cannot be factorized.
    pub fn value(&self, omega: f64) -> f64 {
        if !(omega > 0.0) || (self.kernel.family == KernelFamily::Autoregressive && omega <= 1.0) {
            return f64::NEG_INFINITY;
        }
        let r = correlation_unchecked(self.kernel, omega, self.dist);
        let Ok(factor) = PrecisionFactor::factorize_with_nugget(&r, self.nugget) else {
            return f64::NEG_INFINITY;
        };
        let quad: f64 = self.residuals.iter().map(|(w, res)| w * factor.quad_form(res)).sum();
        -0.5 * quad / self.sigma2 - 0.5 * factor.log_det()
    }
}

/// One safeguarded Newton update of `ω` for a single signal.
pub fn update_omega_newton(
    kernel: &CorrelationKernel,
    dist: &DistanceMatrix,
    omega_t: f64,
    x: &DVector<f64>,
    etas: &[DVector<f64>],
    w: &[f64],
    sigma2: f64,
) -> OmegaUpdate {
    let residuals = etas.iter().zip(w).map(|(eta, &wj)| (wj, x - eta)).collect();
    let objective = OmegaObjective::new(kernel, dist, residuals, sigma2);
    newton_ascent_step(omega_t, kernel.omega_lo, kernel.omega_hi, |o| objective.value(o))
}

/// Newton step on a scalar objective with derivatives from central finite
/// differences (step `1e-5·ω`). Falls back to step halving and then to a
/// golden-section search over `[lo, hi]` in log scale. The returned value
/// never has a lower objective than `omega_t`.
pub fn newton_ascent_step(omega_t: f64, lo: f64, hi: f64, objective: impl Fn(f64) -> f64) -> OmegaUpdate {
    let omega_t = omega_t.clamp(lo, hi);
    let q0 = objective(omega_t);
    let keep = OmegaUpdate { omega: omega_t, newton_rejected: true };
    if !q0.is_finite() {
        return golden_fallback(q0, lo, hi, &objective).unwrap_or(keep);
    }

    let h = 1e-5 * omega_t;
    let (f, b) = if omega_t - h >= lo {
        let qp = objective(omega_t + h);
        let qm = objective(omega_t - h);
        ((qp - qm) / (2.0 * h), (qp - 2.0 * q0 + qm) / (h * h))
    } else {
        let q1 = objective(omega_t + h);
        let q2 = objective(omega_t + 2.0 * h);
        ((-3.0 * q0 + 4.0 * q1 - q2) / (2.0 * h), (q0 - 2.0 * q1 + q2) / (h * h))
    };
    if !(f.is_finite() && b.is_finite()) {
        return golden_fallback(q0, lo, hi, &objective).unwrap_or(keep);
    }

    let step = if b < 0.0 { -f / b } else { f.signum() * 0.5 * omega_t };
    if b < 0.0 && step.abs() <= 1e-9 * omega_t {
        return OmegaUpdate { omega: omega_t, newton_rejected: false };
    }
    let candidate = omega_t + step;
    if b < 0.0 && candidate >= lo && candidate <= hi && objective(candidate) >= q0 {
        return OmegaUpdate { omega: candidate, newton_rejected: false };
    }

    // Step halving along the proposed direction, clamped to the bounds.
    let mut s = step;
    for _ in 0..30 {
        s *= 0.5;
        let c = (omega_t + s).clamp(lo, hi);
        if c != omega_t && objective(c) > q0 {
            return OmegaUpdate { omega: c, newton_rejected: true };
        }
    }
    golden_fallback(q0, lo, hi, &objective).unwrap_or(keep)
}

fn golden_fallback(
    q0: f64,
    lo: f64,
    hi: f64,
    objective: &impl Fn(f64) -> f64,
) -> Option<OmegaUpdate> {
    let best = golden_section_log(lo, hi, objective);
    let qb = objective(best);
    if qb > q0 || (!q0.is_finite() && qb.is_finite()) {
        Some(OmegaUpdate { omega: best, newton_rejected: true })
    } else {
        None
    }
}

/// Golden-section maximization over `[lo, hi]` on a log scale.
fn golden_section_log(lo: f64, hi: f64, objective: &impl Fn(f64) -> f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = objective(c.exp());
    let mut fd = objective(d.exp());
    for _ in 0..60 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d.exp());
        }
    }
    (0.5 * (a + b)).exp().clamp(lo, hi)
}

//! Synthetic mixtures, correlated noise fields and recovery metrics.

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{MscError, Result};
use crate::model::{DataKind, Dataset, Dictionary, SupportMask, SupportSet};
use crate::spatial::{build_correlation_matrix, CorrelationKernel, DistanceMatrix, KernelFamily, PrecisionFactor};

/// Largest natural parameter produced by the rescaled count generator.
pub const MAX_COUNT_ETA: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimFamily {
    Gaussian,
    Poisson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub family: SimFamily,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub d: usize,
    /// Signal-to-noise ratio; `None` gives noiseless Gaussian signals.
    pub snr: Option<f64>,
    /// Correlated noise with this kernel and `ω`; locations are drawn in `[0, 100]²`.
    pub spatial: Option<(KernelFamily, f64)>,
    pub coef_range: (f64, f64),
    pub seed: u64,
    /// Keep the raw coefficient range for count data instead of rescaling it.
    pub raw_scale: bool,
}

impl SimSpec {
    pub fn gaussian(n: usize, m: usize, k: usize, d: usize, snr: f64, seed: u64) -> Self {
        Self {
            family: SimFamily::Gaussian,
            n,
            m,
            k,
            d,
            snr: Some(snr),
            spatial: None,
            coef_range: (1.0, 10.0),
            seed,
            raw_scale: false,
        }
    }

    pub fn poisson(n: usize, m: usize, k: usize, d: usize, seed: u64) -> Self {
        Self { family: SimFamily::Poisson, snr: None, ..Self::gaussian(n, m, k, d, 1.0, seed) }
    }

    pub fn with_spatial(mut self, kernel: KernelFamily, omega: f64) -> Self {
        self.spatial = Some((kernel, omega));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.k == 0 {
            return Err(MscError::invalid("n, m and K must be positive"));
        }
        if self.d == 0 || self.d > self.k {
            return Err(MscError::invalid(format!("d = {} must lie in 1..=K = {}", self.d, self.k)));
        }
        if let Some(s) = self.snr {
            if !(s > 0.0) {
                return Err(MscError::invalid("SNR must be positive"));
            }
        }
        let (lo, hi) = self.coef_range;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(MscError::invalid("coefficient range is empty"));
        }
        if let Some((kernel, omega)) = self.spatial {
            if !CorrelationKernel::new(kernel).contains(omega) {
                return Err(MscError::invalid(format!("ω = {omega} is outside the {kernel} kernel bounds")));
            }
        }
        Ok(())
    }
}

/// The generating parameters behind a simulated dataset.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub dictionary: Dictionary,
    /// Supports in order of first use.
    pub supports: SupportSet,
    /// One coefficient vector per support (on-support entries).
    pub coefficients: Vec<Vec<f64>>,
    /// Generating component of each signal.
    pub assignments: Vec<usize>,
    /// Noise variance per signal (Gaussian only).
    pub sigma2: Vec<f64>,
    pub omega: Option<f64>,
}

impl GroundTruth {
    /// Noise-free mean of signal `i` in natural-parameter space.
    pub fn eta(&self, i: usize) -> DVector<f64> {
        let j = self.assignments[i];
        crate::model::eta_for(&self.dictionary, self.supports.get(j), &self.coefficients[j])
    }
}

struct Draws {
    dictionary: Dictionary,
    components: IndexMap<SupportMask, Vec<f64>>,
    assignments: Vec<usize>,
}

fn draw_structure(spec: &SimSpec, rng: &mut ChaCha8Rng) -> Result<Draws> {
    let raw = DMatrix::from_fn(spec.m, spec.k, |_, _| rng.random::<f64>());
    let dictionary = Dictionary::new(raw)?;
    let (lo, hi) = spec.coef_range;
    let mut components: IndexMap<SupportMask, Vec<f64>> = IndexMap::new();
    let mut assignments = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let atoms = sample(rng, spec.k, spec.d).into_vec();
        let mask = SupportMask::new(spec.k, atoms)?;
        if !components.contains_key(&mask) {
            let mut alpha: Vec<f64> = (0..spec.d).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
            if spec.family == SimFamily::Poisson && !spec.raw_scale {
                let eta = crate::model::eta_for(&dictionary, &mask, &alpha);
                let top = eta.max();
                if top > MAX_COUNT_ETA {
                    let s = MAX_COUNT_ETA / top;
                    alpha.iter_mut().for_each(|a| *a *= s);
                }
            }
            components.insert(mask.clone(), alpha);
        }
        assignments.push(components.get_index_of(&mask).unwrap());
    }
    Ok(Draws { dictionary, components, assignments })
}

fn into_truth(draws: Draws, k: usize, d: usize, sigma2: Vec<f64>, omega: Option<f64>) -> Result<GroundTruth> {
    let (masks, coefficients): (Vec<_>, Vec<_>) = draws.components.into_iter().unzip();
    Ok(GroundTruth {
        dictionary: draws.dictionary,
        supports: SupportSet::from_masks(k, d, masks)?,
        coefficients,
        assignments: draws.assignments,
        sigma2,
        omega,
    })
}

/// Gaussian `d`-sparse mixture with noise variance `‖η_i‖ / SNR`.
pub fn simulate_gaussian(spec: &SimSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    if spec.family != SimFamily::Gaussian {
        return Err(MscError::invalid("spec is not Gaussian"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draws = draw_structure(spec, &mut rng)?;
    let locations = spec.spatial.map(|_| DMatrix::from_fn(spec.m, 2, |_, _| 100.0 * rng.random::<f64>()));
    let factor = match (spec.spatial, &locations) {
        (Some((kernel, omega)), Some(locs)) => {
            let r = build_correlation_matrix(&CorrelationKernel::new(kernel), omega, &DistanceMatrix::from_locations(locs))?;
            PrecisionFactor::factorize(&r)?
        }
        _ => PrecisionFactor::identity(spec.m),
    };
    let lower = (!factor.is_identity()).then(|| factor.lower());
    let mut values = DMatrix::zeros(spec.m, spec.n);
    let mut sigma2 = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let j = draws.assignments[i];
        let (mask, alpha) = draws.components.get_index(j).unwrap();
        let eta = crate::model::eta_for(&draws.dictionary, mask, alpha);
        let s2 = spec.snr.map_or(0.0, |snr| eta.norm() / snr);
        let z = DVector::from_fn(spec.m, |_, _| StandardNormal.sample(&mut rng));
        let noise = match &lower {
            Some(l) => l * z,
            None => z,
        };
        values.set_column(i, &(eta + noise * s2.sqrt()));
        sigma2.push(s2);
    }
    let mut data = Dataset::new(values, DataKind::Real)?;
    if let Some(locs) = locations {
        data = data.with_locations(locs)?;
    }
    let truth = into_truth(draws, spec.k, spec.d, sigma2, spec.spatial.map(|s| s.1))?;
    Ok((data, truth))
}

/// Poisson `d`-sparse mixture with log rates `D(α ∘ γ)`.
pub fn simulate_poisson(spec: &SimSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    if spec.family != SimFamily::Poisson {
        return Err(MscError::invalid("spec is not Poisson"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draws = draw_structure(spec, &mut rng)?;
    let mut values = DMatrix::zeros(spec.m, spec.n);
    for i in 0..spec.n {
        let (mask, alpha) = draws.components.get_index(draws.assignments[i]).unwrap();
        let eta = crate::model::eta_for(&draws.dictionary, mask, alpha);
        for l in 0..spec.m {
            values[(l, i)] = poisson_draw(crate::expfam::ExpFamilySpec::Poisson.mean(eta[l]), &mut rng);
        }
    }
    let data = Dataset::new(values, DataKind::Counts { trials: None })?;
    let truth = into_truth(draws, spec.k, spec.d, Vec::new(), None)?;
    Ok((data, truth))
}

/// One Poisson draw with the given rate.
pub fn poisson_draw(rate: f64, rng: &mut impl Rng) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    Poisson::new(rate).map(|p| p.sample(rng)).unwrap_or(rate.round())
}

/// Orthonormal basis of the column span, from the singular vectors whose
/// singular values exceed `1e-10` of the largest.
fn span_basis(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if !(smax > 0.0) {
        return Err(MscError::invalid("dictionary has no nonzero column"));
    }
    let u = svd.u.unwrap();
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&c| svd.singular_values[c] > 1e-10 * smax).collect();
    Ok(u.select_columns(&keep))
}

/// `‖P_a - P_b‖_F / √(2 max(K_a, K_b))` between column-span projectors.
pub fn subspace_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(MscError::invalid(format!("row counts differ: {} vs {}", a.nrows(), b.nrows())));
    }
    let ua = span_basis(a)?;
    let ub = span_basis(b)?;
    let diff = &ua * ua.transpose() - &ub * ub.transpose();
    let k = a.ncols().max(b.ncols()) as f64;
    Ok((diff.norm() / (2.0 * k).sqrt()).clamp(0.0, 1.0))
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MscError::invalid(format!("shape mismatch: {} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(MscError::invalid("cannot compare empty arrays"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log₁₀(peak² / MSE)`; `+∞` for identical inputs.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// Stationary Gaussian field on a `height × width` pixel grid with
/// covariance `σ² k(Δ)`, sampled by circulant embedding on the doubled torus.
/// Negative embedding eigenvalues are truncated to zero.
pub fn gaussian_field(
    height: usize,
    width: usize,
    sigma: f64,
    kernel: KernelFamily,
    omega: f64,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    if height == 0 || width == 0 {
        return Err(MscError::invalid("field must have at least one pixel"));
    }
    let k = CorrelationKernel::new(kernel);
    if !k.contains(omega) {
        return Err(MscError::invalid(format!("ω = {omega} is outside the {kernel} kernel bounds")));
    }
    let (gh, gw) = (2 * height, 2 * width);
    let corr = |dy: usize, dx: usize| {
        let y = dy.min(gh - dy) as f64;
        let x = dx.min(gw - dx) as f64;
        let dist = (x * x + y * y).sqrt();
        match kernel {
            KernelFamily::Exponential => (-omega * dist).exp(),
            KernelFamily::Gaussian => (-omega * dist * dist).exp(),
            KernelFamily::Autoregressive => omega.powf(-dist),
        }
    };
    let mut grid: Vec<Complex<f64>> = (0..gh * gw).map(|p| Complex::new(corr(p / gw, p % gw), 0.0)).collect();
    let mut planner = FftPlanner::new();
    fft2(&mut planner, &mut grid, gh, gw);
    let cells = (gh * gw) as f64;
    let mut field: Vec<Complex<f64>> = grid
        .iter()
        .map(|lam| {
            let scale = (lam.re.max(0.0) / cells).sqrt();
            let z1: f64 = StandardNormal.sample(rng);
            let z2: f64 = StandardNormal.sample(rng);
            Complex::new(z1 * scale, z2 * scale)
        })
        .collect();
    fft2(&mut planner, &mut field, gh, gw);
    Ok(DMatrix::from_fn(height, width, |r, c| sigma * field[r * gw + c].re))
}

fn fft2(planner: &mut FftPlanner<f64>, data: &mut [Complex<f64>], rows: usize, cols: usize) {
    let row_fft = planner.plan_fft_forward(cols);
    for r in 0..rows {
        row_fft.process(&mut data[r * cols..(r + 1) * cols]);
    }
    let col_fft = planner.plan_fft_forward(rows);
    let mut buf = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            buf[r] = data[r * cols + c];
        }
        col_fft.process(&mut buf);
        for r in 0..rows {
            data[r * cols + c] = buf[r];
        }
    }
}

//! The fast EM driver: E-step, rejection control, family-specific M-step,
//! support-set growth and BIC selection of the sparsity level.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MscError, Result};
use crate::expfam::{gradient_update_column, irls_step_safeguarded, ColumnHistory, ExpFamilySpec};
use crate::gaussian::{column_target, log_density_from_quad, sigma2_from_quads, whiten_dataset, wls_from_gram};
use crate::model::{
    argmax_components, count_parameters, eta_for, expand_support_set, init_support_set, CoefficientTable, Dataset,
    Dictionary, MixtureState, ModelFamily, NoiseParams, ResponsibilityMatrix, SupportMask, SupportSet,
};
use crate::spatial::{
    build_correlation_matrix, newton_ascent_step, CorrelationKernel, DistanceMatrix, KernelFamily, OmegaObjective,
    PrecisionFactor,
};

/// Rejection-control threshold schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcSchedule {
    pub c0: f64,
    pub decay: f64,
    pub c_min: f64,
    pub warmup: usize,
}

impl Default for RcSchedule {
    fn default() -> Self {
        Self { c0: 0.9, decay: 0.5, c_min: 1e-3, warmup: 3 }
    }
}

impl RcSchedule {
    /// Plain EM: every threshold is zero.
    pub fn disabled() -> Self {
        Self { c0: 0.0, ..Self::default() }
    }
}

/// `c₀` during warmup, then `c₀·decay^(iter-warmup)` floored at `c_min`.
/// A zero `c₀` disables rejection control altogether.
pub fn threshold_schedule(iter: usize, schedule: &RcSchedule) -> f64 {
    if schedule.c0 <= 0.0 {
        return 0.0;
    }
    if iter < schedule.warmup {
        return schedule.c0;
    }
    let steps = (iter - schedule.warmup) as i32;
    (schedule.c0 * schedule.decay.powi(steps)).max(schedule.c_min).min(schedule.c0)
}

/// Small constants guarding the numerics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Numerics {
    pub sigma2_floor: f64,
    pub gram_ridge: f64,
    pub nugget: f64,
    /// Components with `π_j` below `component_floor / J` are dropped.
    pub component_floor: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            sigma2_floor: crate::gaussian::SIGMA2_FLOOR,
            gram_ridge: crate::linalg::GRAM_RIDGE,
            nugget: crate::spatial::NUGGET,
            component_floor: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of atoms `K`.
    pub n_atoms: usize,
    pub d_max: usize,
    pub family: ModelFamily,
    pub kernel: KernelFamily,
    pub rejection: RcSchedule,
    /// Relative log-likelihood change that ends an EM run.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Stop at the first BIC increase; otherwise fit every level up to `d_max`.
    pub stop_on_bic: bool,
    /// Initial noise variance; estimated from the first fit when absent.
    pub sigma2_init: Option<f64>,
    pub numerics: Numerics,
}

impl FitConfig {
    pub fn new(family: ModelFamily, n_atoms: usize, d_max: usize) -> Self {
        Self {
            n_atoms,
            d_max,
            family,
            kernel: KernelFamily::Exponential,
            rejection: RcSchedule::default(),
            tol: 1e-6,
            max_iter: 200,
            seed: 0,
            stop_on_bic: true,
            sigma2_init: None,
            numerics: Numerics::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_atoms == 0 {
            return Err(MscError::invalid("K must be at least 1"));
        }
        if self.d_max == 0 {
            return Err(MscError::invalid("d_max must be at least 1"));
        }
        let rc = &self.rejection;
        if !(0.0..=1.0).contains(&rc.c0) || !(rc.decay > 0.0 && rc.decay <= 1.0) || !(0.0..=1.0).contains(&rc.c_min) {
            return Err(MscError::invalid("rejection-control thresholds must lie in [0, 1] and decay in (0, 1]"));
        }
        if !(self.tol > 0.0) {
            return Err(MscError::invalid("tolerance must be positive"));
        }
        if self.max_iter == 0 {
            return Err(MscError::invalid("max_iter must be at least 1"));
        }
        if let Some(s) = self.sigma2_init {
            if !(s > 0.0 && s.is_finite()) {
                return Err(MscError::invalid("initial σ² must be positive"));
            }
        }
        Ok(())
    }
}

/// Counters collected during a fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub newton_rejected: usize,
    pub atoms_reinitialized: usize,
    pub unused_atom_skips: usize,
    pub gradient_rejected: usize,
    pub components_removed: usize,
    pub em_iterations: usize,
    pub d_max_reached: bool,
}

impl Diagnostics {
    fn absorb(&mut self, other: &Diagnostics) {
        self.newton_rejected += other.newton_rejected;
        self.atoms_reinitialized += other.atoms_reinitialized;
        self.unused_atom_skips += other.unused_atom_skips;
        self.gradient_rejected += other.gradient_rejected;
        self.components_removed += other.components_removed;
        self.em_iterations += other.em_iterations;
    }
}

/// Summary of one sparsity level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub d: usize,
    pub loglik: f64,
    pub bic: f64,
    pub n_params: usize,
    /// `|S(d)|` before the EM run.
    pub expanded: usize,
    /// `|S(d)|` after argmax pruning.
    pub pruned: usize,
    /// Log-likelihood before the first and after every EM iteration.
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub state: MixtureState,
    pub chosen_d: usize,
    pub levels: Vec<LevelSummary>,
    pub responsibilities: ResponsibilityMatrix,
    pub assignments: Vec<usize>,
    pub diagnostics: Diagnostics,
}

impl FitResult {
    pub fn bic_trace(&self) -> Vec<(usize, f64)> {
        self.levels.iter().map(|l| (l.d, l.bic)).collect()
    }
}

/// Output of [`Fitter::run_em_fixed_d`].
#[derive(Clone, Debug)]
pub struct EmRun {
    pub state: MixtureState,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub rejection_used: bool,
    pub diagnostics: Diagnostics,
}

/// `-2ℓ + q log(nm)`.
pub fn bic(loglik: f64, q: usize, n: usize, m: usize) -> f64 {
    -2.0 * loglik + q as f64 * ((n * m) as f64).ln()
}

/// Every mask with between one and `d` of `k` atoms, in lexicographic order
/// of the atom lists grouped by size.
pub fn exhaustive_support_set(k: usize, d: usize) -> Result<SupportSet> {
    fn rec(k: usize, size: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for a in start..k {
            cur.push(a);
            rec(k, size, a + 1, cur, out);
            cur.pop();
        }
    }
    let mut lists = Vec::new();
    for size in 1..=d.min(k) {
        rec(k, size, 0, &mut Vec::new(), &mut lists);
    }
    let masks = lists.into_iter().map(|l| SupportMask::new(k, l)).collect::<Result<Vec<_>>>()?;
    SupportSet::from_masks(k, d, masks)
}

/// Sets entries `w ≤ c` to `c` with probability `w/c` and to zero
/// otherwise; entries above `c` are kept.
pub fn rejection_control_entry(w: f64, c: f64, rng: &mut impl Rng) -> f64 {
    if c <= 0.0 || w > c {
        return w;
    }
    if w <= 0.0 {
        return 0.0;
    }
    if rng.random::<f64>() < w / c {
        c
    } else {
        0.0
    }
}

/// Rejection control on every entry followed by row renormalization. Rows
/// that would become all-zero keep their original values.
pub fn rejection_control(w: &ResponsibilityMatrix, c: f64, rng: &mut impl Rng) -> ResponsibilityMatrix {
    if c <= 0.0 {
        return w.clone();
    }
    let (n, j) = (w.n_signals(), w.n_components());
    let mut out = w.matrix().clone();
    for i in 0..n {
        let mut total = 0.0;
        for jj in 0..j {
            let v = rejection_control_entry(w.get(i, jj), c, rng);
            out[(i, jj)] = v;
            total += v;
        }
        if total > 0.0 {
            for jj in 0..j {
                out[(i, jj)] /= total;
            }
        } else {
            for jj in 0..j {
                out[(i, jj)] = w.get(i, jj);
            }
        }
    }
    ResponsibilityMatrix::from_matrix_unchecked(out)
}

/// Row-wise normalized `exp` of a log-weight matrix via the max shift.
pub(crate) fn responsibilities_from_log(lp: &DMatrix<f64>) -> Result<ResponsibilityMatrix> {
    let (n, j) = lp.shape();
    let mut w = DMatrix::zeros(n, j);
    for i in 0..n {
        let max = lp.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(MscError::DegenerateSignal {
                index: i,
                reason: "every component has zero density".into(),
            });
        }
        let mut total = 0.0;
        for jj in 0..j {
            let v = (lp[(i, jj)] - max).exp();
            w[(i, jj)] = v;
            total += v;
        }
        for jj in 0..j {
            w[(i, jj)] /= total;
        }
    }
    Ok(ResponsibilityMatrix::from_matrix_unchecked(w))
}

pub(crate) fn loglik_from_log(lp: &DMatrix<f64>) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..lp.nrows() {
        let max = lp.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(MscError::DegenerateSignal {
                index: i,
                reason: "every component has zero density".into(),
            });
        }
        let s: f64 = lp.row(i).iter().map(|v| (v - max).exp()).sum();
        total += max + s.ln();
    }
    Ok(total)
}

/// Correlation factors keyed on the `ω` they were built for.
struct FactorCache {
    omega: Vec<f64>,
    factors: Vec<Arc<PrecisionFactor>>,
}

/// Per-run scratch state.
struct Workspace {
    factors: Option<FactorCache>,
    histories: Vec<ColumnHistory>,
    diag: Diagnostics,
}

/// A dataset bound to a fit configuration.
pub struct Fitter<'a> {
    data: &'a Dataset,
    config: FitConfig,
    kernel: Option<CorrelationKernel>,
    dist: Option<DistanceMatrix>,
    expfam: Option<ExpFamilySpec>,
    base_measure: Vec<f64>,
}

impl<'a> Fitter<'a> {
    pub fn new(data: &'a Dataset, config: FitConfig) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(MscError::invalid("dataset has no signals"));
        }
        let (mut kernel, mut dist, mut expfam, mut base_measure) = (None, None, None, Vec::new());
        match config.family {
            ModelFamily::SimpleGaussian => {}
            ModelFamily::SpatialGaussian => {
                let locs = data
                    .locations()
                    .ok_or_else(|| MscError::invalid("the spatial model needs signal locations"))?;
                if locs.nrows() != data.dim() {
                    return Err(MscError::invalid(format!(
                        "{} locations for signals of dimension {}",
                        locs.nrows(),
                        data.dim()
                    )));
                }
                kernel = Some(CorrelationKernel::new(config.kernel));
                dist = Some(DistanceMatrix::from_locations(locs));
            }
            ModelFamily::ExpFamily(spec) => {
                base_measure = (0..data.len())
                    .map(|i| {
                        let x = data.signal(i);
                        spec.validate(x.as_slice()).map_err(|e| e.in_signal(i))?;
                        Ok(spec.log_base_measure(x.as_slice()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                expfam = Some(spec);
            }
        }
        Ok(Self { data, config, kernel, dist, expfam, base_measure })
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    /// `K` distinct signals drawn with the seeded generator, normalized
    /// (after `log1p` for count data). Zero signals are skipped; random
    /// directions fill in if too few remain.
    pub fn initial_dictionary(&self, rng: &mut impl Rng) -> Result<Dictionary> {
        let (n, m, k) = (self.data.len(), self.data.dim(), self.config.n_atoms);
        let order = sample(rng, n, n).into_vec();
        let mut cols: Vec<DVector<f64>> = Vec::with_capacity(k);
        for i in order {
            if cols.len() == k {
                break;
            }
            let v = self.atom_source(i);
            if v.norm() > 0.0 && v.iter().all(|x| x.is_finite()) {
                cols.push(v);
            }
        }
        while cols.len() < k {
            cols.push(DVector::from_fn(m, |_, _| rng.random::<f64>() + 1e-3));
        }
        Dictionary::new(DMatrix::from_columns(&cols))
    }

    fn atom_source(&self, i: usize) -> DVector<f64> {
        let x = self.data.signal(i).into_owned();
        if self.expfam.is_some() {
            x.map(f64::ln_1p)
        } else {
            x
        }
    }

    /// State on `supports` with uniform weights, coefficients fitted
    /// independently per component, and starting noise parameters.
    pub fn initialize_state(&self, dictionary: Dictionary, supports: SupportSet) -> Result<MixtureState> {
        let (n, m, j) = (self.data.len(), self.data.dim(), supports.len());
        if dictionary.len() != self.config.n_atoms || dictionary.dim() != m {
            return Err(MscError::invalid("dictionary shape does not match the data and K"));
        }
        let mut coefs = Vec::with_capacity(n * j);
        for i in 0..n {
            for mask in supports.iter() {
                coefs.push(self.fresh_coefficients(i, &dictionary, mask, None)?);
            }
        }
        let mut state = MixtureState {
            dictionary,
            supports,
            weights: vec![1.0 / j as f64; j],
            coefficients: CoefficientTable::new(n, j, coefs)?,
            noise: Vec::new(),
        };
        state.noise = self.initial_noise(&state)?;
        if self.expfam.is_none() {
            // One coefficient and dictionary sweep at the pooled σ², so no
            // atom starts out equal to the signal it was drawn from.
            let w = self.e_step(&state)?;
            let mut work = self.workspace(&state);
            self.update_coefficients_and_dictionary(&mut state, &w, &mut work)?;
        }
        Ok(state)
    }

    /// Starting σ² is pooled over all signals, so a signal that seeded an
    /// atom does not start at a zero-residual spike.
    fn initial_noise(&self, state: &MixtureState) -> Result<Vec<NoiseParams>> {
        let (n, m, j) = (self.data.len(), self.data.dim(), state.n_components());
        if self.expfam.is_some() {
            return Ok(vec![NoiseParams::ExpFamily { dispersion: 1.0 }; n]);
        }
        let omega0 = self.kernel.as_ref().zip(self.dist.as_ref()).map(|(k, d)| k.initial_omega(d));
        let sigma2 = match self.config.sigma2_init {
            Some(s) => s,
            None => {
                let total: f64 = (0..n)
                    .map(|i| {
                        let x = self.data.signal(i);
                        (0..j).map(|jj| (x - state.eta(i, jj)).norm_squared()).sum::<f64>() / j as f64
                    })
                    .sum();
                (total / (n * m) as f64).max(self.config.numerics.sigma2_floor)
            }
        };
        Ok((0..n)
            .map(|_| match omega0 {
                Some(omega) => NoiseParams::Spatial { sigma2, omega },
                None => NoiseParams::Simple { sigma2 },
            })
            .collect())
    }

    /// Coefficients on `mask` for signal `i`, fitted from scratch (Gaussian
    /// families: least squares, whitened when `factor` is given).
    fn fresh_coefficients(
        &self,
        i: usize,
        dictionary: &Dictionary,
        mask: &SupportMask,
        factor: Option<&PrecisionFactor>,
    ) -> Result<Vec<f64>> {
        let x = self.data.signal(i);
        match self.expfam {
            None => {
                let dj = dictionary.select(mask);
                let (dj, xv) = match factor {
                    Some(f) => (f.whiten_matrix(&dj), f.whiten(&x.into_owned())),
                    None => (dj, x.into_owned()),
                };
                let g = dj.tr_mul(&dj);
                let b = dj.tr_mul(&xv);
                Ok(crate::linalg::solve_spd(&g, &b, self.config.numerics.gram_ridge)
                    .map_err(|e| e.in_signal(i))?
                    .as_slice()
                    .to_vec())
            }
            Some(spec) => {
                // Least squares on log1p(x), then a few guarded IRLS steps.
                let dj = dictionary.select(mask);
                let z = x.map(f64::ln_1p);
                let g = dj.tr_mul(&dj);
                let b = dj.tr_mul(&z);
                let mut c = crate::linalg::solve_spd(&g, &b, self.config.numerics.gram_ridge)
                    .map_err(|e| e.in_signal(i))?
                    .as_slice()
                    .to_vec();
                for _ in 0..3 {
                    match irls_step_safeguarded(spec, x, dictionary, mask, &c) {
                        Ok(next) => c = next,
                        Err(MscError::DegenerateSignal { .. }) => break,
                        Err(e) => return Err(e.in_signal(i)),
                    }
                }
                Ok(c)
            }
        }
    }

    /// Carries `parent` over to a new support set. Each new mask inherits the
    /// coefficients of its largest contained parent mask (first in order on
    /// ties) and fits each added atom to the parent residual; masks with no
    /// contained parent are fitted from scratch. A parent's weight is split
    /// evenly among the masks it seeds.
    pub fn grow_state(&self, parent: &MixtureState, supports: SupportSet) -> Result<MixtureState> {
        let (n, j_new) = (self.data.len(), supports.len());
        if supports.atom_count() != parent.dictionary.len() {
            return Err(MscError::invalid("support width does not match the dictionary"));
        }
        let owner: Vec<Option<usize>> = supports
            .iter()
            .map(|mask| {
                if let Some(p) = parent.supports.index_of(mask) {
                    return Some(p);
                }
                let mut best: Option<usize> = None;
                for (p, pm) in parent.supports.iter().enumerate() {
                    if pm.is_subset_of(mask) && best.is_none_or(|b| pm.popcount() > parent.supports.get(b).popcount()) {
                        best = Some(p);
                    }
                }
                best
            })
            .collect();

        let factors = self.factors_for(parent)?;
        let dict = &parent.dictionary;
        let rows: Vec<Vec<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let factor = factors.as_ref().map(|f| f[i].as_ref());
                supports
                    .iter()
                    .zip(&owner)
                    .map(|(mask, own)| match own {
                        None => self.fresh_coefficients(i, dict, mask, factor),
                        Some(p) => {
                            let pmask = parent.supports.get(*p);
                            let pc = parent.coefficients.get(i, *p);
                            self.extend_coefficients(i, dict, pmask, pc, mask, factor)
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let coefs: Vec<Vec<f64>> = rows.into_iter().flatten().collect();

        let mut children = vec![0usize; parent.n_components()];
        for p in owner.iter().flatten() {
            children[*p] += 1;
        }
        let orphans = owner.iter().filter(|o| o.is_none()).count();
        let mut weights: Vec<f64> = owner
            .iter()
            .map(|o| match o {
                Some(p) => parent.weights[*p] / children[*p] as f64,
                None => 0.0,
            })
            .collect();
        if orphans > 0 {
            let share = 1.0 / j_new as f64;
            for (w, o) in weights.iter_mut().zip(&owner) {
                if o.is_none() {
                    *w = share;
                }
            }
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            weights = vec![1.0 / j_new as f64; j_new];
        } else {
            weights.iter_mut().for_each(|w| *w /= total);
        }

        Ok(MixtureState {
            dictionary: dict.clone(),
            supports,
            weights,
            coefficients: CoefficientTable::new(n, j_new, coefs)?,
            noise: parent.noise.clone(),
        })
    }

    fn extend_coefficients(
        &self,
        i: usize,
        dict: &Dictionary,
        pmask: &SupportMask,
        pcoefs: &[f64],
        mask: &SupportMask,
        factor: Option<&PrecisionFactor>,
    ) -> Result<Vec<f64>> {
        let x = self.data.signal(i).into_owned();
        let mut eta = eta_for(dict, pmask, pcoefs);
        let mut out = Vec::with_capacity(mask.popcount());
        for &a in mask.atoms() {
            if let Some(pos) = pmask.position(a) {
                out.push(pcoefs[pos]);
                continue;
            }
            let atom = dict.atom(a).into_owned();
            let c = match self.expfam {
                None => {
                    let (r, da) = match factor {
                        Some(f) => (f.whiten(&(&x - &eta)), f.whiten(&atom)),
                        None => (&x - &eta, atom.clone()),
                    };
                    let nn = da.norm_squared();
                    if nn > 0.0 { r.dot(&da) / nn } else { 0.0 }
                }
                Some(spec) => {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for l in 0..x.len() {
                        num += atom[l] * (x[l] - spec.mean(eta[l]));
                        den += atom[l] * atom[l] * spec.variance(eta[l]).max(crate::expfam::IRLS_WEIGHT_FLOOR);
                    }
                    let base = spec.natural_loglik(x.as_view(), &eta);
                    let mut c = if den > 0.0 { num / den } else { 0.0 };
                    let mut accepted = 0.0;
                    for _ in 0..30 {
                        if spec.natural_loglik(x.as_view(), &(&eta + &atom * c)) >= base {
                            accepted = c;
                            break;
                        }
                        c *= 0.5;
                    }
                    accepted
                }
            };
            eta.axpy(c, &atom, 1.0);
            out.push(c);
        }
        Ok(out)
    }

    fn correlation_factor(&self, omega: f64) -> Result<PrecisionFactor> {
        let (kernel, dist) = (self.kernel.as_ref().unwrap(), self.dist.as_ref().unwrap());
        let r = build_correlation_matrix(kernel, omega, dist)?;
        PrecisionFactor::factorize_with_nugget(&r, self.config.numerics.nugget)
    }

    fn factors_for(&self, state: &MixtureState) -> Result<Option<Vec<Arc<PrecisionFactor>>>> {
        if self.kernel.is_none() {
            return Ok(None);
        }
        let mut cache = None;
        self.refresh_factors(state, &mut cache)?;
        Ok(cache.map(|c| c.factors))
    }

    fn refresh_factors(&self, state: &MixtureState, cache: &mut Option<FactorCache>) -> Result<()> {
        if self.kernel.is_none() {
            return Ok(());
        }
        let omegas: Vec<f64> = state
            .noise
            .iter()
            .map(|nz| nz.omega().ok_or_else(|| MscError::invalid("spatial fit needs ω per signal")))
            .collect::<Result<_>>()?;
        let fresh: Vec<Option<Arc<PrecisionFactor>>> = omegas
            .par_iter()
            .enumerate()
            .map(|(i, &o)| {
                let hit = cache
                    .as_ref()
                    .and_then(|c| (c.omega[i].to_bits() == o.to_bits()).then(|| c.factors[i].clone()));
                match hit {
                    Some(f) => Ok(Some(f)),
                    None => self.correlation_factor(o).map(|f| Some(Arc::new(f))).map_err(|e| e.in_signal(i)),
                }
            })
            .collect::<Result<_>>()?;
        *cache = Some(FactorCache { omega: omegas, factors: fresh.into_iter().map(Option::unwrap).collect() });
        Ok(())
    }

    fn log_weights(&self, state: &MixtureState, cache: &mut Option<FactorCache>) -> Result<DMatrix<f64>> {
        let (n, j, m) = (self.data.len(), state.n_components(), self.data.dim());
        let log_pi: Vec<f64> = state.weights.iter().map(|p| p.ln()).collect();
        let rows: Vec<Vec<f64>> = match self.expfam {
            Some(spec) => (0..n)
                .into_par_iter()
                .map(|i| {
                    let x = self.data.signal(i);
                    (0..j)
                        .map(|jj| log_pi[jj] + self.base_measure[i] + spec.natural_loglik(x, &state.eta(i, jj)))
                        .collect()
                })
                .collect(),
            None => {
                self.refresh_factors(state, cache)?;
                let factors = cache.as_ref().map(|c| c.factors.as_slice());
                let wh = whiten_dataset(self.data, &state.dictionary, factors);
                (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let sigma2 = state.noise[i].sigma2().unwrap_or(f64::NAN);
                        let log_det = wh[i].factor.log_det();
                        state
                            .supports
                            .iter()
                            .enumerate()
                            .map(|(jj, mask)| {
                                let q = wh[i].quad(mask, state.coefficients.get(i, jj));
                                log_pi[jj] + log_density_from_quad(q, sigma2, log_det, m)
                            })
                            .collect()
                    })
                    .collect()
            }
        };
        Ok(DMatrix::from_fn(n, j, |i, jj| rows[i][jj]))
    }

    /// `Σ_i log Σ_j π_j f(x_i | θ_ij)`.
    pub fn log_likelihood(&self, state: &MixtureState) -> Result<f64> {
        loglik_from_log(&self.log_weights(state, &mut None)?)
    }

    /// Posterior responsibilities of the current state.
    pub fn e_step(&self, state: &MixtureState) -> Result<ResponsibilityMatrix> {
        responsibilities_from_log(&self.log_weights(state, &mut None)?)
    }

    /// One M-step given (possibly rejection-controlled) responsibilities.
    pub fn m_step(&self, state: &MixtureState, w: &ResponsibilityMatrix) -> Result<MixtureState> {
        let mut work = self.workspace(state);
        let (next, _) = self.m_step_with(state, w, &mut work)?;
        Ok(next)
    }

    fn workspace(&self, state: &MixtureState) -> Workspace {
        Workspace {
            factors: None,
            histories: vec![ColumnHistory::default(); state.dictionary.len()],
            diag: Diagnostics::default(),
        }
    }

    fn m_step_with(
        &self,
        state: &MixtureState,
        w: &ResponsibilityMatrix,
        work: &mut Workspace,
    ) -> Result<(MixtureState, ResponsibilityMatrix)> {
        let (n, j) = (self.data.len(), state.n_components());
        if w.n_signals() != n || w.n_components() != j {
            return Err(MscError::invalid("responsibility matrix does not match the state"));
        }
        let mut next = state.clone();
        for jj in 0..j {
            next.weights[jj] = (0..n).map(|i| w.get(i, jj)).sum::<f64>() / n as f64;
        }
        match self.expfam {
            None => self.m_step_gaussian(&mut next, w, work)?,
            Some(spec) => self.m_step_expfam(&mut next, w, work, spec)?,
        }

        // Drop components that have lost all weight.
        let floor = self.config.numerics.component_floor / j as f64;
        let keep: Vec<usize> = (0..j).filter(|&jj| next.weights[jj] >= floor).collect();
        let (mut next, w) = if keep.len() < j {
            work.diag.components_removed += j - keep.len();
            (next.retain_components(&keep)?, w.retain_components(&keep))
        } else {
            (next, w.clone())
        };
        self.reinitialize_dead_atoms(&mut next, &w, work)?;
        Ok((next, w))
    }

    fn m_step_gaussian(&self, state: &mut MixtureState, w: &ResponsibilityMatrix, work: &mut Workspace) -> Result<()> {
        self.update_noise(state, w, work)?;
        self.update_coefficients_and_dictionary(state, w, work)
    }

    fn update_noise(&self, state: &mut MixtureState, w: &ResponsibilityMatrix, work: &mut Workspace) -> Result<()> {
        let (n, m) = (self.data.len(), self.data.dim());
        let num = self.config.numerics;

        // σ² then ω, signal by signal.
        self.refresh_factors(state, &mut work.factors)?;
        let factors = work.factors.as_ref().map(|c| c.factors.as_slice());
        let wh = whiten_dataset(self.data, &state.dictionary, factors);
        let st: &MixtureState = state;
        let updates: Vec<(NoiseParams, bool)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let wrow = w.row(i);
                let quads: Vec<f64> = st
                    .supports
                    .iter()
                    .enumerate()
                    .map(|(jj, mask)| if wrow[jj] > 0.0 { wh[i].quad(mask, st.coefficients.get(i, jj)) } else { 0.0 })
                    .collect();
                let sigma2 = sigma2_from_quads(&quads, &wrow, m, num.sigma2_floor).map_err(|e| e.in_signal(i))?;
                match (st.noise[i], &self.kernel, &self.dist) {
                    (NoiseParams::Spatial { omega, .. }, Some(kernel), Some(dist)) => {
                        let x = self.data.signal(i);
                        let residuals = (0..st.n_components())
                            .filter(|&jj| wrow[jj] > 0.0)
                            .map(|jj| (wrow[jj], x - st.eta(i, jj)))
                            .collect();
                        let objective = OmegaObjective::new(kernel, dist, residuals, sigma2).with_nugget(num.nugget);
                        let upd = newton_ascent_step(omega, kernel.omega_lo, kernel.omega_hi, |o| objective.value(o));
                        Ok((NoiseParams::Spatial { sigma2, omega: upd.omega }, upd.newton_rejected))
                    }
                    _ => Ok((NoiseParams::Simple { sigma2 }, false)),
                }
            })
            .collect::<Result<_>>()?;
        for (i, (noise, rejected)) in updates.into_iter().enumerate() {
            state.noise[i] = noise;
            work.diag.newton_rejected += rejected as usize;
        }
        Ok(())
    }

    fn update_coefficients_and_dictionary(
        &self,
        state: &mut MixtureState,
        w: &ResponsibilityMatrix,
        work: &mut Workspace,
    ) -> Result<()> {
        let n = self.data.len();
        let num = self.config.numerics;

        // Coefficients by weighted least squares under the new precisions.
        self.refresh_factors(state, &mut work.factors)?;
        let factors = work.factors.as_ref().map(|c| c.factors.as_slice());
        let wh = whiten_dataset(self.data, &state.dictionary, factors);
        let supports = &state.supports;
        let rows: Vec<Vec<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|i| {
                supports
                    .iter()
                    .map(|mask| wls_from_gram(&wh[i].gram, &wh[i].cross, mask, num.gram_ridge))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| e.in_signal(i))
            })
            .collect::<Result<_>>()?;
        for (i, row) in rows.into_iter().enumerate() {
            for (jj, c) in row.into_iter().enumerate() {
                *state.coefficients.get_mut(i, jj) = c;
            }
        }
        drop(wh);

        // Dictionary, one column at a time.
        let sigma2: Vec<f64> = state.noise.iter().map(|nz| nz.sigma2().unwrap()).collect();
        let inverses: Option<Vec<DMatrix<f64>>> =
            work.factors.as_ref().map(|c| c.factors.par_iter().map(|f| f.inverse()).collect());
        for k in 0..state.dictionary.len() {
            match column_target(k, self.data, state, w, &sigma2, inverses.as_deref(), num.gram_ridge) {
                Ok(col) => {
                    if col.norm() > 0.0 && col.iter().all(|v| v.is_finite()) {
                        crate::gaussian::apply_dictionary_column(state, k, &col)?;
                    } else {
                        work.diag.unused_atom_skips += 1;
                    }
                }
                Err(MscError::AtomUnused(_)) => work.diag.unused_atom_skips += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    fn m_step_expfam(
        &self,
        state: &mut MixtureState,
        w: &ResponsibilityMatrix,
        work: &mut Workspace,
        spec: ExpFamilySpec,
    ) -> Result<()> {
        let n = self.data.len();
        let st: &MixtureState = state;
        let rows: Vec<Vec<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = self.data.signal(i);
                st.supports
                    .iter()
                    .enumerate()
                    .map(|(jj, mask)| {
                        let cur = st.coefficients.get(i, jj);
                        match irls_step_safeguarded(spec, x, &st.dictionary, mask, cur) {
                            Ok(c) => Ok(c),
                            Err(MscError::DegenerateSignal { .. }) => Ok(cur.to_vec()),
                            Err(e) => Err(e.in_signal(i)),
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        for (i, row) in rows.into_iter().enumerate() {
            for (jj, c) in row.into_iter().enumerate() {
                *state.coefficients.get_mut(i, jj) = c;
            }
        }
        for k in 0..state.dictionary.len() {
            if !state.supports.iter().any(|m| m.contains(k)) {
                work.diag.unused_atom_skips += 1;
                continue;
            }
            let step = gradient_update_column(k, self.data, state, w, spec, &mut work.histories[k])?;
            if !step.accepted {
                work.diag.gradient_rejected += 1;
            }
        }
        Ok(())
    }

    /// Atoms outside every support are replaced by the normalized signals
    /// with the worst posterior-mean reconstruction.
    fn reinitialize_dead_atoms(&self, state: &mut MixtureState, w: &ResponsibilityMatrix, work: &mut Workspace) -> Result<()> {
        let used = state.used_atoms();
        let dead: Vec<usize> = (0..used.len()).filter(|&k| !used[k]).collect();
        if dead.is_empty() {
            return Ok(());
        }
        let errors: Vec<f64> = (0..self.data.len())
            .into_par_iter()
            .map(|i| {
                let x = self.data.signal(i);
                let mut recon = DVector::zeros(x.len());
                for jj in 0..state.n_components() {
                    let wij = w.get(i, jj);
                    if wij > 0.0 {
                        let eta = state.eta(i, jj);
                        let mean = match self.expfam {
                            Some(spec) => eta.map(|e| spec.mean(e)),
                            None => eta,
                        };
                        recon.axpy(wij, &mean, 1.0);
                    }
                }
                (x - recon).norm_squared()
            })
            .collect();
        let mut order: Vec<usize> = (0..errors.len()).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        let mut candidates = order.into_iter();
        for k in dead {
            for i in candidates.by_ref() {
                let v = self.atom_source(i);
                if v.norm() > 0.0 {
                    state.dictionary.set_atom_normalized(k, &v)?;
                    work.diag.atoms_reinitialized += 1;
                    break;
                }
            }
        }
        Ok(())
    }

    /// Alternates E- and M-steps on a fixed support set until the relative
    /// log-likelihood change drops below the tolerance. When rejection
    /// control was active the best observed iterate is returned.
    pub fn run_em_fixed_d(&self, state: MixtureState, rng: &mut impl Rng) -> Result<EmRun> {
        let mut work = self.workspace(&state);
        let mut state = state;
        let mut lp = self.log_weights(&state, &mut work.factors)?;
        let mut ll = loglik_from_log(&lp)?;
        let mut trace = vec![ll];
        let mut best: Option<(f64, MixtureState)> = None;
        let mut rejection_used = false;
        let mut converged = false;
        let mut iterations = 0;
        for it in 0..self.config.max_iter {
            let w = responsibilities_from_log(&lp)?;
            let c = threshold_schedule(it, &self.config.rejection);
            let w_star = if c > 0.0 {
                if !rejection_used {
                    best = Some((ll, state.clone()));
                }
                rejection_used = true;
                rejection_control(&w, c, rng)
            } else {
                w
            };
            let (next, _) = self.m_step_with(&state, &w_star, &mut work)?;
            state = next;
            lp = self.log_weights(&state, &mut work.factors)?;
            let new_ll = loglik_from_log(&lp)?;
            trace.push(new_ll);
            iterations += 1;
            if let Some((b, _)) = &best {
                if new_ll > *b {
                    best = Some((new_ll, state.clone()));
                }
            }
            let rel = (new_ll - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
            ll = new_ll;
            if rel < self.config.tol {
                converged = true;
                break;
            }
        }
        if let Some((b, s)) = best {
            if b > ll {
                state = s;
            }
        }
        work.diag.em_iterations = iterations;
        Ok(EmRun { state, trace, iterations, converged, rejection_used, diagnostics: work.diag })
    }

    /// The full sequential search over sparsity levels.
    pub fn fit(&self) -> Result<FitResult> {
        let (n, m, k) = (self.data.len(), self.data.dim(), self.config.n_atoms);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let dictionary = self.initial_dictionary(&mut rng)?;
        let mut diagnostics = Diagnostics::default();
        let mut levels = Vec::new();
        let mut chosen: Option<(MixtureState, usize, f64)> = None;

        for d in 1..=self.config.d_max {
            let start = match &chosen {
                None => self.initialize_state(dictionary.clone(), init_support_set(k)?)?,
                Some((prev, _, _)) => {
                    let expanded = expand_support_set(&prev.supports)?;
                    self.grow_state(prev, expanded)?
                }
            };
            let expanded = start.n_components();
            let run = self.run_em_fixed_d(start, &mut rng)?;
            diagnostics.absorb(&run.diagnostics);
            let w = self.e_step(&run.state)?;
            let keep = argmax_components(&run.state.supports, &w)?;
            let pruned = run.state.retain_components(&keep)?;
            let loglik = self.log_likelihood(&pruned)?;
            let q = count_parameters(self.config.family, &pruned.supports, n, m, k)?;
            let b = bic(loglik, q, n, m);
            levels.push(LevelSummary {
                d,
                loglik,
                bic: b,
                n_params: q,
                expanded,
                pruned: pruned.n_components(),
                trace: run.trace,
            });
            if self.config.stop_on_bic {
                if let Some((_, _, prev_bic)) = &chosen {
                    if b > *prev_bic {
                        break;
                    }
                }
            }
            if d == self.config.d_max {
                diagnostics.d_max_reached = true;
            }
            chosen = Some((pruned, d, b));
        }

        let (state, chosen_d, _) = chosen.expect("at least one level is fitted");
        let responsibilities = self.e_step(&state)?;
        let assignments = responsibilities.assignments();
        Ok(FitResult { state, chosen_d, levels, responsibilities, assignments, diagnostics })
    }
}

/// Fits a mixture sparse coding model to `data`.
pub fn fit_msc(data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    Fitter::new(data, config.clone())?.fit()
}

/// Per-signal posterior-mean reconstruction `Σ_j w_ij g(η_ij)`.
pub fn posterior_mean(state: &MixtureState, w: &ResponsibilityMatrix, family: ModelFamily) -> DMatrix<f64> {
    let (m, n) = (state.dictionary.dim(), state.n_signals());
    let cols: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = DVector::zeros(m);
            for j in 0..state.n_components() {
                let wij = w.get(i, j);
                if wij > 0.0 {
                    let eta = state.eta(i, j);
                    let mean = match family {
                        ModelFamily::ExpFamily(spec) => eta.map(|e| spec.mean(e)),
                        _ => eta,
                    };
                    acc.axpy(wij, &mean, 1.0);
                }
            }
            acc
        })
        .collect();
    DMatrix::from_columns(&cols)
}

/// Reconstruction from the most responsible component of each signal.
pub fn hard_reconstruction(state: &MixtureState, w: &ResponsibilityMatrix, family: ModelFamily) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..state.n_signals())
        .map(|i| {
            let eta = state.eta(i, w.argmax(i));
            match family {
                ModelFamily::ExpFamily(spec) => eta.map(|e| spec.mean(e)),
                _ => eta,
            }
        })
        .collect();
    DMatrix::from_columns(&cols)
}

//! Domain types shared by every model family and the support-set algebra
//! used by the sequential sparsity search.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexSet;
use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{MscError, Result};
use crate::expfam::ExpFamilySpec;

/// Which likelihood a fit uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    /// Independent Gaussian noise with per-signal variance.
    SimpleGaussian,
    /// Gaussian noise with a per-signal spatial/temporal correlation matrix.
    SpatialGaussian,
    /// Poisson or binomial counts with a canonical link.
    ExpFamily(ExpFamilySpec),
}

impl ModelFamily {
    pub fn is_gaussian(&self) -> bool {
        !matches!(self, ModelFamily::ExpFamily(_))
    }

    pub fn name(&self) -> String {
        match self {
            ModelFamily::SimpleGaussian => "gaussian".into(),
            ModelFamily::SpatialGaussian => "spatial".into(),
            ModelFamily::ExpFamily(ExpFamilySpec::Poisson) => "poisson".into(),
            ModelFamily::ExpFamily(ExpFamilySpec::Binomial { trials }) => {
                format!("binomial:{trials}")
            }
        }
    }
}

impl FromStr for ModelFamily {
    type Err = MscError;

    /// Accepts `gaussian`/`simple`, `spatial`, `poisson`, `binomial` and
    /// `binomial:<trials>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "gaussian" | "simple" | "simple-gaussian" => Ok(ModelFamily::SimpleGaussian),
            "spatial" | "spatial-gaussian" => Ok(ModelFamily::SpatialGaussian),
            "poisson" => Ok(ModelFamily::ExpFamily(ExpFamilySpec::Poisson)),
            "binomial" | "bernoulli" => {
                Ok(ModelFamily::ExpFamily(ExpFamilySpec::Binomial { trials: 1 }))
            }
            other => {
                if let Some(t) = other.strip_prefix("binomial:") {
                    let trials: u32 = t
                        .parse()
                        .map_err(|_| MscError::invalid(format!("bad binomial trials `{t}`")))?;
                    ExpFamilySpec::binomial(trials).map(ModelFamily::ExpFamily)
                } else {
                    Err(MscError::invalid(format!("unknown model family `{other}`")))
                }
            }
        }
    }
}

/// How the values of a dataset may be interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Real,
    /// Nonnegative integer counts, optionally bounded by a binomial trial count.
    Counts { trials: Option<u32> },
}

/// A collection of `n` signals of common dimension `m`.
///
/// Signals are stored as the columns of an `m × n` matrix. A spatial fit
/// additionally needs the `m` measurement locations, shared by every signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    values: DMatrix<f64>,
    kind: DataKind,
    locations: Option<DMatrix<f64>>,
}

impl Dataset {
    /// Builds a dataset from an `m × n` matrix (one signal per column).
    pub fn new(values: DMatrix<f64>, kind: DataKind) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(MscError::invalid("signals must have dimension m >= 1"));
        }
        if values.ncols() == 0 {
            return Err(MscError::invalid("dataset must contain at least one signal"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MscError::invalid("signal values must be finite"));
        }
        if let DataKind::Counts { trials } = kind {
            for (idx, &v) in values.iter().enumerate() {
                let signal = idx / values.nrows();
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(MscError::invalid(format!(
                        "signal {signal}: count {v} is not a nonnegative integer"
                    )));
                }
                if let Some(t) = trials {
                    if v > t as f64 {
                        return Err(MscError::invalid(format!(
                            "signal {signal}: count {v} exceeds {t} trials"
                        )));
                    }
                }
            }
        }
        Ok(Self { values, kind, locations: None })
    }

    /// Builds a dataset from row-per-signal data.
    pub fn from_rows(rows: &[Vec<f64>], kind: DataKind) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(MscError::invalid("dataset must contain at least one signal"));
        }
        let m = rows[0].len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(MscError::invalid("all signals must share dimension m"));
        }
        let values = DMatrix::from_fn(m, n, |l, i| rows[i][l]);
        Self::new(values, kind)
    }

    /// Attaches the `m × p` location matrix.
    pub fn with_locations(mut self, locations: DMatrix<f64>) -> Result<Self> {
        if locations.nrows() != self.dim() {
            return Err(MscError::invalid(format!(
                "locations have {} rows but signals have dimension {}",
                locations.nrows(),
                self.dim()
            )));
        }
        if locations.ncols() == 0 || locations.iter().any(|v| !v.is_finite()) {
            return Err(MscError::invalid("locations must be finite with p >= 1 coordinates"));
        }
        self.locations = Some(locations);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    /// Signal dimension `m`.
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn signal(&self, i: usize) -> DVectorView<'_, f64> {
        self.values.column(i)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn locations(&self) -> Option<&DMatrix<f64>> {
        self.locations.as_ref()
    }

    /// Row-per-signal copy, the orientation used by the matrix file format.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.signal(i).iter().copied().collect()).collect()
    }
}

/// An `m × K` matrix of unit-norm atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
}

impl Dictionary {
    /// Normalizes every column; fails on an empty matrix or a zero column.
    pub fn new(mut atoms: DMatrix<f64>) -> Result<Self> {
        if atoms.ncols() == 0 || atoms.nrows() == 0 {
            return Err(MscError::invalid("dictionary needs m >= 1 and K >= 1"));
        }
        for mut col in atoms.column_iter_mut() {
            let norm = col.norm();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(MscError::invalid("dictionary atoms must be nonzero and finite"));
            }
            col /= norm;
        }
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn len(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.ncols() == 0
    }

    pub fn atom(&self, k: usize) -> DVectorView<'_, f64> {
        self.atoms.column(k)
    }

    /// Columns selected by a support mask, in ascending atom order.
    pub fn select(&self, mask: &SupportMask) -> DMatrix<f64> {
        self.atoms.select_columns(mask.atoms())
    }

    /// Replaces atom `k` by `column / ‖column‖` and returns the norm, which
    /// the caller must push into the coefficients of atom `k`.
    pub(crate) fn set_atom_normalized(&mut self, k: usize, column: &DVector<f64>) -> Result<f64> {
        let norm = column.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(MscError::numeric(format!("atom {k} collapsed to zero")));
        }
        self.atoms.set_column(k, &(column / norm));
        Ok(norm)
    }
}

/// A length-`K` binary vector selecting the active atoms of one component.
///
/// Stored canonically as the sorted list of active atom indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SupportMask {
    atoms: Vec<usize>,
    k: usize,
}

impl SupportMask {
    pub fn new(k: usize, atoms: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut atoms: Vec<usize> = atoms.into_iter().collect();
        atoms.sort_unstable();
        atoms.dedup();
        if atoms.is_empty() {
            return Err(MscError::invalid("support mask must select at least one atom"));
        }
        if let Some(&bad) = atoms.iter().find(|&&a| a >= k) {
            return Err(MscError::invalid(format!("atom index {bad} out of range for K={k}")));
        }
        Ok(Self { atoms, k })
    }

    pub fn singleton(k: usize, atom: usize) -> Result<Self> {
        Self::new(k, [atom])
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        Self::new(bits.len(), bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i))
    }

    pub fn bits(&self) -> Vec<bool> {
        let mut bits = vec![false; self.k];
        for &a in &self.atoms {
            bits[a] = true;
        }
        bits
    }

    pub fn atoms(&self) -> &[usize] {
        &self.atoms
    }

    pub fn popcount(&self) -> usize {
        self.atoms.len()
    }

    /// Length `K` of the underlying binary vector.
    pub fn width(&self) -> usize {
        self.k
    }

    pub fn contains(&self, atom: usize) -> bool {
        self.atoms.binary_search(&atom).is_ok()
    }

    /// Position of `atom` within the on-support coefficient vector.
    pub fn position(&self, atom: usize) -> Option<usize> {
        self.atoms.binary_search(&atom).ok()
    }

    /// `γ + e_l ∘ (1 − γ)`: the mask with atom `l` switched on.
    pub fn with_atom(&self, l: usize) -> Self {
        let mut next = self.clone();
        if let Err(pos) = next.atoms.binary_search(&l) {
            next.atoms.insert(pos, l);
        }
        next
    }

    pub fn is_subset_of(&self, other: &SupportMask) -> bool {
        self.atoms.iter().all(|a| other.contains(*a))
    }

    /// Embeds on-support coefficients into a length-`K` vector.
    pub fn embed(&self, on_support: &[f64]) -> DVector<f64> {
        let mut full = DVector::zeros(self.k);
        for (&a, &v) in self.atoms.iter().zip(on_support) {
            full[a] = v;
        }
        full
    }
}

impl fmt::Display for SupportMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.bits() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for SupportMask {
    type Err = MscError;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(MscError::Format(format!("bad mask character `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bits(&bits)
    }
}

/// Ordered, duplicate-free set of candidate supports at sparsity level `d`.
///
/// Component `j` of a mixture is the `j`-th mask in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    masks: IndexSet<SupportMask>,
    d: usize,
    k: usize,
}

impl SupportSet {
    /// Collects masks (dropping duplicates) and checks them against `k` and `d`.
    pub fn from_masks(k: usize, d: usize, masks: impl IntoIterator<Item = SupportMask>) -> Result<Self> {
        let masks: IndexSet<SupportMask> = masks.into_iter().collect();
        if masks.is_empty() {
            return Err(MscError::invalid("support set must not be empty"));
        }
        for mask in &masks {
            if mask.width() != k {
                return Err(MscError::invalid("mask width does not match K"));
            }
            if mask.popcount() > d {
                return Err(MscError::invalid(format!(
                    "mask {mask} has more than d={d} active atoms"
                )));
            }
        }
        Ok(Self { masks, d, k })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn sparsity(&self) -> usize {
        self.d
    }

    pub fn atom_count(&self) -> usize {
        self.k
    }

    pub fn get(&self, j: usize) -> &SupportMask {
        &self.masks[j]
    }

    pub fn index_of(&self, mask: &SupportMask) -> Option<usize> {
        self.masks.get_index_of(mask)
    }

    pub fn contains(&self, mask: &SupportMask) -> bool {
        self.masks.contains(mask)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SupportMask> {
        self.masks.iter()
    }

    /// Total number of active atoms summed over every mask.
    pub fn total_popcount(&self) -> usize {
        self.masks.iter().map(SupportMask::popcount).sum()
    }

    /// Keeps the masks at the given (ascending) component indices.
    pub(crate) fn retain_indices(&self, keep: &[usize]) -> Result<Self> {
        Self::from_masks(self.k, self.d, keep.iter().map(|&j| self.masks[j].clone()))
    }
}

/// `S(1) = {e_1, …, e_K}`.
pub fn init_support_set(k: usize) -> Result<SupportSet> {
    if k == 0 {
        return Err(MscError::invalid("atom count K must be at least 1"));
    }
    let masks = (0..k).map(|a| SupportMask::singleton(k, a)).collect::<Result<Vec<_>>>()?;
    SupportSet::from_masks(k, 1, masks)
}

/// Grows `S(d-1)` into `S(d)`: every mask plus every single extra atom.
pub fn expand_support_set(prev: &SupportSet) -> Result<SupportSet> {
    expand_with_parents(prev).map(|(set, _)| set)
}

/// Like [`expand_support_set`] and also returns, for every child, the index
/// of the first parent that generated it.
pub(crate) fn expand_with_parents(prev: &SupportSet) -> Result<(SupportSet, Vec<usize>)> {
    if prev.is_empty() {
        return Err(MscError::invalid("cannot expand an empty support set"));
    }
    let k = prev.atom_count();
    let mut masks = IndexSet::new();
    let mut parents = Vec::new();
    for (p, gamma) in prev.iter().enumerate() {
        for l in 0..k {
            if masks.insert(gamma.with_atom(l)) {
                parents.push(p);
            }
        }
    }
    let set = SupportSet::from_masks(k, prev.sparsity() + 1, masks)?;
    Ok((set, parents))
}

/// Keeps the masks that are the most responsible component of at least one
/// signal. Ties go to the lowest component index.
pub fn prune_support_set(set: &SupportSet, w: &ResponsibilityMatrix) -> Result<SupportSet> {
    let keep = argmax_components(set, w)?;
    set.retain_indices(&keep)
}

/// Sorted, deduplicated argmax component indices of `w`.
pub(crate) fn argmax_components(set: &SupportSet, w: &ResponsibilityMatrix) -> Result<Vec<usize>> {
    if w.n_signals() == 0 || w.n_components() == 0 {
        return Err(MscError::invalid("responsibility matrix is empty"));
    }
    if w.n_components() != set.len() {
        return Err(MscError::invalid(format!(
            "responsibility matrix has {} columns but the support set has {} masks",
            w.n_components(),
            set.len()
        )));
    }
    let mut used = vec![false; set.len()];
    for i in 0..w.n_signals() {
        used[w.argmax(i)] = true;
    }
    Ok(used.iter().enumerate().filter(|(_, &u)| u).map(|(j, _)| j).collect())
}

/// Number of free parameters `q(d)` entering the BIC.
pub fn count_parameters(family: ModelFamily, set: &SupportSet, n: usize, m: usize, k: usize) -> Result<usize> {
    if set.is_empty() {
        return Err(MscError::invalid("support set must not be empty"));
    }
    let per_signal = match family {
        ModelFamily::SimpleGaussian => 2,
        ModelFamily::SpatialGaussian => 3,
        ModelFamily::ExpFamily(_) => 1,
    };
    Ok(m * k + per_signal * n + n * set.total_popcount())
}

/// Per-signal noise parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseParams {
    Simple { sigma2: f64 },
    Spatial { sigma2: f64, omega: f64 },
    ExpFamily { dispersion: f64 },
}

impl NoiseParams {
    pub fn sigma2(&self) -> Option<f64> {
        match *self {
            NoiseParams::Simple { sigma2 } | NoiseParams::Spatial { sigma2, .. } => Some(sigma2),
            NoiseParams::ExpFamily { .. } => None,
        }
    }

    pub fn omega(&self) -> Option<f64> {
        match *self {
            NoiseParams::Spatial { omega, .. } => Some(omega),
            _ => None,
        }
    }
}

/// Per-(signal, component) coefficients, stored on-support only so the
/// zero-off-support invariant holds by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientTable {
    n: usize,
    j: usize,
    data: Vec<Vec<f64>>,
}

impl CoefficientTable {
    pub fn new(n: usize, j: usize, data: Vec<Vec<f64>>) -> Result<Self> {
        if data.len() != n * j {
            return Err(MscError::invalid("coefficient table has the wrong number of cells"));
        }
        Ok(Self { n, j, data })
    }

    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        &self.data[i * self.j + j]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut Vec<f64> {
        &mut self.data[i * self.j + j]
    }

    /// Coefficients of signal `i` across all components.
    pub fn row(&self, i: usize) -> &[Vec<f64>] {
        &self.data[i * self.j..(i + 1) * self.j]
    }

    pub(crate) fn rows_mut(&mut self) -> std::slice::ChunksMut<'_, Vec<f64>> {
        self.data.chunks_mut(self.j)
    }

    pub fn n_signals(&self) -> usize {
        self.n
    }

    pub fn n_components(&self) -> usize {
        self.j
    }

    fn retain_components(&self, keep: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.n * keep.len());
        for i in 0..self.n {
            for &j in keep {
                data.push(self.get(i, j).to_vec());
            }
        }
        Self { n: self.n, j: keep.len(), data }
    }
}

/// The full parameter set `θ` of a fitted or in-progress mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureState {
    pub dictionary: Dictionary,
    pub supports: SupportSet,
    /// Mixture weights `π_j`, one per support mask.
    pub weights: Vec<f64>,
    pub coefficients: CoefficientTable,
    pub noise: Vec<NoiseParams>,
}

impl MixtureState {
    pub fn n_signals(&self) -> usize {
        self.coefficients.n_signals()
    }

    pub fn n_components(&self) -> usize {
        self.supports.len()
    }

    /// Length-`K` coefficient vector `α_ij`, zero off-support.
    pub fn full_coefficients(&self, i: usize, j: usize) -> DVector<f64> {
        self.supports.get(j).embed(self.coefficients.get(i, j))
    }

    /// Component mean in natural-parameter space, `η_ij = D(α_ij ∘ γ_j)`.
    pub fn eta(&self, i: usize, j: usize) -> DVector<f64> {
        eta_for(&self.dictionary, self.supports.get(j), self.coefficients.get(i, j))
    }

    /// Checks the simplex, support and shape invariants.
    pub fn validate(&self) -> Result<()> {
        let j = self.n_components();
        if self.weights.len() != j || self.coefficients.n_components() != j {
            return Err(MscError::invalid("weights/coefficients disagree with the support set"));
        }
        if self.noise.len() != self.n_signals() {
            return Err(MscError::invalid("noise parameters must be given per signal"));
        }
        if self.supports.atom_count() != self.dictionary.len() {
            return Err(MscError::invalid("support width does not match the dictionary"));
        }
        let total: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(MscError::invalid("mixture weights must lie on the simplex"));
        }
        for i in 0..self.n_signals() {
            for jj in 0..j {
                if self.coefficients.get(i, jj).len() != self.supports.get(jj).popcount() {
                    return Err(MscError::invalid("coefficient length does not match its support"));
                }
            }
        }
        for noise in &self.noise {
            let ok = match *noise {
                NoiseParams::Simple { sigma2 } => sigma2 > 0.0,
                NoiseParams::Spatial { sigma2, omega } => sigma2 > 0.0 && omega > 0.0,
                NoiseParams::ExpFamily { dispersion } => dispersion > 0.0,
            };
            if !ok {
                return Err(MscError::invalid("noise parameters must be positive"));
            }
        }
        Ok(())
    }

    /// Keeps the listed components (ascending) and renormalizes `π`.
    pub fn retain_components(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(MscError::numeric("every mixture component was removed"));
        }
        let mut weights: Vec<f64> = keep.iter().map(|&j| self.weights[j]).collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            let uniform = 1.0 / keep.len() as f64;
            weights.iter_mut().for_each(|p| *p = uniform);
        } else {
            weights.iter_mut().for_each(|p| *p /= total);
        }
        Ok(Self {
            dictionary: self.dictionary.clone(),
            supports: self.supports.retain_indices(keep)?,
            weights,
            coefficients: self.coefficients.retain_components(keep),
            noise: self.noise.clone(),
        })
    }

    /// Atoms that appear in at least one component's support.
    pub fn used_atoms(&self) -> Vec<bool> {
        let mut used = vec![false; self.dictionary.len()];
        for mask in self.supports.iter() {
            for &a in mask.atoms() {
                used[a] = true;
            }
        }
        used
    }
}

pub(crate) fn eta_for(dictionary: &Dictionary, mask: &SupportMask, coefs: &[f64]) -> DVector<f64> {
    let mut eta = DVector::zeros(dictionary.dim());
    for (&a, &c) in mask.atoms().iter().zip(coefs) {
        eta.axpy(c, &dictionary.atom(a), 1.0);
    }
    eta
}

/// Posterior component weights `w_ij`, one row per signal.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponsibilityMatrix {
    weights: DMatrix<f64>,
}

impl ResponsibilityMatrix {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if weights.iter().any(|&w| !(0.0..=1.0 + 1e-12).contains(&w)) {
            return Err(MscError::invalid("responsibilities must lie in [0, 1]"));
        }
        Ok(Self { weights })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let j = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != j) {
            return Err(MscError::invalid("ragged responsibility rows"));
        }
        Self::new(DMatrix::from_fn(n, j, |i, jj| rows[i][jj]))
    }

    pub(crate) fn from_matrix_unchecked(weights: DMatrix<f64>) -> Self {
        Self { weights }
    }

    pub fn n_signals(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.weights.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.weights.row(i).iter().copied().collect()
    }

    /// Most responsible component of signal `i`; lowest index wins ties.
    pub fn argmax(&self, i: usize) -> usize {
        let mut best = 0;
        let mut best_w = f64::NEG_INFINITY;
        for (j, &w) in self.weights.row(i).iter().enumerate() {
            if w > best_w {
                best = j;
                best_w = w;
            }
        }
        best
    }

    pub fn assignments(&self) -> Vec<usize> {
        (0..self.n_signals()).map(|i| self.argmax(i)).collect()
    }

    pub(crate) fn retain_components(&self, keep: &[usize]) -> Self {
        Self { weights: self.weights.select_columns(keep) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(s: &str) -> SupportMask {
        s.parse().unwrap()
    }

    fn masks(set: &SupportSet) -> Vec<String> {
        set.iter().map(|m| m.to_string()).collect()
    }

    #[test]
    fn init_support_set_gives_unit_vectors() {
        assert_eq!(masks(&init_support_set(3).unwrap()), ["100", "010", "001"]);
        assert_eq!(masks(&init_support_set(1).unwrap()), ["1"]);
        let s = init_support_set(30).unwrap();
        assert_eq!(s.len(), 30);
        assert!(s.iter().all(|m| m.popcount() == 1));
        assert_eq!(s.sparsity(), 1);
        assert!(matches!(init_support_set(0), Err(MscError::InvalidArgument(_))));
    }

    #[test]
    fn expand_examples() {
        let prev = SupportSet::from_masks(3, 1, [mask("100")]).unwrap();
        assert_eq!(masks(&expand_support_set(&prev).unwrap()), ["100", "110", "101"]);

        let prev = SupportSet::from_masks(2, 1, [mask("10"), mask("01")]).unwrap();
        let next = expand_support_set(&prev).unwrap();
        assert_eq!(masks(&next), ["10", "11", "01"]);
        assert_eq!(next.sparsity(), 2);

        let prev = init_support_set(1).unwrap();
        assert_eq!(masks(&expand_support_set(&prev).unwrap()), ["1"]);
    }

    #[test]
    fn expand_records_first_parent() {
        let prev = SupportSet::from_masks(2, 1, [mask("10"), mask("01")]).unwrap();
        let (_, parents) = expand_with_parents(&prev).unwrap();
        assert_eq!(parents, [0, 0, 1]);
    }

    #[test]
    fn prune_examples() {
        let set = SupportSet::from_masks(2, 1, [mask("10"), mask("01")]).unwrap();
        let w = ResponsibilityMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        assert_eq!(masks(&prune_support_set(&set, &w).unwrap()), ["10", "01"]);

        let w = ResponsibilityMatrix::from_rows(&[vec![0.9, 0.1], vec![0.7, 0.3]]).unwrap();
        assert_eq!(masks(&prune_support_set(&set, &w).unwrap()), ["10"]);

        let w = ResponsibilityMatrix::from_rows(&[vec![0.9, 0.1], vec![0.7, 0.3], vec![0.5, 0.5]])
            .unwrap();
        assert_eq!(w.argmax(2), 0);
        assert_eq!(masks(&prune_support_set(&set, &w).unwrap()), ["10"]);

        let empty = ResponsibilityMatrix::from_rows(&[]).unwrap();
        assert!(matches!(prune_support_set(&set, &empty), Err(MscError::InvalidArgument(_))));
    }

    #[test]
    fn parameter_counts() {
        let set = SupportSet::from_masks(2, 1, [mask("10"), mask("01")]).unwrap();
        assert_eq!(count_parameters(ModelFamily::SimpleGaussian, &set, 3, 4, 2).unwrap(), 20);
        assert_eq!(count_parameters(ModelFamily::SpatialGaussian, &set, 3, 4, 2).unwrap(), 23);
        let ex = ModelFamily::ExpFamily(ExpFamilySpec::Poisson);
        assert_eq!(count_parameters(ex, &set, 3, 4, 2).unwrap(), 17);
        assert!("weibull".parse::<ModelFamily>().is_err());
    }

    #[test]
    fn mask_text_round_trip_and_empty_rejected() {
        assert_eq!(mask("0110").atoms(), &[1, 2]);
        assert!("000".parse::<SupportMask>().is_err());
        assert!("01x".parse::<SupportMask>().is_err());
    }

    #[test]
    fn dataset_validation() {
        let rows = vec![vec![1.0, 2.0], vec![0.0, 3.0]];
        assert!(Dataset::from_rows(&rows, DataKind::Counts { trials: None }).is_ok());
        assert!(Dataset::from_rows(&rows, DataKind::Counts { trials: Some(2) }).is_err());
        assert!(Dataset::from_rows(&[vec![-1.0]], DataKind::Counts { trials: None }).is_err());
        assert!(Dataset::from_rows(&[vec![0.5]], DataKind::Counts { trials: None }).is_err());
        assert!(Dataset::from_rows(&[vec![1.0], vec![1.0, 2.0]], DataKind::Real).is_err());
        let d = Dataset::from_rows(&rows, DataKind::Real).unwrap();
        assert!(d.clone().with_locations(DMatrix::zeros(3, 2)).is_err());
        assert!(d.with_locations(DMatrix::zeros(2, 2)).is_ok());
    }

    fn arb_set() -> impl Strategy<Value = SupportSet> {
        (1usize..6).prop_flat_map(|k| {
            proptest::collection::vec(proptest::collection::vec(any::<bool>(), k), 1..6).prop_filter_map(
                "needs a nonempty mask",
                move |rows| {
                    let masks: Vec<SupportMask> =
                        rows.iter().filter_map(|b| SupportMask::from_bits(b).ok()).collect();
                    let d = masks.iter().map(SupportMask::popcount).max()?;
                    SupportSet::from_masks(k, d, masks).ok()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn expansion_is_monotone_and_bounded(prev in arb_set()) {
            let next = expand_support_set(&prev).unwrap();
            prop_assert!(prev.iter().all(|m| next.contains(m)));
            prop_assert!(next.len() <= prev.len() * (prev.atom_count() + 1));
            prop_assert!(next.iter().all(|m| m.popcount() >= 1 && m.popcount() <= next.sparsity()));
        }

        #[test]
        fn pruning_is_a_small_subset(prev in arb_set(), seed in any::<u64>(), n in 1usize..8) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let j = prev.len();
            let rows: Vec<Vec<f64>> = (0..n).map(|_| {
                let raw: Vec<f64> = (0..j).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            }).collect();
            let w = ResponsibilityMatrix::from_rows(&rows).unwrap();
            let pruned = prune_support_set(&prev, &w).unwrap();
            prop_assert!(pruned.iter().all(|m| prev.contains(m)));
            prop_assert!(pruned.len() <= n.min(prev.len()));
        }

        #[test]
        fn parameter_count_increases_with_popcount(prev in arb_set(), n in 1usize..50, m in 1usize..50) {
            let k = prev.atom_count();
            let next = expand_support_set(&prev).unwrap();
            for family in [ModelFamily::SimpleGaussian, ModelFamily::SpatialGaussian,
                           ModelFamily::ExpFamily(ExpFamilySpec::Poisson)] {
                let a = count_parameters(family, &prev, n, m, k).unwrap();
                let b = count_parameters(family, &next, n, m, k).unwrap();
                prop_assert_eq!(next.total_popcount() > prev.total_popcount(), b > a);
                prop_assert_eq!(next.total_popcount() == prev.total_popcount(), b == a);
            }
        }
    }
}

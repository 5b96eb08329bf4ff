//! OMP-ALS: greedy orthogonal matching pursuit coding alternated with
//! per-atom least-squares dictionary updates. A classical comparator for
//! the mixture fits.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{solve_spd, GRAM_RIDGE};
use crate::model::{Dataset, Dictionary};
use crate::{MscError, Result};

const CORR_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub n_atoms: usize,
    pub sparsity: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(n_atoms: usize, sparsity: usize) -> Self {
        BaselineConfig { n_atoms, sparsity, iterations: 30, seed: 0 }
    }

    pub fn validate(&self, m: usize, n: usize) -> Result<()> {
        if self.n_atoms == 0 || self.sparsity == 0 {
            return Err(MscError::invalid("K and d must be positive"));
        }
        if self.sparsity > m || self.sparsity > self.n_atoms {
            return Err(MscError::invalid(format!("sparsity {} exceeds min(m, K)", self.sparsity)));
        }
        if n == 0 {
            return Err(MscError::invalid("no signals"));
        }
        Ok(())
    }
}

/// Sparse code: selected atoms in selection order and their coefficients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseCode {
    pub atoms: Vec<usize>,
    pub coefs: Vec<f64>,
}

impl SparseCode {
    pub fn to_dense(&self, k: usize) -> DVector<f64> {
        let mut v = DVector::zeros(k);
        for (&a, &c) in self.atoms.iter().zip(&self.coefs) {
            v[a] += c;
        }
        v
    }

    pub fn reconstruct(&self, dict: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(dict.nrows());
        for (&a, &c) in self.atoms.iter().zip(&self.coefs) {
            out.axpy(c, &dict.column(a), 1.0);
        }
        out
    }

    fn residual_sq(&self, x: DVectorView<f64>, dict: &DMatrix<f64>) -> f64 {
        (x - self.reconstruct(dict)).norm_squared()
    }
}

/// Orthogonal matching pursuit with at most `d` atoms. Stops early once
/// no atom correlates with the residual.
pub fn omp_encode(x: DVectorView<f64>, dict: &DMatrix<f64>, d: usize) -> Result<SparseCode> {
    if x.len() != dict.nrows() {
        return Err(MscError::invalid("signal length does not match the dictionary"));
    }
    let scale = x.norm().max(1.0);
    let mut code = SparseCode::default();
    let mut residual = x.into_owned();
    for _ in 0..d.min(dict.ncols()) {
        let corr = dict.tr_mul(&residual);
        let best = (0..dict.ncols())
            .filter(|k| !code.atoms.contains(k))
            .max_by(|&a, &b| corr[a].abs().total_cmp(&corr[b].abs()).then(b.cmp(&a)));
        let Some(best) = best else { break };
        if corr[best].abs() <= CORR_EPS * scale {
            break;
        }
        code.atoms.push(best);
        let sub = DMatrix::from_columns(&code.atoms.iter().map(|&a| dict.column(a)).collect::<Vec<_>>());
        let g = sub.tr_mul(&sub);
        let b = sub.tr_mul(&x);
        code.coefs = solve_spd(&g, &b, GRAM_RIDGE)?.as_slice().to_vec();
        residual = x - &sub * DVector::from_column_slice(&code.coefs);
    }
    Ok(code)
}

/// Squared-error objective `Σ_i ‖x_i − D c_i‖²`.
pub fn baseline_objective(data: &Dataset, dict: &DMatrix<f64>, codes: &[SparseCode]) -> f64 {
    codes.iter().enumerate().map(|(i, c)| c.residual_sq(data.signal(i), dict)).sum()
}

#[derive(Clone, Debug)]
pub struct BaselineFit {
    pub dictionary: Dictionary,
    pub codes: Vec<SparseCode>,
    /// Objective after initial coding and after each outer iteration.
    pub objective: Vec<f64>,
    pub atoms_reinitialized: usize,
}

impl BaselineFit {
    /// Reconstructed signals as an `m × n` matrix.
    pub fn reconstruction(&self) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self.codes.iter().map(|c| c.reconstruct(self.dictionary.atoms())).collect();
        DMatrix::from_columns(&cols)
    }
}

/// Alternates OMP coding of every signal with per-atom least-squares
/// updates. A signal keeps its previous code when the fresh OMP code fits
/// worse, so the objective never increases.
pub fn baseline_fit(data: &Dataset, config: &BaselineConfig) -> Result<BaselineFit> {
    let (n, m, k) = (data.len(), data.dim(), config.n_atoms);
    config.validate(m, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cols = Vec::with_capacity(k);
    for i in sample(&mut rng, n, n).into_iter() {
        if cols.len() == k {
            break;
        }
        let x = data.signal(i).into_owned();
        if x.norm() > 0.0 {
            cols.push(x);
        }
    }
    while cols.len() < k {
        cols.push(DVector::from_fn(m, |_, _| rand::Rng::random::<f64>(&mut rng) + 1e-3));
    }
    let mut dict = Dictionary::new(DMatrix::from_columns(&cols))?;
    let mut codes = encode_all(data, dict.atoms(), config.sparsity, None)?;
    let mut objective = vec![baseline_objective(data, dict.atoms(), &codes)];
    let mut reinit = 0;

    for _ in 0..config.iterations {
        let mut atoms = dict.atoms().clone();
        for kk in 0..k {
            update_atom(data, &mut atoms, &mut codes, kk);
        }
        reinit += reinitialize_dead(data, &mut atoms, &codes);
        dict = Dictionary::new(atoms)?;
        codes = encode_all(data, dict.atoms(), config.sparsity, Some(&codes))?;
        let obj = baseline_objective(data, dict.atoms(), &codes);
        let prev = *objective.last().unwrap();
        objective.push(obj);
        if prev - obj <= 1e-12 * prev.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(BaselineFit { dictionary: dict, codes, objective, atoms_reinitialized: reinit })
}

fn encode_all(data: &Dataset, dict: &DMatrix<f64>, d: usize, previous: Option<&[SparseCode]>) -> Result<Vec<SparseCode>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = data.signal(i);
            let fresh = omp_encode(x, dict, d).map_err(|e| e.in_signal(i))?;
            Ok(match previous {
                Some(prev) if prev[i].residual_sq(x, dict) < fresh.residual_sq(x, dict) => prev[i].clone(),
                _ => fresh,
            })
        })
        .collect()
}

/// Least-squares refit of atom `k` against the residuals of the signals
/// that use it, then renormalization with the coefficients rescaled.
fn update_atom(data: &Dataset, atoms: &mut DMatrix<f64>, codes: &mut [SparseCode], k: usize) {
    let m = atoms.nrows();
    let mut num = DVector::zeros(m);
    let mut den = 0.0;
    for (i, code) in codes.iter().enumerate() {
        let Some(pos) = code.atoms.iter().position(|&a| a == k) else { continue };
        let c = code.coefs[pos];
        if c == 0.0 {
            continue;
        }
        let mut r = data.signal(i).into_owned();
        for (&a, &ca) in code.atoms.iter().zip(&code.coefs) {
            if a != k {
                r.axpy(-ca, &atoms.column(a), 1.0);
            }
        }
        num.axpy(c, &r, 1.0);
        den += c * c;
    }
    if den == 0.0 {
        return;
    }
    let col = num / den;
    let norm = col.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return;
    }
    atoms.set_column(k, &(col / norm));
    for code in codes.iter_mut() {
        if let Some(pos) = code.atoms.iter().position(|&a| a == k) {
            code.coefs[pos] *= norm;
        }
    }
}

fn reinitialize_dead(data: &Dataset, atoms: &mut DMatrix<f64>, codes: &[SparseCode]) -> usize {
    let k = atoms.ncols();
    let mut used = vec![false; k];
    for code in codes {
        for (&a, &c) in code.atoms.iter().zip(&code.coefs) {
            if c != 0.0 {
                used[a] = true;
            }
        }
    }
    let dead: Vec<usize> = (0..k).filter(|&a| !used[a]).collect();
    if dead.is_empty() {
        return 0;
    }
    let errors: Vec<f64> = codes.iter().enumerate().map(|(i, c)| c.residual_sq(data.signal(i), atoms)).collect();
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    let mut candidates = order.into_iter();
    let mut count = 0;
    for a in dead {
        for i in candidates.by_ref() {
            let x = data.signal(i);
            let norm = x.norm();
            if norm > 0.0 {
                atoms.set_column(a, &(x / norm));
                count += 1;
                break;
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DataKind;
    use crate::synth::{simulate_gaussian, subspace_distance, SimSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_dict(rng: &mut impl Rng, m: usize, k: usize) -> DMatrix<f64> {
        Dictionary::new(DMatrix::from_fn(m, k, |_, _| rng.random::<f64>() - 0.5)).unwrap().atoms().clone()
    }

    #[test]
    fn exact_atom_is_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dict = random_dict(&mut rng, 8, 5);
        let code = omp_encode(dict.column(3), &dict, 2).unwrap();
        assert_eq!(code.atoms, vec![3]);
        assert!((code.coefs[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn orthogonal_signal_gives_empty_code() {
        let dict = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let x = DVector::from_vec(vec![0.0, 0.0, 2.0]);
        let code = omp_encode(x.as_view(), &dict, 2).unwrap();
        assert!(code.atoms.is_empty());
        assert_eq!(code.to_dense(2), DVector::zeros(2));
    }

    #[test]
    fn omp_is_close_to_best_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut close = 0;
        for _ in 0..100 {
            let dict = random_dict(&mut rng, 8, 5);
            let x = DVector::from_fn(8, |_, _| rng.random::<f64>() - 0.5);
            let omp = omp_encode(x.as_view(), &dict, 2).unwrap().residual_sq(x.as_view(), &dict);
            let mut best = f64::INFINITY;
            for a in 0..5 {
                for b in (a + 1)..5 {
                    let sub = DMatrix::from_columns(&[dict.column(a), dict.column(b)]);
                    let c = sub.clone().svd(true, true).solve(&x, 1e-12).unwrap();
                    best = best.min((&x - sub * c).norm_squared());
                }
            }
            if omp.sqrt() <= 1.1 * best.sqrt() {
                close += 1;
            }
        }
        assert!(close >= 90, "{close}/100");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn omp_residual_never_grows(seed in 0u64..10_000, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dict = random_dict(&mut rng, 10, 6);
            let x = DVector::from_fn(10, |_, _| rng.random::<f64>());
            let mut prev = x.norm_squared();
            for dd in 1..=d {
                let r = omp_encode(x.as_view(), &dict, dd).unwrap().residual_sq(x.as_view(), &dict);
                prop_assert!(r <= prev + 1e-10);
                prev = r;
            }
        }
    }

    #[test]
    fn recovers_noiseless_one_sparse_dictionary() {
        let spec = SimSpec { snr: None, ..SimSpec::gaussian(200, 20, 4, 1, 1.0, 3) };
        let (data, truth) = simulate_gaussian(&spec).unwrap();
        let fit = baseline_fit(&data, &BaselineConfig { iterations: 50, ..BaselineConfig::new(4, 1) }).unwrap();
        let dist = subspace_distance(fit.dictionary.atoms(), truth.dictionary.atoms()).unwrap();
        assert!(dist < 0.05, "{dist}");
    }

    #[test]
    fn atom_update_reduces_error_on_fixed_codes() {
        let (data, _) = simulate_gaussian(&SimSpec::gaussian(60, 12, 4, 2, 3.0, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut atoms = random_dict(&mut rng, 12, 4);
        let mut codes = encode_all(&data, &atoms, 2, None).unwrap();
        let before = baseline_objective(&data, &atoms, &codes);
        for k in 0..4 {
            update_atom(&data, &mut atoms, &mut codes, k);
        }
        assert!(baseline_objective(&data, &atoms, &codes) < before);
        for k in 0..4 {
            assert!((atoms.column(k).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_is_non_increasing() {
        for seed in 0..20 {
            let (data, _) = simulate_gaussian(&SimSpec::gaussian(50, 10, 5, 2, 2.0, seed)).unwrap();
            let fit = baseline_fit(&data, &BaselineConfig { seed, ..BaselineConfig::new(5, 2) }).unwrap();
            for w in fit.objective.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} -> {}", w[0], w[1]);
            }
            for k in 0..5 {
                assert!((fit.dictionary.atom(k).norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let data = Dataset::from_rows(&[vec![1.0, 2.0]], DataKind::Real).unwrap();
        assert!(baseline_fit(&data, &BaselineConfig::new(2, 3)).is_err());
        assert!(baseline_fit(&data, &BaselineConfig::new(0, 1)).is_err());
    }
}

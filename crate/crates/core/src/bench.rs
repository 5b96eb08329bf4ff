//! Dictionary-recovery benchmarks: simulate, fit each method, and record the
//! subspace distance to the generating dictionary.

use std::fmt::Write as _;
use std::time::Instant;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_fit, BaselineConfig};
use crate::em::{fit_msc, FitConfig, RcSchedule};
use crate::expfam::ExpFamilySpec;
use crate::model::{DataKind, Dataset, ModelFamily};
use crate::spatial::KernelFamily;
use crate::synth::{simulate_gaussian, simulate_poisson, subspace_distance, SimSpec};
use crate::{MscError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    GaussianFig1,
    PoissonFig1,
}

impl std::str::FromStr for Suite {
    type Err = MscError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-fig1" => Ok(Suite::GaussianFig1),
            "poisson-fig1" => Ok(Suite::PoissonFig1),
            other => Err(MscError::invalid(format!("unknown suite {other:?}"))),
        }
    }
}

impl Suite {
    pub fn methods(self) -> &'static [&'static str] {
        match self {
            Suite::GaussianFig1 => &["sp-MSC", "si-MSC", "OMP-ALS"],
            Suite::PoissonFig1 => &["ex-MSC", "OMP-ALS"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub suite: Suite,
    pub sizes: Vec<usize>,
    pub replicates: usize,
    pub m: usize,
    pub k: usize,
    pub d: usize,
    /// Gaussian suite only.
    pub snr: f64,
    pub kernel: KernelFamily,
    pub omega: f64,
    pub max_iter: usize,
    pub baseline_iterations: usize,
    pub rejection: RcSchedule,
    pub seed: u64,
}

impl BenchConfig {
    /// Full-size design: m = 100, K = 30 (Gaussian) or 10 (Poisson), d = 2.
    pub fn paper(suite: Suite) -> Self {
        let k = match suite {
            Suite::GaussianFig1 => 30,
            Suite::PoissonFig1 => 10,
        };
        BenchConfig {
            suite,
            sizes: vec![100, 200, 300, 400, 500],
            replicates: 50,
            m: 100,
            k,
            d: 2,
            snr: 2.0,
            kernel: KernelFamily::Exponential,
            omega: 1.0 / 25.0,
            max_iter: 100,
            baseline_iterations: 30,
            rejection: RcSchedule::default(),
            seed: 0,
        }
    }

    /// Reduced design: m = 40, K = 10 (Gaussian) or 6 (Poisson).
    pub fn scaled(suite: Suite) -> Self {
        let k = match suite {
            Suite::GaussianFig1 => 10,
            Suite::PoissonFig1 => 6,
        };
        BenchConfig { m: 40, k, sizes: vec![100, 300], replicates: 20, ..Self::paper(suite) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(MscError::invalid("sizes must be non-empty and positive"));
        }
        if self.replicates == 0 {
            return Err(MscError::invalid("at least one replicate is needed"));
        }
        if self.suite == Suite::GaussianFig1 && !(self.snr > 0.0) {
            return Err(MscError::invalid("SNR must be positive"));
        }
        Ok(())
    }

    fn case_seed(&self, n: usize, replicate: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add((replicate as u64) * 100_003 + n as u64)
    }

    fn fit_config(&self, family: ModelFamily, seed: u64) -> FitConfig {
        let mut cfg = FitConfig::new(family, self.k, self.d);
        cfg.kernel = self.kernel;
        cfg.stop_on_bic = false;
        cfg.max_iter = self.max_iter;
        cfg.rejection = self.rejection;
        cfg.seed = seed;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub n: usize,
    pub replicate: usize,
    pub subspace_distance: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Deterministic report: method, n, replicate, subspace distance.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,n,replicate,subspace_distance\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.method, r.n, r.replicate, r.subspace_distance).unwrap();
        }
        out
    }

    /// Wall-clock seconds per row, kept apart from the report so the report
    /// itself is reproducible.
    pub fn timing_csv(&self) -> String {
        let mut out = String::from("method,n,replicate,wall_seconds\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{:.3}", r.method, r.n, r.replicate, r.wall_seconds).unwrap();
        }
        out
    }

    /// Median distance per `(method, n)` in first-seen order.
    pub fn medians(&self) -> IndexMap<(String, usize), f64> {
        let mut groups: IndexMap<(String, usize), Vec<f64>> = IndexMap::new();
        for r in &self.rows {
            groups.entry((r.method.clone(), r.n)).or_default().push(r.subspace_distance);
        }
        groups.into_iter().map(|(key, v)| (key, median(v))).collect()
    }

    pub fn median(&self, method: &str, n: usize) -> Option<f64> {
        self.medians().get(&(method.to_string(), n)).copied()
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

fn log1p_dataset(data: &Dataset) -> Result<Dataset> {
    Dataset::new(data.values().map(f64::ln_1p), DataKind::Real)
}

/// One replicate at one size: every method of the suite on the same data.
pub fn run_case(config: &BenchConfig, n: usize, replicate: usize) -> Result<Vec<BenchRow>> {
    let seed = config.case_seed(n, replicate);
    let (m, k, d) = (config.m, config.k, config.d);
    let baseline = BaselineConfig { n_atoms: k, sparsity: d, iterations: config.baseline_iterations, seed };
    let mut rows = Vec::new();
    let mut push = |method: &str, dist: f64, secs: f64| {
        rows.push(BenchRow { method: method.to_string(), n, replicate, subspace_distance: dist, wall_seconds: secs })
    };
    match config.suite {
        Suite::GaussianFig1 => {
            let spec = SimSpec::gaussian(n, m, k, d, config.snr, seed).with_spatial(config.kernel, config.omega);
            let (data, truth) = simulate_gaussian(&spec)?;
            let truth = truth.dictionary.atoms();
            for (name, family) in [("sp-MSC", ModelFamily::SpatialGaussian), ("si-MSC", ModelFamily::SimpleGaussian)] {
                let (fit, secs) = timed(|| fit_msc(&data, &config.fit_config(family, seed)))?;
                push(name, subspace_distance(fit.state.dictionary.atoms(), truth)?, secs);
            }
            let (fit, secs) = timed(|| baseline_fit(&data, &baseline))?;
            push("OMP-ALS", subspace_distance(fit.dictionary.atoms(), truth)?, secs);
        }
        Suite::PoissonFig1 => {
            let (data, truth) = simulate_poisson(&SimSpec::poisson(n, m, k, d, seed))?;
            let truth = truth.dictionary.atoms();
            let family = ModelFamily::ExpFamily(ExpFamilySpec::Poisson);
            let (fit, secs) = timed(|| fit_msc(&data, &config.fit_config(family, seed)))?;
            push("ex-MSC", subspace_distance(fit.state.dictionary.atoms(), truth)?, secs);
            let logged = log1p_dataset(&data)?;
            let (fit, secs) = timed(|| baseline_fit(&logged, &baseline))?;
            push("OMP-ALS", subspace_distance(fit.dictionary.atoms(), truth)?, secs);
        }
    }
    Ok(rows)
}

/// All replicates at all sizes, ordered by size, then replicate, then
/// method.
pub fn run_bench(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let cases: Vec<(usize, usize)> =
        config.sizes.iter().flat_map(|&n| (0..config.replicates).map(move |r| (n, r))).collect();
    let rows: Vec<Vec<BenchRow>> = cases.par_iter().map(|&(n, r)| run_case(config, n, r)).collect::<Result<_>>()?;
    Ok(BenchReport { rows: rows.into_iter().flatten().collect() })
}

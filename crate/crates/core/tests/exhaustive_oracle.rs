//! The sequential support search against EM over every support of size at
//! most two, both started from the same one-sparse fit.

use msc_core::em::{exhaustive_support_set, Fitter};
use msc_core::model::{expand_support_set, init_support_set, prune_support_set};
use msc_core::synth::{simulate_gaussian, SimSpec};
use msc_core::{FitConfig, ModelFamily, RcSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(seed: u64) -> FitConfig {
    FitConfig {
        rejection: RcSchedule::disabled(),
        tol: 1e-12,
        max_iter: 2000,
        seed,
        ..FitConfig::new(ModelFamily::SimpleGaussian, 4, 2)
    }
}

#[test]
fn exhaustive_search_never_loses_to_the_sequential_one() {
    for seed in 0..10 {
        let (data, _) = simulate_gaussian(&SimSpec::gaussian(20, 8, 4, 2, 4.0, seed)).unwrap();
        let fitter = Fitter::new(&data, config(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dict = fitter.initial_dictionary(&mut rng).unwrap();
        let s1 = fitter.initialize_state(dict, init_support_set(4).unwrap()).unwrap();
        let d1 = fitter.run_em_fixed_d(s1, &mut rng).unwrap().state;
        let w = fitter.e_step(&d1).unwrap();
        let kept = prune_support_set(&d1.supports, &w).unwrap();
        let keep: Vec<usize> = kept.iter().map(|m| d1.supports.index_of(m).unwrap()).collect();
        let d1 = d1.retain_components(&keep).unwrap();

        let fast_start = fitter.grow_state(&d1, expand_support_set(&d1.supports).unwrap()).unwrap();
        let full_start = fitter.grow_state(&d1, exhaustive_support_set(4, 2).unwrap()).unwrap();
        let fast = fitter.run_em_fixed_d(fast_start, &mut rng).unwrap();
        let full = fitter.run_em_fixed_d(full_start, &mut rng).unwrap();
        let (lf, lx) = (*fast.trace.last().unwrap(), *full.trace.last().unwrap());
        assert!(fast.converged && full.converged, "seed {seed} did not converge");
        assert!(lx >= lf - 1e-6, "seed {seed}: exhaustive {lx} below sequential {lf}");
        assert!((lx - lf).abs() <= 1e-6, "seed {seed}: exhaustive {lx} vs sequential {lf}");
    }
}

#[test]
fn expansion_of_all_singletons_is_the_exhaustive_set() {
    let grown = expand_support_set(&init_support_set(4).unwrap()).unwrap();
    let full = exhaustive_support_set(4, 2).unwrap();
    assert_eq!(grown.len(), full.len());
    assert!(full.iter().all(|m| grown.index_of(m).is_some()));
}

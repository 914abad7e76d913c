use std::sync::Arc;

use num_complex::Complex64 as C64;
use spectra_core::ed::{self, EdSystem};
use spectra_core::estimators::{self, direct_trace_ratio};
use spectra_core::evolution::{build_evolution_family, exact_family, BackendMode, EvolutionConfig};
use spectra_core::filter::{choose_alpha, make_filter_params};
use spectra_core::model::{IsingSpec, Observable};
use spectra_core::sampler::{metropolis_chain, run_chains, seed_state_search, BasisKind, Proposal, Sampler, SamplerConfig};
use spectra_core::tn::{TensorTrain, TruncationPolicy};
use spectra_core::varmin;

fn mz() -> Observable {
    Observable::by_name("m_z").unwrap()
}

#[test]
fn accepted_weights_are_positive() {
    let spec = IsingSpec::benchmark(6);
    let sys = Arc::new(EdSystem::new(&spec, &mz()).unwrap());
    let fp = make_filter_params(-1.0, 1.5, choose_alpha(spec.g.abs(), 6, 1.5), 3.0).unwrap();
    let fam = exact_family(sys, &fp);
    let s = Sampler::new(&fp, &mz(), &fam, BasisKind::Computational);
    let cfg = SamplerConfig { n_samples: 5000, burn_in: 200, record_trace: true, ..Default::default() };
    let r = metropolis_chain(&s, &seed_state_search(&spec, -1.0).bits, &cfg, 3).unwrap();
    let trace = r.trace.unwrap();
    assert_eq!(trace.len(), 4800);
    assert!(trace.iter().all(|t| t.d > 0.0));
    assert!(r.max_imag_residue < 1e-10);
}

#[test]
fn pauli_strings_resolve_the_trace() {
    let spec = IsingSpec::benchmark(4);
    let sys = Arc::new(EdSystem::new(&spec, &mz()).unwrap());
    let seed = TensorTrain::product(&[[C64::new(0.8, 0.0), C64::new(0.36, 0.48)]; 4]).unwrap();
    for (e, delta) in [(-1.0, 1.0), (0.8, 1.5)] {
        let fp = make_filter_params(e, delta, 7.0, 3.0).unwrap();
        let fam = exact_family(sys.clone(), &fp);
        let s = Sampler::new(&fp, &mz(), &fam, BasisKind::PauliDressed { seed: Arc::new(seed.clone()) });
        let (sum, _) = s.basis_sum().unwrap();
        let direct = direct_trace_ratio(&fam, &fp, &mz(), 0.0).unwrap().value;
        assert!((sum - direct).abs() <= 1e-10, "{sum} vs {direct}");
    }
}

#[test]
fn pauli_chain_from_variance_minimized_seed() {
    let spec = IsingSpec::benchmark(6);
    let e = 0.3 * 6.0;
    let vm = varmin::minimize_variance_lenient(&spec, e, 1, 30, 1e-10).unwrap();
    let sys = Arc::new(EdSystem::new(&spec, &mz()).unwrap());
    let fp = make_filter_params(e, 1.0, choose_alpha(vm.sigma_d / 6f64.sqrt(), 6, 1.0), 3.0).unwrap();
    let fam = exact_family(sys, &fp);
    let s = Sampler::new(&fp, &mz(), &fam, BasisKind::PauliDressed { seed: Arc::new(vm.state.clone()) });
    let p = s.point(&[0; 6]).unwrap();
    assert!((p.e_phi - vm.e_mean).abs() < 1e-10);
    let cfg = SamplerConfig { n_samples: 3000, burn_in: 300, proposal: Proposal::SingleSitePauli, ..Default::default() };
    let r = metropolis_chain(&s, &[0; 6], &cfg, 0).unwrap();
    assert!(r.acceptance_rate > 0.0 && r.estimate.abs() <= 1.0);
    let wrong = SamplerConfig { proposal: Proposal::SingleSiteFlip, ..cfg };
    assert!(metropolis_chain(&s, &[0; 6], &wrong, 0).is_err());
}

#[test]
fn operator_cache_and_state_evolution_agree() {
    let spec = IsingSpec::benchmark(10);
    let delta = 10f64.sqrt();
    let e = -0.3 * 10.0;
    let fp = make_filter_params(e, delta, choose_alpha(spec.g.abs(), 10, delta), 3.0).unwrap();
    let cfg = EvolutionConfig { dt: 0.02, policy: TruncationPolicy::new(64, 1e-10), ..Default::default() };
    let seed = seed_state_search(&spec, e).bits;
    let mut results = Vec::new();
    for (mode, rng_seed) in [(BackendMode::MpoCache, 11), (BackendMode::MpsOnDemand, 12)] {
        let fam = build_evolution_family(&spec, &fp, &cfg, mode).unwrap();
        let s = Sampler::new(&fp, &mz(), &fam, BasisKind::Computational);
        let sc = SamplerConfig { n_samples: 20_000, burn_in: 1000, rng_seed, ..Default::default() };
        results.push(run_chains(&s, &seed, &sc, 2).unwrap());
    }
    let (a, b) = (&results[0], &results[1]);
    let budget = 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt() + a.max_truncation_error + b.max_truncation_error;
    assert!((a.estimate - b.estimate).abs() <= budget, "{} vs {} (budget {budget})", a.estimate, b.estimate);
}

#[test]
fn exclusion_radius_matches_rejections() {
    // Synthetic Gaussian LDOS weights over all N = 10 bitstrings.
    let spec = IsingSpec::benchmark(10);
    let (delta, eps, e) = (1.0, 1e-3, 1.5);
    let sigma = spec.g.abs();
    let var = delta * delta + spec.n as f64 * sigma * sigma;
    let nu = estimators::exclusion_radius(delta, spec.n, sigma, eps);
    let mut bad = 0;
    for idx in 0..1usize << spec.n {
        let bits = ed::index_to_bits(idx, spec.n);
        let ep = spec.bitstring_energy(&bits);
        let d = (delta * delta / var).sqrt() * (-(e - ep).powi(2) / (2.0 * var)).exp();
        let rejected = d < eps;
        let dist = (e - ep).abs();
        if (rejected && dist < 0.9 * nu) || (!rejected && dist > 1.1 * nu) {
            bad += 1;
        }
    }
    assert_eq!(bad, 0);
}

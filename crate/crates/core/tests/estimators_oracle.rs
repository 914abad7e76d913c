use std::sync::Arc;

use spectra_core::ed::{self, EdSystem, FilterKind};
use spectra_core::estimators::{self, thermal_reference, GaussianDosModel, ThermalMethod};
use spectra_core::evolution::{build_evolution_family, exact_family, BackendMode, EvolutionConfig};
use spectra_core::filter::make_filter_params;
use spectra_core::model::{IsingSpec, Observable};
use spectra_core::sampler::seed_state_search;
use spectra_core::tn::TruncationPolicy;
use spectra_core::varmin;

fn mz() -> Observable {
    Observable::by_name("m_z").unwrap()
}

#[test]
fn dos_falls_off_like_the_shifted_gaussian() {
    let spec = IsingSpec::benchmark(12);
    let sys = EdSystem::new(&spec, &mz()).unwrap();
    let model = GaussianDosModel::from_spec(&spec);
    let delta = 1.0;
    let g = model.gamma(delta);
    let n = spec.n as f64;
    let e = 2.0 * n.sqrt() * model.sigma0;
    let dos = |e: f64| ed::ed_filter_values(&sys, e, &FilterKind::Gaussian { delta }, None).unwrap().dos;
    let measured = dos(e) / dos(0.0);
    let predicted = (-e * e / (2.0 * g * n * model.sigma0 * model.sigma0)).exp();
    assert!(measured / predicted < 3.0 && predicted / measured < 3.0, "{measured} vs {predicted}");
}

#[test]
fn thermal_energy_is_monotone_in_beta() {
    let spec = IsingSpec::benchmark(8);
    let sd = ed::ed_spectrum(&spec, &mz(), None).unwrap();
    let mut last = f64::INFINITY;
    let mut beta_last = f64::NEG_INFINITY;
    for epn in [0.6, 0.3, 0.0, -0.3, -0.6, -0.9] {
        let p = thermal_reference(&spec, epn * 8.0, &mz(), ThermalMethod::Ed(&sd)).unwrap();
        assert!(p.energy < last && p.beta > beta_last);
        assert!((p.energy - epn * 8.0).abs() < 1e-6);
        last = p.energy;
        beta_last = p.beta;
    }
}

#[test]
fn trace_ratio_tracks_the_exact_value_in_both_backends() {
    let spec = IsingSpec::benchmark(8);
    let fp = make_filter_params(-2.0, 1.5, 9.0, 3.0).unwrap();
    let sys = Arc::new(EdSystem::new(&spec, &mz()).unwrap());
    let want = ed::ed_filter_values(&sys, -2.0, &FilterKind::Cosine(fp.clone()), None).unwrap().trace_ratio;
    let exact = estimators::direct_trace_ratio(&exact_family(sys, &fp), &fp, &mz(), 0.0).unwrap();
    assert!((exact.value - want).abs() < 1e-12);
    let cfg = EvolutionConfig { dt: 0.02, policy: TruncationPolicy::new(256, 1e-12), ..Default::default() };
    let fam = build_evolution_family(&spec, &fp, &cfg, BackendMode::MpoCache).unwrap();
    let tn = estimators::direct_trace_ratio(&fam, &fp, &mz(), 0.0).unwrap();
    assert!((tn.value - want).abs() < 1e-4, "{} vs {want}", tn.value);
}

#[test]
fn filtered_state_width_law() {
    // Variance-minimized bond-1 states at N = 8, filtered at their own mean.
    let spec = IsingSpec::benchmark(8);
    let sys = EdSystem::new(&spec, &mz()).unwrap();
    let n = spec.n as f64;
    for epn in [0.0, 0.3] {
        let vm = varmin::minimize_variance_lenient(&spec, epn * n, 1, 40, 1e-10).unwrap();
        let delta = vm.sigma_d / (2.0 * n.sqrt());
        let sd = sys.decompose(&vm.state.to_dense()).unwrap();
        let filt: Vec<f64> =
            sd.overlaps().iter().zip(&sys.eigenvalues).map(|(p, l)| p * (-(l - vm.e_mean).powi(2) / (delta * delta)).exp()).collect();
        let z: f64 = filt.iter().sum();
        let mean = filt.iter().zip(&sys.eigenvalues).map(|(p, l)| p * l).sum::<f64>() / z;
        let width = (filt.iter().zip(&sys.eigenvalues).map(|(p, l)| p * (l - mean).powi(2)).sum::<f64>() / z).sqrt();
        let predicted = estimators::filtered_state_width(delta, vm.sigma_d * vm.sigma_d);
        println!("E/N={epn}: width {width:.4} predicted {predicted:.4}");
        assert!((width / predicted - 1.0).abs() <= 0.2, "E/N={epn}: {width} vs {predicted}");
    }
}

#[test]
fn state_filter_converges_slower_than_trace_filter() {
    let spec = IsingSpec::benchmark(10);
    let sys = EdSystem::new(&spec, &mz()).unwrap();
    let sdata = sys.spectrum(None).unwrap();
    let delta = 1.0;
    let (mut state_gaps, mut trace_gaps) = (Vec::new(), Vec::new());
    for epn in [-0.6, -0.3, 0.0, 0.3, 0.6] {
        let e = epn * spec.n as f64;
        let micro = ed::ed_microcanonical(&sdata, e, 0.5).unwrap();
        let bits = seed_state_search(&spec, e).bits;
        let sd = sys.decompose_basis(ed::bits_to_index(&bits));
        let v = ed::ed_filter_values(&sys, e, &FilterKind::Gaussian { delta }, Some(&sd)).unwrap();
        state_gaps.push((v.state_filter_value.unwrap() - micro).abs());
        trace_gaps.push((v.trace_ratio - micro).abs());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    assert!(median(&mut state_gaps) >= median(&mut trace_gaps));
}

use num_complex::Complex64 as C64;
use spectra_core::ed::EdSystem;
use spectra_core::model::{self, IsingSpec, Observable};
use spectra_core::tn::{self, TruncationPolicy};

#[test]
fn hamiltonian_and_magnetization_are_hermitian() {
    for n in [2usize, 5, 8] {
        let spec = IsingSpec::benchmark(n);
        for m in [
            model::build_hamiltonian_mpo(&spec).unwrap().to_dense(),
            model::build_observable_mpo(&spec, "m_z").unwrap().to_dense(),
        ] {
            let dev = m.iter().zip(m.t().iter()).map(|(a, b)| (a - b.conj()).norm()).fold(0.0, f64::max);
            assert!(dev <= 1e-12, "N={n}: {dev}");
        }
    }
}

#[test]
fn second_moment_matches_squared_trace() {
    for n in [3usize, 6, 10] {
        let spec = IsingSpec::benchmark(n);
        let h = model::build_hamiltonian_mpo(&spec).unwrap();
        let (h2, _) = tn::mpo_multiply(&h, &h, &TruncationPolicy::lossless()).unwrap();
        let tr = tn::mpo_trace_normalized(&h2).unwrap();
        let (m1, m2) = model::pauli_moments(&spec);
        assert!((tr.re - m2).abs() <= 1e-9 * m2, "N={n}: {} vs {m2}", tr.re);
        assert!(tn::mpo_trace_normalized(&h).unwrap().norm() <= 1e-12 && m1 == 0.0);
    }
}

#[test]
fn energy_density_support() {
    let spec = IsingSpec::benchmark(12);
    let sys = EdSystem::new(&spec, &Observable::by_name("m_z").unwrap()).unwrap();
    let n = spec.n as f64;
    let (lo, hi) = (sys.eigenvalues[0], *sys.eigenvalues.last().unwrap());
    assert!(lo >= -1.33 * n && hi <= 1.72 * n, "[{lo}, {hi}]");
}

#[test]
fn mpo_and_dense_hamiltonian_agree_on_states() {
    let spec = IsingSpec::benchmark(6);
    let h = model::build_hamiltonian_mpo(&spec).unwrap();
    let dense = model::dense_hamiltonian(&spec);
    let bits = [0u8, 1, 1, 0, 1, 0];
    let psi = tn::TensorTrain::basis_state(&bits).unwrap();
    let e = tn::sandwich(&psi, Some(&h), &psi).unwrap();
    let idx = spectra_core::ed::bits_to_index(&bits);
    assert!((e - dense[[idx, idx]]).norm() < 1e-12);
    assert!((e.re - spec.bitstring_energy(&bits)).abs() < 1e-12);
    assert_eq!(e.im, C64::new(0.0, 0.0).im);
}

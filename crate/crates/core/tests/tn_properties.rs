use ndarray::{Array3, Array4};
use num_complex::Complex64 as C64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectra_core::tn::{self, io, OperatorTrain, TensorTrain, TruncationPolicy};

fn random_state(n: usize, bond: usize, seed: u64) -> TensorTrain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites = (0..n)
        .map(|i| {
            let l = if i == 0 { 1 } else { bond };
            let r = if i == n - 1 { 1 } else { bond };
            Array3::from_shape_fn((l, 2, r), |_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
        })
        .collect();
    TensorTrain::new(sites).unwrap()
}

fn random_op(n: usize, bond: usize, seed: u64) -> OperatorTrain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites = (0..n)
        .map(|i| {
            let l = if i == 0 { 1 } else { bond };
            let r = if i == n - 1 { 1 } else { bond };
            Array4::from_shape_fn((l, 2, 2, r), |_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
        })
        .collect();
    OperatorTrain::new(sites).unwrap()
}

fn dense_dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn compress_leaves_isometries(n in 2usize..7, bond in 1usize..5, seed in any::<u64>()) {
        let psi = random_state(n, bond, seed);
        let (c, _) = tn::canonical_compress(&psi, &TruncationPolicy::new(3, 1e-12)).unwrap();
        prop_assert!(c.isometry_deviation().unwrap() <= 1e-10);
    }

    #[test]
    fn lossless_compression_keeps_sandwiches(n in 2usize..7, bond in 1usize..5, seed in any::<u64>()) {
        let psi = random_state(n, bond, seed);
        let op = random_op(n, 2, seed ^ 1);
        let before = tn::sandwich(&psi, Some(&op), &psi).unwrap();
        let mut c = psi.clone();
        c.compress(&TruncationPolicy::new(64, 0.0)).unwrap();
        let after = tn::sandwich(&c, Some(&op), &c).unwrap();
        prop_assert!((before - after).norm() <= 1e-12 * before.norm().max(1e-300) * 10.0);
    }

    #[test]
    fn trace_is_linear(n in 1usize..6, seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (x, y) = (random_op(n, 2, seed), random_op(n, 3, seed.wrapping_add(7)));
        let (ca, cb) = (C64::new(a, 0.3), C64::new(b, -0.1));
        let sum = OperatorTrain::linear_combination(&x, ca, &y, cb).unwrap();
        let want = ca * tn::mpo_trace(&x).unwrap() + cb * tn::mpo_trace(&y).unwrap();
        let got = tn::mpo_trace(&sum).unwrap();
        prop_assert!((got - want).norm() <= 1e-12 * want.norm().max(1.0));
    }

    #[test]
    fn operations_match_dense(n in 1usize..7, seed in any::<u64>()) {
        let psi = random_state(n, 3, seed);
        let phi = random_state(n, 2, seed ^ 0xabc);
        let op = random_op(n, 2, seed ^ 0x55);
        let (vp, vq) = (psi.to_dense(), phi.to_dense());
        let m = op.to_dense();
        let mv: Vec<C64> = (0..vq.len()).map(|i| (0..vq.len()).map(|j| m[[i, j]] * vq[j]).sum()).collect();
        let want = dense_dot(&vp, &mv);
        let got = tn::sandwich(&psi, Some(&op), &phi).unwrap();
        prop_assert!((got - want).norm() <= 1e-10 * want.norm().max(1e-12));
        let (applied, _) = tn::apply_mpo(&op, &phi, &TruncationPolicy::lossless()).unwrap();
        let av = applied.to_dense();
        let err = av.iter().zip(&mv).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        let scale = mv.iter().map(|z| z.norm()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-10 * scale.max(1e-12));
    }

    #[test]
    fn io_round_trip(n in 1usize..6, bond in 1usize..4, seed in any::<u64>()) {
        let psi = random_state(n, bond, seed).with_log_norm(0.25);
        let mut buf = Vec::new();
        io::write_state(&mut buf, &psi).unwrap();
        let back = io::read_state(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.to_dense(), psi.to_dense());
        let op = random_op(n, bond, seed);
        let mut buf = Vec::new();
        io::write_operator(&mut buf, &op).unwrap();
        let back = io::read_operator(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.to_dense(), op.to_dense());
    }
}

#[test]
fn mpo_product_matches_dense() {
    let (a, b) = (random_op(4, 2, 1), random_op(4, 3, 2));
    let (p, _) = tn::mpo_multiply(&a, &b, &TruncationPolicy::lossless()).unwrap();
    let want = a.to_dense().dot(&b.to_dense());
    let got = p.to_dense();
    let err = got.iter().zip(want.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    assert!(err <= 1e-10 * want.iter().map(|z| z.norm()).fold(0.0, f64::max));
}

#[test]
fn truncated_stream_is_rejected() {
    let psi = random_state(3, 2, 5);
    let mut buf = Vec::new();
    io::write_state(&mut buf, &psi).unwrap();
    buf.truncate(buf.len() - 3);
    assert!(io::read_state(&mut buf.as_slice()).is_err());
}

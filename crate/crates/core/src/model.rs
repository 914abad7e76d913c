//! The open Ising chain `H = J Σ σᶻσᶻ + Σ (g σˣ + h σᶻ)` and its
//! single-site-sum observables.

use ndarray::{array, Array2, Array4};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::tn::OperatorTrain;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    InvalidSpec(String),
    #[error("unknown observable {0:?}")]
    UnknownObservable(String),
    #[error("Trotter order {0} is not supported (only 2)")]
    UnsupportedOrder(u32),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsingSpec {
    pub n: usize,
    pub j: f64,
    pub g: f64,
    pub h: f64,
}

impl IsingSpec {
    pub fn new(n: usize, j: f64, g: f64, h: f64) -> Result<Self, ModelError> {
        let s = Self { n, j, g, h };
        s.validate()?;
        Ok(s)
    }

    /// The benchmark couplings `(J, g, h) = (1, −1.05, 0.5)`.
    pub fn benchmark(n: usize) -> Self {
        Self { n, j: 1.0, g: -1.05, h: 0.5 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n == 0 {
            return Err(ModelError::InvalidSpec("N must be at least 1".into()));
        }
        if ![self.j, self.g, self.h].iter().all(|x| x.is_finite()) {
            return Err(ModelError::InvalidSpec("couplings must be finite".into()));
        }
        Ok(())
    }

    /// Stable textual key used for cache hashing.
    pub fn key(&self) -> String {
        format!("ising:N={};J={:e};g={:e};h={:e}", self.n, self.j, self.g, self.h)
    }

    /// Mean energy of a computational basis state (`bits[i] = 0` is up).
    pub fn bitstring_energy(&self, bits: &[u8]) -> f64 {
        let z: Vec<f64> = bits.iter().map(|&b| if b == 0 { 1.0 } else { -1.0 }).collect();
        let zz: f64 = z.windows(2).map(|w| w[0] * w[1]).sum();
        self.j * zz + self.h * z.iter().sum::<f64>()
    }

    /// Energy variance of any computational basis state, `N g²`.
    pub fn bitstring_variance(&self) -> f64 {
        self.n as f64 * self.g * self.g
    }
}

pub fn pauli_x() -> Array2<C64> {
    array![[C64::new(0.0, 0.0), C64::new(1.0, 0.0)], [C64::new(1.0, 0.0), C64::new(0.0, 0.0)]]
}

pub fn pauli_y() -> Array2<C64> {
    array![[C64::new(0.0, 0.0), C64::new(0.0, -1.0)], [C64::new(0.0, 1.0), C64::new(0.0, 0.0)]]
}

pub fn pauli_z() -> Array2<C64> {
    array![[C64::new(1.0, 0.0), C64::new(0.0, 0.0)], [C64::new(0.0, 0.0), C64::new(-1.0, 0.0)]]
}

pub fn eye2() -> Array2<C64> {
    Array2::from_diag_elem(2, C64::new(1.0, 0.0))
}

fn field(spec: &IsingSpec) -> Array2<C64> {
    pauli_x().mapv(|x| x * spec.g) + pauli_z().mapv(|x| x * spec.h)
}

/// Bond-dimension-3 MPO of `H − shift`. The shift is spread as `shift/N` over
/// the local terms.
pub fn build_shifted_hamiltonian_mpo(spec: &IsingSpec, shift: f64) -> Result<OperatorTrain, ModelError> {
    spec.validate()?;
    let n = spec.n;
    let local = field(spec) - eye2().mapv(|x| x * (shift / n as f64));
    let zj = pauli_z().mapv(|x| x * spec.j);
    let mut w = Array4::<C64>::zeros((3, 2, 2, 3));
    let put = |w: &mut Array4<C64>, a: usize, b: usize, m: &Array2<C64>| {
        for o in 0..2 {
            for i in 0..2 {
                w[[a, o, i, b]] = m[[o, i]];
            }
        }
    };
    put(&mut w, 0, 0, &eye2());
    put(&mut w, 1, 0, &pauli_z());
    put(&mut w, 2, 0, &local);
    put(&mut w, 2, 1, &zj);
    put(&mut w, 2, 2, &eye2());
    let sites = if n == 1 {
        vec![w.slice(ndarray::s![2..3, .., .., 0..1]).to_owned()]
    } else {
        let mut s = vec![w.slice(ndarray::s![2..3, .., .., ..]).to_owned()];
        for _ in 1..n - 1 {
            s.push(w.clone());
        }
        s.push(w.slice(ndarray::s![.., .., .., 0..1]).to_owned());
        s
    };
    Ok(OperatorTrain::new(sites).expect("valid Hamiltonian MPO"))
}

pub fn build_hamiltonian_mpo(spec: &IsingSpec) -> Result<OperatorTrain, ModelError> {
    build_shifted_hamiltonian_mpo(spec, 0.0)
}

/// A normalized single-site sum `(1/N) Σ_i A_i`.
#[derive(Clone, Debug)]
pub struct Observable {
    pub name: String,
    pub local: Array2<C64>,
}

impl Observable {
    pub fn by_name(name: &str) -> Result<Self, ModelError> {
        let local = match name {
            "m_z" => pauli_z(),
            "m_x" => pauli_x(),
            "m_y" => pauli_y(),
            _ => return Err(ModelError::UnknownObservable(name.to_string())),
        };
        Ok(Self { name: name.to_string(), local })
    }

    /// Diagonal in the computational basis.
    pub fn is_diagonal(&self) -> bool {
        self.local[[0, 1]].norm() == 0.0 && self.local[[1, 0]].norm() == 0.0
    }

    /// Value on a computational basis state if the observable is diagonal.
    pub fn bitstring_value(&self, bits: &[u8]) -> Option<f64> {
        if !self.is_diagonal() {
            return None;
        }
        let s: f64 = bits.iter().map(|&b| self.local[[b as usize, b as usize]].re).sum();
        Some(s / bits.len() as f64)
    }

    pub fn mpo(&self, n: usize) -> OperatorTrain {
        let a = self.local.mapv(|x| x / n as f64);
        let mut w = Array4::<C64>::zeros((2, 2, 2, 2));
        for o in 0..2 {
            for i in 0..2 {
                w[[0, o, i, 0]] = eye2()[[o, i]];
                w[[1, o, i, 0]] = a[[o, i]];
                w[[1, o, i, 1]] = eye2()[[o, i]];
            }
        }
        let sites = if n == 1 {
            vec![w.slice(ndarray::s![1..2, .., .., 0..1]).to_owned()]
        } else {
            let mut s = vec![w.slice(ndarray::s![1..2, .., .., ..]).to_owned()];
            for _ in 1..n - 1 {
                s.push(w.clone());
            }
            s.push(w.slice(ndarray::s![.., .., .., 0..1]).to_owned());
            s
        };
        OperatorTrain::new(sites).expect("valid observable MPO")
    }
}

pub fn build_observable_mpo(spec: &IsingSpec, name: &str) -> Result<OperatorTrain, ModelError> {
    spec.validate()?;
    Ok(Observable::by_name(name)?.mpo(spec.n))
}

/// `(tr H / 2^N, tr H² / 2^N)`.
pub fn pauli_moments(spec: &IsingSpec) -> (f64, f64) {
    let n = spec.n as f64;
    (0.0, spec.j * spec.j * (n - 1.0) + (spec.g * spec.g + spec.h * spec.h) * n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    EvenBond,
    OddBond,
    SingleSite,
}

#[derive(Clone, Debug)]
pub struct GateLayer {
    pub placement: Placement,
    /// Gate `k` acts on bond `(first + 2k, first + 2k + 1)` for bond layers,
    /// on site 0 for the single-site layer.
    pub gates: Vec<Array2<C64>>,
    pub timestep: C64,
}

impl GateLayer {
    pub fn first_site(&self) -> usize {
        match self.placement {
            Placement::EvenBond | Placement::SingleSite => 0,
            Placement::OddBond => 1,
        }
    }
}

/// Two-site term on bond `(i, i+1)`; fields are split in half between the
/// bonds sharing a site and taken in full at the chain ends.
pub fn bond_hamiltonian(spec: &IsingSpec, i: usize) -> Array2<C64> {
    let n = spec.n;
    let f = field(spec);
    let wl = if i == 0 { 1.0 } else { 0.5 };
    let wr = if i + 1 == n - 1 { 1.0 } else { 0.5 };
    let zz = linalg::kron(&pauli_z(), &pauli_z()).mapv(|x| x * spec.j);
    zz + linalg::kron(&f, &eye2()).mapv(|x| x * wl) + linalg::kron(&eye2(), &f).mapv(|x| x * wr)
}

fn layer(spec: &IsingSpec, placement: Placement, z: C64) -> Result<GateLayer, ModelError> {
    let gates = match placement {
        Placement::SingleSite => vec![linalg::expm_hermitian(&field(spec), z)?],
        _ => {
            let first = if placement == Placement::EvenBond { 0 } else { 1 };
            (first..spec.n.saturating_sub(1))
                .step_by(2)
                .map(|i| linalg::expm_hermitian(&bond_hamiltonian(spec, i), z))
                .collect::<Result<_, _>>()?
        }
    };
    Ok(GateLayer { placement, gates, timestep: z })
}

/// Gate layers for a step `exp(−i z H)` with complex `z`; real `z` is real
/// time, `z = −iτ` gives `exp(−τH)`.
pub fn trotter_layers_complex(spec: &IsingSpec, z: C64, order: u32) -> Result<Vec<GateLayer>, ModelError> {
    spec.validate()?;
    if order != 2 {
        return Err(ModelError::UnsupportedOrder(order));
    }
    if spec.n == 1 {
        return Ok(vec![layer(spec, Placement::SingleSite, z)?]);
    }
    let half = z * 0.5;
    Ok(vec![
        layer(spec, Placement::EvenBond, half)?,
        layer(spec, Placement::OddBond, z)?,
        layer(spec, Placement::EvenBond, half)?,
    ])
}

/// Symmetric second-order splitting `even(dt/2) · odd(dt) · even(dt/2)`.
pub fn trotter_layers(spec: &IsingSpec, dt: f64, order: u32) -> Result<Vec<GateLayer>, ModelError> {
    trotter_layers_complex(spec, C64::new(dt, 0.0), order)
}

/// Dense `H` by Kronecker assembly; reference implementation for small `N`.
pub fn dense_hamiltonian(spec: &IsingSpec) -> Array2<C64> {
    let n = spec.n;
    let dim = 1usize << n;
    let embed = |ops: &[(usize, Array2<C64>)]| {
        let mut m = Array2::from_elem((1, 1), C64::new(1.0, 0.0));
        for site in 0..n {
            let local = ops.iter().find(|(s, _)| *s == site).map(|(_, a)| a.clone()).unwrap_or_else(eye2);
            m = linalg::kron(&m, &local);
        }
        m
    };
    let mut h = Array2::<C64>::zeros((dim, dim));
    for i in 0..n {
        h = h + embed(&[(i, field(spec))]);
        if i + 1 < n {
            h = h + embed(&[(i, pauli_z()), (i + 1, pauli_z())]).mapv(|x| x * spec.j);
        }
    }
    h
}

/// Dense product of the layers, in application order.
pub fn dense_layers(spec: &IsingSpec, layers: &[GateLayer]) -> Array2<C64> {
    let n = spec.n;
    let dim = 1usize << n;
    let mut u = Array2::from_diag_elem(dim, C64::new(1.0, 0.0));
    for l in layers {
        let mut full = Array2::from_elem((1, 1), C64::new(1.0, 0.0));
        match l.placement {
            Placement::SingleSite => full = l.gates[0].clone(),
            _ => {
                let mut site = 0;
                let mut k = 0;
                while site < n {
                    if site >= l.first_site() && k < l.gates.len() && site == l.first_site() + 2 * k {
                        full = linalg::kron(&full, &l.gates[k]);
                        site += 2;
                        k += 1;
                    } else {
                        full = linalg::kron(&full, &eye2());
                        site += 1;
                    }
                }
            }
        }
        u = full.dot(&u);
    }
    u
}

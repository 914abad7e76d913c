//! Variance minimization `min ⟨ψ|(H − E)²|ψ⟩` over MPS of fixed bond dimension,
//! and the filtered-pure-state experiment built on its output.

use ndarray::{Array2, Array3, Array4};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{self, EstimatorError, ThermalMethod};
use crate::evolution::{build_evolution_family, BackendMode, EvolutionConfig, EvolutionError, Probe};
use crate::filter::{self, FilterError, FilterParams};
use crate::linalg::{self, LinalgError};
use crate::model::{self, IsingSpec, ModelError, Observable};
use crate::sampler::seed_state_search;
use crate::tn::{self, sweep, OperatorTrain, TensorTrain, TnError, TruncationPolicy};

#[derive(Debug, Error)]
pub enum VarMinError {
    #[error("variance minimization did not converge in {} sweeps (objective {:e})", .0.sweep_history.len() / 2, .0.variance)]
    NonConvergent(Box<VarMinResult>),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tn(#[from] TnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

type VResult<T> = Result<T, VarMinError>;

#[derive(Clone, Debug)]
pub struct VarMinResult {
    /// Normalized, right-canonical (center 0).
    pub state: TensorTrain,
    pub target: f64,
    pub e_mean: f64,
    /// `⟨(H − E)²⟩` at the target energy.
    pub variance: f64,
    /// Energy width `√(⟨H²⟩ − ⟨H⟩²)`.
    pub sigma_d: f64,
    /// Objective after each half-sweep.
    pub sweep_history: Vec<f64>,
    pub converged: bool,
}

/// `(H − E)²` as an MPO, squared without truncation beyond `1e-12`.
pub fn shifted_square_mpo(spec: &IsingSpec, e: f64) -> VResult<OperatorTrain> {
    let h = model::build_shifted_hamiltonian_mpo(spec, e)?;
    let policy = TruncationPolicy::new(usize::MAX, 1e-12);
    let (k, _) = tn::mpo_multiply(&h, &h, &policy)?;
    Ok(k)
}

/// `⟨ψ|K|ψ⟩ / ⟨ψ|ψ⟩`.
pub fn expectation(psi: &TensorTrain, op: &OperatorTrain) -> VResult<f64> {
    let num = tn::sandwich(psi, Some(op), psi)?.re;
    let den = psi.norm().powi(2);
    Ok(num / den)
}

/// Sites of `op` with the global scale folded into site 0.
fn operator_sites(op: &OperatorTrain) -> Vec<Array4<C64>> {
    let mut w = op.sites().to_vec();
    let s = op.log_norm().exp();
    w[0].mapv_inplace(|x| x * s);
    w
}

/// `L'[y,q,v] = Σ conj(A[x,j,y]) W[p,j,k,q] L[x,p,u] A[u,k,v]`.
fn grow_left(env: &Array3<C64>, a: &Array3<C64>, w: &Array4<C64>) -> Array3<C64> {
    let (x, p, u) = env.dim();
    let (_, d, y) = a.dim();
    let q = w.dim().3;
    let mut out = Array3::<C64>::zeros((y, q, y));
    // T[x,p,k,v] = Σ_u L[x,p,u] A[u,k,v]
    let mut t = ndarray::Array4::<C64>::zeros((x, p, d, y));
    for xi in 0..x {
        for pi in 0..p {
            for ui in 0..u {
                let l = env[[xi, pi, ui]];
                if l == C64::new(0.0, 0.0) {
                    continue;
                }
                for k in 0..d {
                    for v in 0..y {
                        t[[xi, pi, k, v]] += l * a[[ui, k, v]];
                    }
                }
            }
        }
    }
    // S[x,j,q,v] = Σ_{p,k} T[x,p,k,v] W[p,j,k,q]
    let mut s = ndarray::Array4::<C64>::zeros((x, d, q, y));
    for xi in 0..x {
        for pi in 0..p {
            for k in 0..d {
                for j in 0..d {
                    for qi in 0..q {
                        let wv = w[[pi, j, k, qi]];
                        if wv == C64::new(0.0, 0.0) {
                            continue;
                        }
                        for v in 0..y {
                            s[[xi, j, qi, v]] += wv * t[[xi, pi, k, v]];
                        }
                    }
                }
            }
        }
    }
    for xi in 0..x {
        for j in 0..d {
            for yi in 0..y {
                let b = a[[xi, j, yi]].conj();
                for qi in 0..q {
                    for v in 0..y {
                        out[[yi, qi, v]] += b * s[[xi, j, qi, v]];
                    }
                }
            }
        }
    }
    out
}

/// `R[x,p,u] = Σ conj(A[x,j,y]) W[p,j,k,q] A[u,k,v] R'[y,q,v]`, computed as
/// a left growth on the mirrored chain.
fn grow_right(env: &Array3<C64>, a: &Array3<C64>, w: &Array4<C64>) -> Array3<C64> {
    let ar = a.view().permuted_axes([2, 1, 0]).to_owned();
    let wr = w.view().permuted_axes([3, 1, 2, 0]).to_owned();
    grow_left(env, &ar, &wr)
}

/// Dense effective operator on site tensor `(x, j, y)`.
fn effective_operator(l: &Array3<C64>, w: &Array4<C64>, r: &Array3<C64>) -> Array2<C64> {
    let (x, p, _) = l.dim();
    let (_, d, _, q) = w.dim();
    let y = r.dim().0;
    let dim = x * d * y;
    let mut h = Array2::<C64>::zeros((dim, dim));
    for pi in 0..p {
        for qi in 0..q {
            for j in 0..d {
                for k in 0..d {
                    let wv = w[[pi, j, k, qi]];
                    if wv == C64::new(0.0, 0.0) {
                        continue;
                    }
                    for xi in 0..x {
                        for ui in 0..x {
                            let lv = l[[xi, pi, ui]] * wv;
                            if lv == C64::new(0.0, 0.0) {
                                continue;
                            }
                            for yi in 0..y {
                                let row = (xi * d + j) * y + yi;
                                for vi in 0..y {
                                    h[[row, (ui * d + k) * y + vi]] += lv * r[[yi, qi, vi]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (&h + &linalg::dagger(&h)).mapv(|z| z * 0.5)
}

fn local_minimum(l: &Array3<C64>, w: &Array4<C64>, r: &Array3<C64>) -> VResult<(f64, Array3<C64>)> {
    let h = effective_operator(l, w, r);
    let (vals, vecs) = linalg::eigh(&h)?;
    let (x, d, y) = (l.dim().0, w.dim().1, r.dim().0);
    let v: Vec<C64> = vecs.column(0).to_vec();
    Ok((vals[0], Array3::from_shape_vec((x, d, y), v).expect("shape")))
}

/// Bond dimensions `min(D0, 2^i, 2^{N−i})` of a full-rank chain.
fn bond_profile(n: usize, d0: usize) -> Vec<usize> {
    (0..=n)
        .map(|i| {
            let left = 1usize.checked_shl(i.min(62) as u32).unwrap_or(usize::MAX);
            let right = 1usize.checked_shl((n - i).min(62) as u32).unwrap_or(usize::MAX);
            d0.min(left).min(right)
        })
        .collect()
}

/// Product state `bits` embedded in bond `D0` with noise of size `eps` on the
/// padding entries.
fn padded_product<R: Rng + ?Sized>(bits: &[u8], d0: usize, eps: f64, rng: &mut R) -> VResult<TensorTrain> {
    let n = bits.len();
    let b = bond_profile(n, d0);
    let sites = (0..n)
        .map(|i| {
            let mut a = Array3::<C64>::zeros((b[i], 2, b[i + 1]));
            for ((l, p, r), z) in a.indexed_iter_mut() {
                *z = if l == 0 && r == 0 && p == bits[i] as usize {
                    C64::new(1.0, 0.0)
                } else if l == 0 && r == 0 {
                    C64::new(0.0, 0.0)
                } else {
                    C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * eps
                };
            }
            a
        })
        .collect();
    Ok(TensorTrain::new(sites)?)
}

fn random_start<R: Rng + ?Sized>(n: usize, d0: usize, rng: &mut R) -> VResult<TensorTrain> {
    let b = bond_profile(n, d0);
    let sites = (0..n)
        .map(|i| Array3::from_shape_fn((b[i], 2, b[i + 1]), |_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)))
        .collect();
    Ok(TensorTrain::new(sites)?)
}

/// Alternating single-site sweeps from `init`.
fn sweep_from(init: TensorTrain, w: &[Array4<C64>], max_sweeps: usize, tol: f64) -> VResult<(TensorTrain, Vec<f64>, bool)> {
    let n = init.len();
    let mut psi = init;
    psi.canonicalize(0)?;
    let mut sites = psi.sites.clone();
    let nrm = sweep::frobenius(sites[0].iter().cloned());
    sites[0].mapv_inplace(|x| x / nrm);

    let unit = || Array3::from_elem((1, 1, 1), C64::new(1.0, 0.0));
    let mut left: Vec<Array3<C64>> = vec![unit(); n + 1];
    let mut right: Vec<Array3<C64>> = vec![unit(); n + 1];
    for i in (1..n).rev() {
        right[i] = grow_right(&right[i + 1], &sites[i], &w[i]);
    }
    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    for _ in 0..max_sweeps.max(1) {
        let mut obj = f64::NAN;
        for i in 0..n {
            let (val, a) = local_minimum(&left[i], &w[i], &right[i + 1])?;
            obj = val;
            sites[i] = a;
            if i + 1 < n {
                sweep::qr_left(&mut sites, i);
                left[i + 1] = grow_left(&left[i], &sites[i], &w[i]);
            }
        }
        history.push(obj);
        for i in (0..n).rev() {
            let (val, a) = local_minimum(&left[i], &w[i], &right[i + 1])?;
            obj = val;
            sites[i] = a;
            if i > 0 {
                sweep::lq_right(&mut sites, i);
                right[i] = grow_right(&right[i + 1], &sites[i], &w[i]);
            }
        }
        history.push(obj);
        let k = history.len();
        if k >= 4 {
            let prev = history[k - 3];
            let change = (prev - obj).abs();
            if change <= tol * obj.abs().max(1e-300) || obj.abs() < 1e-14 {
                converged = true;
                break;
            }
        }
    }
    let nrm = sweep::frobenius(sites[0].iter().cloned());
    sites[0].mapv_inplace(|x| x / nrm);
    Ok((TensorTrain::from_parts(sites, Some(0), 0.0), history, converged))
}

/// Minimize `⟨(H − E)²⟩` over MPS of bond `d0`: one run from the best
/// bitstring, one from a random start, keeping the lower objective.
pub fn minimize_variance_mps(spec: &IsingSpec, e: f64, d0: usize, max_sweeps: usize, tol: f64) -> VResult<VarMinResult> {
    minimize_variance_seeded(spec, e, d0, max_sweeps, tol, 0x7a11)
}

pub fn minimize_variance_seeded(spec: &IsingSpec, e: f64, d0: usize, max_sweeps: usize, tol: f64, rng_seed: u64) -> VResult<VarMinResult> {
    spec.validate()?;
    if d0 == 0 {
        return Err(VarMinError::Invalid("bond dimension must be at least 1".into()));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(VarMinError::Invalid(format!("tolerance {tol} must be positive")));
    }
    let k = shifted_square_mpo(spec, e)?;
    let w = operator_sites(&k);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let seed = seed_state_search(spec, e);
    let starts = [padded_product(&seed.bits, d0, 1e-6, &mut rng)?, random_start(spec.n, d0, &mut rng)?];
    let mut best: Option<(TensorTrain, Vec<f64>, bool)> = None;
    for s in starts {
        let run = sweep_from(s, &w, max_sweeps, tol)?;
        let better = match &best {
            None => true,
            Some(b) => run.1.last() < b.1.last(),
        };
        if better {
            best = Some(run);
        }
    }
    let (state, history, converged) = best.expect("at least one run");
    let h = model::build_hamiltonian_mpo(spec)?;
    let e_mean = expectation(&state, &h)?;
    let variance = expectation(&state, &k)?.max(0.0);
    let sigma_d = (variance - (e_mean - e).powi(2)).max(0.0).sqrt();
    let result = VarMinResult { state, target: e, e_mean, variance, sigma_d, sweep_history: history, converged };
    if !converged {
        return Err(VarMinError::NonConvergent(Box::new(result)));
    }
    Ok(result)
}

/// Best-so-far result whether or not the sweeps converged.
pub fn minimize_variance_lenient(spec: &IsingSpec, e: f64, d0: usize, max_sweeps: usize, tol: f64) -> VResult<VarMinResult> {
    match minimize_variance_mps(spec, e, d0, max_sweeps, tol) {
        Err(VarMinError::NonConvergent(r)) => {
            log::warn!("variance minimization (D0 = {d0}) stopped after {max_sweeps} sweeps");
            Ok(*r)
        }
        other => other,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineRow {
    pub d0: usize,
    pub e_mean: f64,
    pub sigma_d: f64,
    pub delta: f64,
    pub alpha: f64,
    pub value: f64,
    pub raw_value: f64,
    pub thermal_ref: f64,
    pub abs_gap: f64,
    pub imag_residue: f64,
    pub truncation_error: f64,
}

impl PipelineRow {
    pub const CSV_HEADER: &'static str = "D0,sigma_D,delta,alpha,value,thermal_ref,abs_gap";

    pub fn csv(&self) -> String {
        format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            self.d0, self.sigma_d, self.delta, self.alpha, self.value, self.thermal_ref, self.abs_gap
        )
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub max_sweeps: usize,
    pub tol: f64,
    pub mode: BackendMode,
    pub evolution: EvolutionConfig,
    /// Below this width the state is treated as an eigenstate and the filter
    /// is skipped.
    pub eigen_width: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { max_sweeps: 30, tol: 1e-10, mode: BackendMode::MpsOnDemand, evolution: EvolutionConfig::default(), eigen_width: 1e-6 }
    }
}

/// Filter each variance-minimized state with `δ = σ_D/(2√N)`, `α = 3σ_D` and
/// compare with the thermal value at `E`.
pub fn state_filter_pipeline(
    spec: &IsingSpec,
    e: f64,
    d0_list: &[usize],
    x: f64,
    observable: &Observable,
    thermal: ThermalMethod<'_>,
    opts: &PipelineOptions,
) -> VResult<Vec<PipelineRow>> {
    let tp = estimators::thermal_reference(spec, e, observable, thermal)?;
    let o_mpo = observable.mpo(spec.n);
    let mut rows = Vec::with_capacity(d0_list.len());
    for &d0 in d0_list {
        let vm = minimize_variance_lenient(spec, e, d0, opts.max_sweeps, opts.tol)?;
        let raw_value = expectation(&vm.state, &o_mpo)?;
        let sigma_d = vm.sigma_d;
        let delta = sigma_d / (2.0 * (spec.n as f64).sqrt());
        let alpha = 3.0 * sigma_d;
        let (value, imag_residue, truncation_error) = if sigma_d < opts.eigen_width {
            (raw_value, 0.0, 0.0)
        } else {
            let fp: FilterParams = filter::make_filter_params(e, delta, alpha, x)?;
            let family = build_evolution_family(spec, &fp, &opts.evolution, opts.mode)?;
            let fv = filter::filtered_observable_of_state(&Probe::Mps(&vm.state), &fp, observable, &family, filter::DEFAULT_FLOOR)?;
            (fv.value, fv.imag_residue, fv.error)
        };
        rows.push(PipelineRow {
            d0,
            e_mean: vm.e_mean,
            sigma_d,
            delta,
            alpha,
            value,
            raw_value,
            thermal_ref: tp.value,
            abs_gap: (value - tp.value).abs(),
            imag_residue,
            truncation_error,
        });
    }
    Ok(rows)
}

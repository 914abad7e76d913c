//! Metropolis sampling of the filter ensemble over a complete product basis.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evolution::{EvolutionError, EvolutionFamily, Probe};
use crate::filter::{AmplitudeSeries, FilterParams};
use crate::model::{self, IsingSpec, Observable};
use crate::tn::{self, TensorTrain};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("negative weight {weight:e} beyond tolerance {tol:e}")]
    NegativeWeight { weight: f64, tol: f64 },
    #[error("seed weight {weight:e} is not above the cutoff")]
    SeedBelowCutoff { weight: f64 },
    #[error("no proposal accepted after burn-in ({steps} steps)")]
    ChainStuck { steps: usize },
    #[error("invalid sampler configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Tn(#[from] tn::TnError),
}

type SResult<T> = Result<T, SamplerError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Proposal {
    SingleSiteFlip,
    SingleSitePauli,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Total chain steps including burn-in.
    pub n_samples: usize,
    pub burn_in: usize,
    pub proposal: Proposal,
    /// Proposals with `D < cutoff_rel · D_seed` are rejected outright.
    pub cutoff_rel: f64,
    pub rng_seed: u64,
    pub n_batches: usize,
    pub record_trace: bool,
    pub record_histogram: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_samples: 50_000,
            burn_in: 1_000,
            proposal: Proposal::SingleSiteFlip,
            cutoff_rel: 1e-4,
            rng_seed: 0,
            n_batches: 50,
            record_trace: false,
            record_histogram: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> SResult<()> {
        if self.n_samples <= self.burn_in {
            return Err(SamplerError::Invalid("n_samples must exceed burn_in".into()));
        }
        if !(0.0..1.0).contains(&self.cutoff_rel) {
            return Err(SamplerError::Invalid(format!("cutoff_rel {} outside [0, 1)", self.cutoff_rel)));
        }
        if self.n_batches < 2 {
            return Err(SamplerError::Invalid("need at least 2 batches".into()));
        }
        Ok(())
    }
}

/// The product basis the chain walks on.
#[derive(Clone, Debug)]
pub enum BasisKind {
    /// Bitstrings; entry 0 is spin up.
    Computational,
    /// Pauli strings (0 = 1, 1 = X, 2 = Y, 3 = Z) applied to a seed state.
    PauliDressed { seed: Arc<TensorTrain> },
}

/// A basis element with its mean energy and per-site width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisPoint {
    pub pauli_dressed: bool,
    pub config: Vec<u8>,
    pub e_phi: f64,
    pub sigma_phi: f64,
}

fn pauli(p: u8) -> Array2<C64> {
    match p {
        1 => model::pauli_x(),
        2 => model::pauli_y(),
        3 => model::pauli_z(),
        _ => model::eye2(),
    }
}

/// Pauli product up to phase, as XOR of `(x, z)` bit pairs.
fn pauli_mul(a: u8, b: u8) -> u8 {
    let bits = |p: u8| match p {
        1 => 0b10,
        2 => 0b11,
        3 => 0b01,
        _ => 0b00,
    };
    match bits(a) ^ bits(b) {
        0b10 => 1,
        0b11 => 2,
        0b01 => 3,
        _ => 0,
    }
}

/// `D`, the single-filter local value and diagnostics for one basis state.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LocalValue {
    pub d: f64,
    pub o_loc: f64,
    pub imag_residue: f64,
    pub error: f64,
}

/// Everything a chain needs that is shared between chains.
pub struct Sampler<'a> {
    pub spec: IsingSpec,
    pub fp: FilterParams,
    pub observable: Observable,
    pub family: &'a EvolutionFamily,
    pub basis: BasisKind,
}

impl<'a> Sampler<'a> {
    pub fn new(fp: &FilterParams, observable: &Observable, family: &'a EvolutionFamily, basis: BasisKind) -> Self {
        Self { spec: family.spec, fp: fp.clone(), observable: observable.clone(), family, basis }
    }

    /// Negative `D` within this bound is clamped to 0.
    pub fn negative_tolerance(&self) -> f64 {
        self.fp.ldos_norm() * (1e-10f64).max(2.0 * self.fp.tail)
    }

    pub fn state_of(&self, config: &[u8]) -> SResult<TensorTrain> {
        match &self.basis {
            BasisKind::Computational => Ok(TensorTrain::basis_state(config)?),
            BasisKind::PauliDressed { seed } => {
                let mut s = (**seed).clone();
                for (i, &p) in config.iter().enumerate() {
                    if p != 0 {
                        s.apply_one_site(i, &pauli(p));
                    }
                }
                Ok(s)
            }
        }
    }

    pub fn point(&self, config: &[u8]) -> SResult<BasisPoint> {
        match &self.basis {
            BasisKind::Computational => Ok(BasisPoint {
                pauli_dressed: false,
                config: config.to_vec(),
                e_phi: self.spec.bitstring_energy(config),
                sigma_phi: self.spec.g.abs(),
            }),
            BasisKind::PauliDressed { .. } => {
                let s = self.state_of(config)?;
                let h = model::build_hamiltonian_mpo(&self.spec).map_err(EvolutionError::from)?;
                let (hs, _) = tn::apply_mpo(&h, &s, &tn::TruncationPolicy::lossless())?;
                let e = tn::sandwich(&s, None, &hs)?.re;
                let e2 = tn::sandwich(&hs, None, &hs)?.re;
                Ok(BasisPoint {
                    pauli_dressed: true,
                    config: config.to_vec(),
                    e_phi: e,
                    sigma_phi: ((e2 - e * e).max(0.0) / self.spec.n as f64).sqrt(),
                })
            }
        }
    }

    /// Unclamped `Re Σ w a` and `Re Σ w a_O` with imaginary residues.
    pub fn raw_local(&self, config: &[u8]) -> SResult<RawLocal> {
        let fp = &self.fp;
        let mps;
        let probe = match &self.basis {
            BasisKind::Computational => Probe::Bits(config),
            BasisKind::PauliDressed { .. } => {
                mps = self.state_of(config)?;
                Probe::Mps(&mps)
            }
        };
        let diag_shortcut = matches!(self.basis, BasisKind::Computational) && self.observable.is_diagonal();
        let obs = if diag_shortcut { None } else { Some(&self.observable) };
        let amps = self.family.amplitudes(&probe, obs, fp.r_eff)?;
        let a = AmplitudeSeries::from_nonnegative(&amps.a);
        let w = fp.weights();
        let den: C64 = w.iter().zip(&a.values).map(|(w, z)| w * z).sum();
        let den_scale: f64 = fp.indices().zip(&a.values).map(|(m, z)| fp.coeff(m) * z.norm()).sum();
        let (num, num_scale) = match &amps.a_o {
            Some(ao) => (
                w.iter().zip(ao).map(|(w, z)| w * z).sum::<C64>(),
                fp.indices().zip(ao).map(|(m, z)| fp.coeff(m) * z.norm()).sum::<f64>(),
            ),
            None => {
                let v = self.observable.bitstring_value(config).expect("diagonal observable");
                (den * v, den_scale * v.abs())
            }
        };
        let imag = |z: C64, s: f64| if s > 0.0 { z.im.abs() / s } else { 0.0 };
        Ok(RawLocal {
            d: den.re * fp.ldos_norm(),
            d_o: num.re * fp.ldos_norm(),
            imag_residue: imag(den, den_scale).max(imag(num, num_scale)),
            error: amps.error,
        })
    }

    /// `D` clamped at zero within the negative tolerance, with `O_loc`.
    pub fn local_weight_and_value(&self, config: &[u8]) -> SResult<LocalValue> {
        let raw = self.raw_local(config)?;
        let tol = self.negative_tolerance();
        if raw.d < -tol {
            return Err(SamplerError::NegativeWeight { weight: raw.d, tol });
        }
        if raw.d <= 0.0 {
            return Ok(LocalValue { d: 0.0, o_loc: 0.0, imag_residue: raw.imag_residue, error: raw.error });
        }
        Ok(LocalValue { d: raw.d, o_loc: raw.d_o / raw.d, imag_residue: raw.imag_residue, error: raw.error })
    }

    /// All bitstrings, or all `4^N` Pauli strings (`Σ_P P|s⟩⟨s|P† = 2^N 1`).
    fn basis_configs(&self) -> SResult<Vec<Vec<u8>>> {
        let n = self.spec.n;
        let (base, limit) = match self.basis {
            BasisKind::Computational => (2usize, 16),
            BasisKind::PauliDressed { .. } => (4usize, 8),
        };
        if n > limit {
            return Err(SamplerError::Invalid(format!("exhaustive sum over {base}^{n} states")));
        }
        Ok((0..base.pow(n as u32))
            .map(|mut idx| {
                let mut c = vec![0u8; n];
                for i in (0..n).rev() {
                    c[i] = (idx % base) as u8;
                    idx /= base;
                }
                c
            })
            .collect())
    }

    /// `Σ_φ D_φ O_φ / Σ_φ D_φ` over the whole basis with unclamped weights
    /// (small `N` only). Returns the ratio and `Σ D`.
    pub fn basis_sum(&self) -> SResult<(f64, f64)> {
        let (mut num, mut den) = (0.0, 0.0);
        for cfg in self.basis_configs()? {
            let r = self.raw_local(&cfg)?;
            num += r.d_o;
            den += r.d;
        }
        Ok((num / den, den))
    }

    /// Every basis state with its clamped local value: the chain's target.
    pub fn basis_distribution(&self) -> SResult<Vec<(Vec<u8>, LocalValue)>> {
        self.basis_configs()?.into_iter().map(|c| self.local_weight_and_value(&c).map(|v| (c, v))).collect()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RawLocal {
    /// `D_φ`, possibly slightly negative from series truncation.
    pub d: f64,
    /// `D_φ · O_φ`.
    pub d_o: f64,
    pub imag_residue: f64,
    pub error: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub accepted: bool,
    pub d: f64,
    pub o_loc: f64,
    pub cumulative: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainResult {
    pub chain_index: u64,
    pub estimate: f64,
    pub stderr: f64,
    pub acceptance_rate: f64,
    pub cutoff_rate: f64,
    pub max_imag_residue: f64,
    pub max_truncation_error: f64,
    pub steps: usize,
    pub accepted: usize,
    pub cutoff_rejections: usize,
    pub seed_weight: f64,
    pub distinct_states: usize,
    #[serde(skip)]
    pub histogram: Option<BTreeMap<Vec<u8>, u64>>,
    #[serde(skip)]
    pub trace: Option<Vec<TraceRecord>>,
}

/// Mean and batch-means standard error.
pub fn batch_means(samples: &[f64], n_batches: usize) -> (f64, f64) {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n.max(1) as f64;
    let nb = n_batches.min(n);
    if nb < 2 {
        return (mean, f64::NAN);
    }
    let bs = n / nb;
    let means: Vec<f64> = (0..nb).map(|b| samples[b * bs..(b + 1) * bs].iter().sum::<f64>() / bs as f64).collect();
    let mm = means.iter().sum::<f64>() / nb as f64;
    let var = means.iter().map(|x| (x - mm).powi(2)).sum::<f64>() / (nb - 1) as f64;
    (mean, (var / nb as f64).sqrt())
}

/// One Metropolis chain seeded with `rng_seed + chain_index`.
pub fn metropolis_chain(sampler: &Sampler<'_>, seed: &[u8], scfg: &SamplerConfig, chain_index: u64) -> SResult<ChainResult> {
    scfg.validate()?;
    let n = sampler.spec.n;
    if seed.len() != n {
        return Err(SamplerError::Invalid(format!("seed has {} sites, model has {n}", seed.len())));
    }
    match (&sampler.basis, scfg.proposal) {
        (BasisKind::Computational, Proposal::SingleSiteFlip) | (BasisKind::PauliDressed { .. }, Proposal::SingleSitePauli) => {}
        _ => return Err(SamplerError::Invalid("proposal does not match the basis kind".into())),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scfg.rng_seed.wrapping_add(chain_index));
    let mut memo: HashMap<Vec<u8>, LocalValue> = HashMap::new();
    let eval = |cfg: &[u8], memo: &mut HashMap<Vec<u8>, LocalValue>| -> SResult<LocalValue> {
        if let Some(v) = memo.get(cfg) {
            return Ok(*v);
        }
        let v = sampler.local_weight_and_value(cfg)?;
        memo.insert(cfg.to_vec(), v);
        Ok(v)
    };

    let mut cur = seed.to_vec();
    let mut lv = eval(&cur, &mut memo)?;
    let seed_weight = lv.d;
    if seed_weight <= 0.0 {
        return Err(SamplerError::SeedBelowCutoff { weight: seed_weight });
    }
    let cutoff = scfg.cutoff_rel * seed_weight;
    let mut samples = Vec::with_capacity(scfg.n_samples - scfg.burn_in);
    let (mut accepted, mut accepted_post, mut cut) = (0usize, 0usize, 0usize);
    let mut max_imag = lv.imag_residue;
    let mut max_err = lv.error;
    let mut hist = scfg.record_histogram.then(BTreeMap::new);
    let mut trace = scfg.record_trace.then(Vec::new);
    let mut sum = 0.0;

    for step in 0..scfg.n_samples {
        let mut prop = cur.clone();
        let site = rng.random_range(0..n);
        match scfg.proposal {
            Proposal::SingleSiteFlip => prop[site] ^= 1,
            Proposal::SingleSitePauli => {
                let p = rng.random_range(1..=3u8);
                prop[site] = pauli_mul(prop[site], p);
            }
        }
        let new = eval(&prop, &mut memo)?;
        max_imag = max_imag.max(new.imag_residue);
        max_err = max_err.max(new.error);
        let accept = if new.d <= 0.0 || new.d < cutoff {
            cut += 1;
            false
        } else if new.d >= lv.d {
            true
        } else {
            rng.random::<f64>() < new.d / lv.d
        };
        if accept {
            cur = prop;
            lv = new;
            accepted += 1;
            if step >= scfg.burn_in {
                accepted_post += 1;
            }
        }
        if step >= scfg.burn_in {
            samples.push(lv.o_loc);
            sum += lv.o_loc;
            if let Some(h) = hist.as_mut() {
                *h.entry(cur.clone()).or_insert(0u64) += 1;
            }
            if let Some(t) = trace.as_mut() {
                t.push(TraceRecord { step, accepted: accept, d: lv.d, o_loc: lv.o_loc, cumulative: sum / samples.len() as f64 });
            }
        }
    }
    if accepted_post == 0 && lv.d > 0.0 {
        let distinct = memo.values().filter(|v| v.d > cutoff).count();
        if distinct > 1 {
            return Err(SamplerError::ChainStuck { steps: scfg.n_samples - scfg.burn_in });
        }
    }
    let (estimate, stderr) = batch_means(&samples, scfg.n_batches);
    Ok(ChainResult {
        chain_index,
        estimate,
        stderr,
        acceptance_rate: accepted as f64 / scfg.n_samples as f64,
        cutoff_rate: cut as f64 / scfg.n_samples as f64,
        max_imag_residue: max_imag,
        max_truncation_error: max_err,
        steps: scfg.n_samples,
        accepted,
        cutoff_rejections: cut,
        seed_weight,
        distinct_states: memo.len(),
        histogram: hist,
        trace,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PooledResult {
    pub estimate: f64,
    pub stderr: f64,
    pub acceptance_rate: f64,
    pub cutoff_rate: f64,
    pub max_imag_residue: f64,
    pub max_truncation_error: f64,
    pub chains: Vec<ChainResult>,
}

/// Independent chains in parallel, pooled with equal weights.
pub fn run_chains(sampler: &Sampler<'_>, seed: &[u8], scfg: &SamplerConfig, n_chains: usize) -> SResult<PooledResult> {
    let chains: Vec<ChainResult> =
        (0..n_chains.max(1) as u64).into_par_iter().map(|k| metropolis_chain(sampler, seed, scfg, k)).collect::<SResult<_>>()?;
    let k = chains.len() as f64;
    let estimate = chains.iter().map(|c| c.estimate).sum::<f64>() / k;
    let stderr = chains.iter().map(|c| c.stderr * c.stderr).sum::<f64>().sqrt() / k;
    Ok(PooledResult {
        estimate,
        stderr,
        acceptance_rate: chains.iter().map(|c| c.acceptance_rate).sum::<f64>() / k,
        cutoff_rate: chains.iter().map(|c| c.cutoff_rate).sum::<f64>() / k,
        max_imag_residue: chains.iter().map(|c| c.max_imag_residue).fold(0.0, f64::max),
        max_truncation_error: chains.iter().map(|c| c.max_truncation_error).fold(0.0, f64::max),
        chains,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub bits: Vec<u8>,
    pub objective: f64,
}

/// `⟨φ|(H − E)²|φ⟩` for a bitstring: `(E_φ − E)² + N g²`.
pub fn bitstring_objective(spec: &IsingSpec, bits: &[u8], e: f64) -> f64 {
    (spec.bitstring_energy(bits) - e).powi(2) + spec.bitstring_variance()
}

pub fn exhaustive_seed(spec: &IsingSpec, e: f64) -> SeedResult {
    let n = spec.n;
    let mut best = SeedResult { bits: vec![0; n], objective: f64::INFINITY };
    for idx in 0..(1usize << n) {
        let bits = crate::ed::index_to_bits(idx, n);
        let obj = bitstring_objective(spec, &bits, e);
        if obj < best.objective {
            best = SeedResult { bits, objective: obj };
        }
    }
    best
}

/// Single-flip steepest descent from `starts` random bitstrings.
pub fn greedy_seed<R: Rng + ?Sized>(spec: &IsingSpec, e: f64, starts: usize, rng: &mut R) -> SeedResult {
    let n = spec.n;
    let mut best = SeedResult { bits: vec![0; n], objective: f64::INFINITY };
    for _ in 0..starts.max(1) {
        let mut bits: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        let mut obj = bitstring_objective(spec, &bits, e);
        loop {
            let mut step = None;
            for i in 0..n {
                bits[i] ^= 1;
                let o = bitstring_objective(spec, &bits, e);
                bits[i] ^= 1;
                if o < obj - 1e-14 && step.is_none_or(|(_, so)| o < so) {
                    step = Some((i, o));
                }
            }
            match step {
                Some((i, o)) => {
                    bits[i] ^= 1;
                    obj = o;
                }
                None => break,
            }
        }
        if obj < best.objective {
            best = SeedResult { bits, objective: obj };
        }
    }
    best
}

/// Bitstring minimizing `⟨φ|(H − E)²|φ⟩`: exhaustive up to 20 sites, greedy
/// beyond.
pub fn seed_state_search(spec: &IsingSpec, e: f64) -> SeedResult {
    if spec.n <= 20 {
        exhaustive_seed(spec, e)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        greedy_seed(spec, e, 32, &mut rng)
    }
}

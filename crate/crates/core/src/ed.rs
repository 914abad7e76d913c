//! Dense exact diagonalization for small chains.
//!
//! Basis index bit `N−1−i` is the spin of site `i`, 0 meaning up, consistent
//! with [`crate::tn::TensorTrain::to_dense`].

use std::io::{Read, Write};
use std::path::Path;

use faer::Mat;
use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::filter::FilterParams;
use crate::linalg::{self, LinalgError};
use crate::model::{IsingSpec, ModelError, Observable};

pub const MAX_SITES: usize = 14;
pub const CACHE_MAGIC: &[u8; 5] = b"FESD1";

#[derive(Debug, Error)]
pub enum EdError {
    #[error("N = {0} exceeds the dense limit of {MAX_SITES} sites")]
    SizeTooLarge(usize),
    #[error("filter weights vanish at E = {0}")]
    VanishingDenominator(f64),
    #[error("no level within the window around E = {0}")]
    EmptyWindow(f64),
    #[error("state overlaps are required")]
    MissingOverlaps,
    #[error("state vector has length {got}, expected {want}")]
    BadState { got: usize, want: usize },
    #[error("corrupt spectrum cache: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn spin(s: usize, n: usize, i: usize) -> f64 {
    if (s >> (n - 1 - i)) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Dense real symmetric Hamiltonian.
pub fn dense_hamiltonian_real(spec: &IsingSpec) -> Result<Mat<f64>, EdError> {
    spec.validate()?;
    let n = spec.n;
    if n > MAX_SITES {
        return Err(EdError::SizeTooLarge(n));
    }
    let dim = 1usize << n;
    let mut h = Mat::<f64>::zeros(dim, dim);
    for s in 0..dim {
        let mut diag = 0.0;
        for i in 0..n {
            let z = spin(s, n, i);
            diag += spec.h * z;
            if i + 1 < n {
                diag += spec.j * z * spin(s, n, i + 1);
            }
            let t = s ^ (1 << (n - 1 - i));
            h[(t, s)] += spec.g;
        }
        h[(s, s)] += diag;
    }
    Ok(h)
}

/// `O v` for a normalized single-site sum.
pub fn apply_observable(obs: &Observable, n: usize, v: &[C64]) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); v.len()];
    let a = &obs.local;
    for (s, &x) in v.iter().enumerate() {
        if x == C64::new(0.0, 0.0) {
            continue;
        }
        for i in 0..n {
            let shift = n - 1 - i;
            let b = (s >> shift) & 1;
            let base = s & !(1 << shift);
            for bp in 0..2 {
                let coef = a[[bp, b]];
                if coef != C64::new(0.0, 0.0) {
                    out[base | (bp << shift)] += coef * x;
                }
            }
        }
    }
    let inv = 1.0 / n as f64;
    out.iter_mut().for_each(|z| *z *= inv);
    out
}

/// Eigenvalues, observable diagonal and optional state overlaps.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumData {
    pub eigenvalues: Vec<f64>,
    pub obs_diag: Vec<f64>,
    pub overlaps: Option<Vec<f64>>,
}

/// A state expressed in the eigenbasis: `c_k = ⟨k|ψ⟩`, `o_k = ⟨k|O|ψ⟩`.
#[derive(Clone, Debug)]
pub struct StateDecomp {
    pub c: Vec<C64>,
    pub o: Vec<C64>,
}

impl StateDecomp {
    pub fn overlaps(&self) -> Vec<f64> {
        self.c.iter().map(|x| x.norm_sqr()).collect()
    }
}

/// Full diagonalization kept in memory for repeated queries.
pub struct EdSystem {
    pub spec: IsingSpec,
    pub observable: Observable,
    pub eigenvalues: Vec<f64>,
    eigvecs: Mat<f64>,
    pub obs_diag: Vec<f64>,
}

impl EdSystem {
    pub fn new(spec: &IsingSpec, observable: &Observable) -> Result<Self, EdError> {
        let h = dense_hamiltonian_real(spec)?;
        let (vals, vecs) = linalg::eigh_real(&h)?;
        let n = spec.n;
        let dim = vals.len();
        let obs_diag = (0..dim)
            .map(|k| {
                let col: Vec<C64> = (0..dim).map(|i| C64::new(vecs[(i, k)], 0.0)).collect();
                let oc = apply_observable(observable, n, &col);
                col.iter().zip(&oc).map(|(a, b)| a.conj() * b).sum::<C64>().re
            })
            .collect();
        Ok(Self { spec: *spec, observable: observable.clone(), eigenvalues: vals, eigvecs: vecs, obs_diag })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Eigenvector `k` as a dense complex vector.
    pub fn eigenvector(&self, k: usize) -> Vec<C64> {
        (0..self.dim()).map(|i| C64::new(self.eigvecs[(i, k)], 0.0)).collect()
    }

    fn to_eigenbasis(&self, v: &[C64]) -> Vec<C64> {
        let dim = self.dim();
        let (re, im): (Vec<f64>, Vec<f64>) = v.iter().map(|z| (z.re, z.im)).unzip();
        let re_m = Mat::from_fn(dim, 1, |i, _| re[i]);
        let im_m = Mat::from_fn(dim, 1, |i, _| im[i]);
        let cr = self.eigvecs.transpose() * &re_m;
        let ci = self.eigvecs.transpose() * &im_m;
        (0..dim).map(|k| C64::new(cr[(k, 0)], ci[(k, 0)])).collect()
    }

    fn from_eigenbasis(&self, c: &[C64]) -> Vec<C64> {
        let dim = self.dim();
        let re_m = Mat::from_fn(dim, 1, |i, _| c[i].re);
        let im_m = Mat::from_fn(dim, 1, |i, _| c[i].im);
        let vr = &self.eigvecs * &re_m;
        let vi = &self.eigvecs * &im_m;
        (0..dim).map(|i| C64::new(vr[(i, 0)], vi[(i, 0)])).collect()
    }

    pub fn decompose(&self, state: &[C64]) -> Result<StateDecomp, EdError> {
        if state.len() != self.dim() {
            return Err(EdError::BadState { got: state.len(), want: self.dim() });
        }
        let ov = apply_observable(&self.observable, self.spec.n, state);
        Ok(StateDecomp { c: self.to_eigenbasis(state), o: self.to_eigenbasis(&ov) })
    }

    /// Decomposition of a computational basis state given by its index.
    pub fn decompose_basis(&self, index: usize) -> StateDecomp {
        let dim = self.dim();
        let c: Vec<C64> = (0..dim).map(|k| C64::new(self.eigvecs[(index, k)], 0.0)).collect();
        if self.observable.is_diagonal() {
            let bits = index_to_bits(index, self.spec.n);
            let val = self.observable.bitstring_value(&bits).expect("diagonal");
            let o = c.iter().map(|x| x * val).collect();
            return StateDecomp { c, o };
        }
        let mut e = vec![C64::new(0.0, 0.0); dim];
        e[index] = C64::new(1.0, 0.0);
        self.decompose(&e).expect("basis vector has the right length")
    }

    /// `e^{−iHt} ψ` for a state in eigenbasis form, returned in the
    /// computational basis.
    pub fn evolve(&self, sd: &StateDecomp, t: f64) -> Vec<C64> {
        let c: Vec<C64> =
            sd.c.iter().zip(&self.eigenvalues).map(|(c, &l)| c * C64::from_polar(1.0, -l * t)).collect();
        self.from_eigenbasis(&c)
    }

    /// `⟨ψ|e^{−iHt}|ψ⟩`.
    pub fn amplitude(&self, sd: &StateDecomp, t: f64) -> C64 {
        sd.c.iter().zip(&self.eigenvalues).map(|(c, &l)| c.norm_sqr() * C64::from_polar(1.0, -l * t)).sum()
    }

    /// `⟨ψ|O e^{−iHt}|ψ⟩`.
    pub fn obs_amplitude(&self, sd: &StateDecomp, t: f64) -> C64 {
        sd.c.iter()
            .zip(&sd.o)
            .zip(&self.eigenvalues)
            .map(|((c, o), &l)| o.conj() * c * C64::from_polar(1.0, -l * t))
            .sum()
    }

    /// `tr e^{−iHt} / 2^N`.
    pub fn trace_u(&self, t: f64) -> C64 {
        let s: C64 = self.eigenvalues.iter().map(|&l| C64::from_polar(1.0, -l * t)).sum();
        s / self.dim() as f64
    }

    /// `tr(O e^{−iHt}) / 2^N`.
    pub fn trace_ou(&self, t: f64) -> C64 {
        let s: C64 =
            self.eigenvalues.iter().zip(&self.obs_diag).map(|(&l, &o)| o * C64::from_polar(1.0, -l * t)).sum();
        s / self.dim() as f64
    }

    pub fn apply_observable(&self, v: &[C64]) -> Vec<C64> {
        apply_observable(&self.observable, self.spec.n, v)
    }

    pub fn spectrum(&self, state: Option<&[C64]>) -> Result<SpectrumData, EdError> {
        let overlaps = match state {
            Some(s) => Some(self.decompose(s)?.overlaps()),
            None => None,
        };
        Ok(SpectrumData { eigenvalues: self.eigenvalues.clone(), obs_diag: self.obs_diag.clone(), overlaps })
    }
}

pub fn index_to_bits(index: usize, n: usize) -> Vec<u8> {
    (0..n).map(|i| ((index >> (n - 1 - i)) & 1) as u8).collect()
}

pub fn bits_to_index(bits: &[u8]) -> usize {
    bits.iter().fold(0, |acc, &b| (acc << 1) | b as usize)
}

pub fn ed_spectrum(spec: &IsingSpec, observable: &Observable, state: Option<&[C64]>) -> Result<SpectrumData, EdError> {
    EdSystem::new(spec, observable)?.spectrum(state)
}

#[derive(Clone, Debug)]
pub enum FilterKind {
    /// `exp(−(λ−E)²/2δ²)`.
    Gaussian { delta: f64 },
    /// The truncated cosine series of the given parameters.
    Cosine(FilterParams),
}

impl FilterKind {
    pub fn delta(&self) -> f64 {
        match self {
            Self::Gaussian { delta } => *delta,
            Self::Cosine(fp) => fp.delta,
        }
    }

    pub fn weight(&self, e: f64, lambda: f64) -> f64 {
        match self {
            Self::Gaussian { delta } => (-(lambda - e).powi(2) / (2.0 * delta * delta)).exp(),
            Self::Cosine(fp) => {
                let mut fp = fp.clone();
                fp.energy = e;
                fp.scalar_value(lambda)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FilterValues {
    pub trace_ratio: f64,
    /// `Σ_k w_k / (√(2π) δ 2^N)`.
    pub dos: f64,
    pub state_filter_value: Option<f64>,
}

/// Exact filter-ensemble values; with a state, also the filtered-state value
/// `⟨ψ|P O P|ψ⟩ / ⟨ψ|P²|ψ⟩` including off-diagonal terms.
pub fn ed_filter_values(
    sys: &EdSystem,
    e: f64,
    kind: &FilterKind,
    state: Option<&StateDecomp>,
) -> Result<FilterValues, EdError> {
    let w: Vec<f64> = sys.eigenvalues.iter().map(|&l| kind.weight(e, l)).collect();
    let den: f64 = w.iter().sum();
    let scale: f64 = w.iter().map(|x| x.abs()).sum();
    if den.abs() <= 1e-300 || den.abs() < 1e-14 * scale {
        return Err(EdError::VanishingDenominator(e));
    }
    let num: f64 = w.iter().zip(&sys.obs_diag).map(|(w, o)| w * o).sum();
    let delta = kind.delta();
    let dos = den / ((2.0 * std::f64::consts::PI).sqrt() * delta * sys.dim() as f64);
    let state_filter_value = match state {
        None => None,
        Some(sd) => {
            let pc: Vec<C64> = sd.c.iter().zip(&w).map(|(c, w)| c * *w).collect();
            let den2: f64 = pc.iter().map(|x| x.norm_sqr()).sum();
            if den2 <= 1e-300 {
                return Err(EdError::VanishingDenominator(e));
            }
            let v = sys.from_eigenbasis(&pc);
            let ov = sys.apply_observable(&v);
            let num2: C64 = v.iter().zip(&ov).map(|(a, b)| a.conj() * b).sum();
            Some(num2.re / den2)
        }
    };
    Ok(FilterValues { trace_ratio: num / den, dos, state_filter_value })
}

/// Unweighted mean of `O_kk` over `|E_k − E| ≤ window/2`.
pub fn ed_microcanonical(sd: &SpectrumData, e: f64, window: f64) -> Result<f64, EdError> {
    let (sum, count) = sd
        .eigenvalues
        .iter()
        .zip(&sd.obs_diag)
        .filter(|(l, _)| (*l - e).abs() <= window / 2.0)
        .fold((0.0, 0usize), |(s, c), (_, o)| (s + o, c + 1));
    if count == 0 {
        return Err(EdError::EmptyWindow(e));
    }
    Ok(sum / count as f64)
}

/// `Σ_k |c_k|² O_kk`.
pub fn ed_diagonal_ensemble(sd: &SpectrumData) -> Result<f64, EdError> {
    let ov = sd.overlaps.as_ref().ok_or(EdError::MissingOverlaps)?;
    Ok(ov.iter().zip(&sd.obs_diag).map(|(p, o)| p * o).sum())
}

/// Thermal `(⟨H⟩, ⟨O⟩)` at inverse temperature `beta` (any sign).
pub fn ed_gibbs(sd: &SpectrumData, beta: f64) -> (f64, f64) {
    let ev = &sd.eigenvalues;
    let shift = if beta >= 0.0 {
        ev.iter().cloned().fold(f64::INFINITY, f64::min)
    } else {
        ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    };
    let (mut z, mut ez, mut oz) = (0.0, 0.0, 0.0);
    for (&l, &o) in ev.iter().zip(&sd.obs_diag) {
        let w = (-beta * (l - shift)).exp();
        z += w;
        ez += w * l;
        oz += w * o;
    }
    (ez / z, oz / z)
}

pub fn write_spectrum(w: &mut impl Write, sd: &SpectrumData) -> std::io::Result<()> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(sd.eigenvalues.len() as u64).to_le_bytes())?;
    for x in sd.eigenvalues.iter().chain(&sd.obs_diag) {
        w.write_all(&x.to_le_bytes())?;
    }
    match &sd.overlaps {
        Some(ov) => {
            w.write_all(&[1])?;
            for x in ov {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

pub fn read_spectrum(r: &mut impl Read) -> Result<SpectrumData, EdError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 13 || &buf[..5] != CACHE_MAGIC {
        return Err(EdError::Corrupt("bad magic".into()));
    }
    let count = u64::from_le_bytes(buf[5..13].try_into().expect("8 bytes")) as usize;
    let f64s = |off: usize, k: usize| -> Result<Vec<f64>, EdError> {
        let end = off + 8 * k;
        if buf.len() < end {
            return Err(EdError::Corrupt("truncated".into()));
        }
        Ok(buf[off..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    };
    let eigenvalues = f64s(13, count)?;
    let obs_diag = f64s(13 + 8 * count, count)?;
    let flag_at = 13 + 16 * count;
    let flag = *buf.get(flag_at).ok_or_else(|| EdError::Corrupt("truncated".into()))?;
    let overlaps = match flag {
        0 => None,
        1 => Some(f64s(flag_at + 1, count)?),
        _ => return Err(EdError::Corrupt("bad overlap flag".into())),
    };
    let expected = flag_at + 1 + if flag == 1 { 8 * count } else { 0 };
    if buf.len() != expected {
        return Err(EdError::Corrupt("unexpected length".into()));
    }
    Ok(SpectrumData { eigenvalues, obs_diag, overlaps })
}

/// Load a cached spectrum from `dir/<key>.fesd`, computing and storing it on a
/// miss.
pub fn cached_spectrum(dir: &Path, key: &str, build: impl FnOnce() -> Result<SpectrumData, EdError>) -> Result<SpectrumData, EdError> {
    let path = dir.join(format!("{key}.fesd"));
    if let Ok(mut f) = std::fs::File::open(&path) {
        if let Ok(sd) = read_spectrum(&mut f) {
            log::info!("spectrum cache hit: {}", path.display());
            return Ok(sd);
        }
        log::warn!("ignoring unreadable spectrum cache {}", path.display());
    }
    let sd = build()?;
    std::fs::create_dir_all(dir)?;
    let mut f = std::fs::File::create(&path)?;
    write_spectrum(&mut f, &sd)?;
    Ok(sd)
}

//! Cosine-power energy filter `cos^M((H−E)/α)` and its truncated series
//! `Σ_{|m|≤R} c_m e^{iEt_m} e^{−iHt_m}` with `t_m = 2m/α`.

use ndarray::Array2;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evolution::{EvolutionError, EvolutionFamily, Probe};
use crate::model::{IsingSpec, Observable};

const FLOOR_GUARD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("filter width too large: M = {0} < 2 (need alpha >= sqrt(2) delta)")]
    WidthTooLarge(u64),
    #[error("parameter {0} must be positive and finite")]
    NonPositiveParameter(&'static str),
    #[error("series has {got} entries, expected {want}")]
    IndexMismatch { got: usize, want: usize },
    #[error("denominator {value:e} is below the floor {floor:e}")]
    VanishingDenominator { value: f64, floor: f64 },
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub energy: f64,
    pub delta: f64,
    pub alpha: f64,
    pub x: f64,
    pub m: u64,
    pub r_eff: usize,
    /// `c_0 … c_{R_eff}`; negative indices follow from `c_{−m} = c_m`.
    pub coeffs: Vec<f64>,
    /// `Σ_{|m|>R_eff} c_m`.
    pub tail: f64,
}

fn floor_guarded(x: f64) -> f64 {
    (x * (1.0 + FLOOR_GUARD)).floor()
}

pub fn make_filter_params(energy: f64, delta: f64, alpha: f64, x: f64) -> Result<FilterParams, FilterError> {
    for (name, v) in [("delta", delta), ("alpha", alpha), ("x", x)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(FilterError::NonPositiveParameter(name));
        }
    }
    if !energy.is_finite() {
        return Err(FilterError::NonPositiveParameter("E"));
    }
    let ratio = floor_guarded((alpha / delta).powi(2));
    if ratio > 1e15 {
        return Err(FilterError::NonPositiveParameter("alpha/delta too large"));
    }
    let mut m = ratio as u64;
    m -= m % 2;
    if m < 2 {
        return Err(FilterError::WidthTooLarge(m));
    }
    let half = (m / 2) as usize;
    let r_eff = (floor_guarded(x * alpha / delta) as usize).min(half);

    // Center value from log-gamma, the rest by the ratio
    // c_{k+1}/c_k = (M/2 − k)/(M/2 + k + 1), then exact normalization.
    let mf = m as f64;
    let hf = half as f64;
    let log_c0 = libm::lgamma(mf + 1.0) - 2.0 * libm::lgamma(hf + 1.0) - mf * std::f64::consts::LN_2;
    let mut all = Vec::with_capacity(half + 1);
    let mut c = log_c0.exp();
    all.push(c);
    for k in 0..half {
        c *= (hf - k as f64) / (hf + k as f64 + 1.0);
        if c == 0.0 {
            break;
        }
        all.push(c);
    }
    let total = all[0] + 2.0 * all[1..].iter().rev().sum::<f64>();
    all.iter_mut().for_each(|c| *c /= total);
    let tail = 2.0 * all.iter().skip(r_eff + 1).rev().sum::<f64>();
    all.resize(r_eff + 1, 0.0);
    Ok(FilterParams { energy, delta, alpha, x, m, r_eff, coeffs: all, tail })
}

/// `α = 3 · max(σ √N, δ)`.
pub fn choose_alpha(sigma_state: f64, n: usize, delta: f64) -> f64 {
    3.0 * (sigma_state * (n as f64).sqrt()).max(delta)
}

/// `α = √(J² + g² + h²) · N`, covering the whole spectrum.
pub fn full_spectrum_alpha(spec: &IsingSpec) -> f64 {
    (spec.j * spec.j + spec.g * spec.g + spec.h * spec.h).sqrt() * spec.n as f64
}

impl FilterParams {
    pub fn with_energy(&self, energy: f64) -> Self {
        Self { energy, ..self.clone() }
    }

    /// Number of series terms `2 R_eff + 1`.
    pub fn len(&self) -> usize {
        2 * self.r_eff + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coeff(&self, m: i64) -> f64 {
        self.coeffs.get(m.unsigned_abs() as usize).copied().unwrap_or(0.0)
    }

    pub fn time(&self, m: i64) -> f64 {
        2.0 * m as f64 / self.alpha
    }

    /// `t_0 … t_{R_eff}`.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.r_eff as i64).map(|m| self.time(m)).collect()
    }

    /// Signed indices `−R_eff … R_eff` in series order.
    pub fn indices(&self) -> impl Iterator<Item = i64> {
        let r = self.r_eff as i64;
        -r..=r
    }

    /// Bound `2 e^{−x²/2}` on the discarded coefficient mass.
    pub fn tail_bound(&self) -> f64 {
        2.0 * (-self.x * self.x / 2.0).exp()
    }

    /// Truncated series at a single eigenvalue `λ`:
    /// `Σ_{|m|≤R} c_m cos((λ − E) t_m)`.
    pub fn scalar_value(&self, lambda: f64) -> f64 {
        let d = lambda - self.energy;
        self.coeffs[0] + 2.0 * (1..=self.r_eff).map(|m| self.coeffs[m] * (d * self.time(m as i64)).cos()).sum::<f64>()
    }

    /// The untruncated kernel `cos^M((λ − E)/α)`.
    pub fn cosine_value(&self, lambda: f64) -> f64 {
        ((lambda - self.energy) / self.alpha).cos().powf(self.m as f64)
    }

    /// The target Gaussian `exp(−(λ − E)²/2δ²)`.
    pub fn gaussian_value(&self, lambda: f64) -> f64 {
        (-(lambda - self.energy).powi(2) / (2.0 * self.delta * self.delta)).exp()
    }

    /// Conservative validity check `|λ − E| ≤ απ/2` over a spectral range.
    pub fn check_range(&self, lo: f64, hi: f64) -> bool {
        let r = self.alpha * std::f64::consts::FRAC_PI_2;
        (lo - self.energy).abs() <= r && (hi - self.energy).abs() <= r
    }

    /// `c_m e^{iEt_m}` for `m = −R … R`.
    pub fn weights(&self) -> Vec<C64> {
        self.indices().map(|m| self.coeff(m) * C64::from_polar(1.0, self.energy * self.time(m))).collect()
    }

    /// Stable textual key of the parameters that shape the time grid.
    pub fn grid_key(&self) -> String {
        format!("alpha={:e};r={}", self.alpha, self.r_eff)
    }

    pub fn key(&self) -> String {
        format!("E={:e};delta={:e};alpha={:e};x={:e}", self.energy, self.delta, self.alpha, self.x)
    }

    /// `1 / (√(2π) δ)`.
    pub fn ldos_norm(&self) -> f64 {
        1.0 / ((2.0 * std::f64::consts::PI).sqrt() * self.delta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SymmetryTag {
    ConjugateSymmetric,
    General,
}

/// `z_m` for `m = −R … R`.
#[derive(Clone, Debug)]
pub struct AmplitudeSeries {
    pub values: Vec<C64>,
    pub symmetry: SymmetryTag,
}

impl AmplitudeSeries {
    /// Extend `z_0 … z_R` to negative indices by conjugation.
    pub fn from_nonnegative(nonneg: &[C64]) -> Self {
        let mut values: Vec<C64> = nonneg.iter().skip(1).rev().map(|z| z.conj()).collect();
        values.extend_from_slice(nonneg);
        Self { values, symmetry: SymmetryTag::ConjugateSymmetric }
    }

    pub fn general(values: Vec<C64>) -> Self {
        Self { values, symmetry: SymmetryTag::General }
    }

    pub fn r(&self) -> usize {
        self.values.len() / 2
    }

    pub fn get(&self, m: i64) -> C64 {
        self.values[(m + self.r() as i64) as usize]
    }

    pub fn max_symmetry_defect(&self) -> f64 {
        let r = self.r() as i64;
        (0..=r).map(|m| (self.get(-m) - self.get(m).conj()).norm()).fold(0.0, f64::max)
    }
}

/// `Σ_m c_m e^{iEt_m} z_m`.
pub fn series_combine(fp: &FilterParams, series: &AmplitudeSeries) -> Result<C64, FilterError> {
    if series.values.len() != fp.len() {
        return Err(FilterError::IndexMismatch { got: series.values.len(), want: fp.len() });
    }
    Ok(fp.weights().iter().zip(&series.values).map(|(w, z)| w * z).sum())
}

/// Series result with its imaginary residue relative to `Σ|c_m z_m|`.
#[derive(Clone, Copy, Debug)]
pub struct Combined {
    pub value: f64,
    pub imag_residue: f64,
}

fn combine_real(fp: &FilterParams, series: &AmplitudeSeries) -> Result<Combined, FilterError> {
    let v = series_combine(fp, series)?;
    let scale: f64 = fp.indices().zip(&series.values).map(|(m, z)| fp.coeff(m) * z.norm()).sum();
    Ok(Combined { value: v.re, imag_residue: if scale > 0.0 { v.im.abs() / scale } else { 0.0 } })
}

/// Signed filtered ratio `Re[Σ w z_O] / Re[Σ w z]` with the denominator
/// floor relative to `Σ c_m`.
pub fn single_filter_ratio(
    fp: &FilterParams,
    num: &AmplitudeSeries,
    den: &AmplitudeSeries,
    floor_rel: f64,
) -> Result<(f64, f64), FilterError> {
    let n = combine_real(fp, num)?;
    let d = combine_real(fp, den)?;
    let floor = floor_rel * fp.coeffs.iter().sum::<f64>();
    if d.value.abs() <= floor {
        return Err(FilterError::VanishingDenominator { value: d.value, floor });
    }
    Ok((n.value / d.value, n.imag_residue.max(d.imag_residue)))
}

/// `Re[Σ_{m,n} w̄_m w_n A_{mn}] / Re[Σ_{m,n} w̄_m w_n G_{mn}]` with
/// `A_{mn} = ⟨ψ(t_m)|O|ψ(t_n)⟩` and `G_{mn} = ⟨ψ(t_m)|ψ(t_n)⟩`.
pub fn double_sum_ratio(
    fp: &FilterParams,
    a_o: &Array2<C64>,
    gram: &Array2<C64>,
    floor_rel: f64,
) -> Result<DoubleSum, FilterError> {
    let k = fp.len();
    for a in [a_o, gram] {
        if a.dim() != (k, k) {
            return Err(FilterError::IndexMismatch { got: a.nrows(), want: k });
        }
    }
    let w = fp.weights();
    let quad = |a: &Array2<C64>| -> C64 {
        let mut s = C64::new(0.0, 0.0);
        for i in 0..k {
            for j in 0..k {
                s += w[i].conj() * w[j] * a[[i, j]];
            }
        }
        s
    };
    let num = quad(a_o);
    let den = quad(gram);
    let floor = floor_rel * fp.coeffs.iter().map(|c| c * c).sum::<f64>();
    if den.re.abs() <= floor {
        return Err(FilterError::VanishingDenominator { value: den.re, floor });
    }
    Ok(DoubleSum {
        value: num.re / den.re,
        numerator: num,
        denominator: den,
        imag_residue: (num.im.abs() / num.norm().max(1e-300)).max(den.im.abs() / den.norm().max(1e-300)),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct DoubleSum {
    pub value: f64,
    pub numerator: C64,
    pub denominator: C64,
    pub imag_residue: f64,
}

/// Default relative floor for vanishing denominators.
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// Amplitudes `a(t_m)` (and `a_O(t_m)` when an observable is given) of a
/// state for every signed `m` of the filter.
pub fn state_amplitudes(
    probe: &Probe<'_>,
    fp: &FilterParams,
    observable: Option<&Observable>,
    family: &EvolutionFamily,
) -> Result<(AmplitudeSeries, Option<AmplitudeSeries>, f64), FilterError> {
    let amps = family.amplitudes(probe, observable, fp.r_eff)?;
    Ok((AmplitudeSeries::from_nonnegative(&amps.a), amps.a_o.map(AmplitudeSeries::general), amps.error))
}

#[derive(Clone, Copy, Debug)]
pub struct Ldos {
    pub value: f64,
    pub imag_residue: f64,
    pub error: f64,
}

/// `D = Re[Σ c_m e^{iEt_m} a(t_m)] / (√(2π) δ)`.
pub fn ldos_of_state(probe: &Probe<'_>, fp: &FilterParams, family: &EvolutionFamily) -> Result<Ldos, FilterError> {
    let (a, _, error) = state_amplitudes(probe, fp, None, family)?;
    let c = combine_real(fp, &a)?;
    Ok(Ldos { value: c.value * fp.ldos_norm(), imag_residue: c.imag_residue, error })
}

#[derive(Clone, Copy, Debug)]
pub struct FilteredValue {
    pub value: f64,
    pub imag_residue: f64,
    pub error: f64,
    /// `⟨ψ|P²|ψ⟩`.
    pub norm: f64,
}

/// `⟨ψ|P O P|ψ⟩ / ⟨ψ|P²|ψ⟩` without forming `P|ψ⟩`.
pub fn filtered_observable_of_state(
    probe: &Probe<'_>,
    fp: &FilterParams,
    observable: &Observable,
    family: &EvolutionFamily,
    floor_rel: f64,
) -> Result<FilteredValue, FilterError> {
    let grid = family.double_grid(probe, observable, fp.r_eff)?;
    let ds = double_sum_ratio(fp, &grid.a_o, &grid.gram, floor_rel)?;
    Ok(FilteredValue { value: ds.value, imag_residue: ds.imag_residue, error: grid.error, norm: ds.denominator.re })
}

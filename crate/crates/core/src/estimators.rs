//! Sampling-free filter-ensemble quantities: direct trace ratios, the
//! broadened DOS, thermal references and the Gaussian-DOS predictions.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ed::{self, SpectrumData};
use crate::evolution::{EvolutionError, EvolutionFamily, GibbsBuilder};
use crate::filter::FilterParams;
use crate::model::{self, IsingSpec, Observable};
use crate::tn::{self, TruncationPolicy};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("vanishing DOS weight {weight:e} at E = {energy} (floor {floor:e})")]
    VanishingDenominator { energy: f64, weight: f64, floor: f64 },
    #[error("E = {energy} is outside the thermal range ({lo}, {hi})")]
    OutOfThermalRange { energy: f64, lo: f64, hi: f64 },
    #[error("bisection did not bracket E = {0}")]
    NoBracket(f64),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Tn(#[from] tn::TnError),
}

type EstResult<T> = Result<T, EstimatorError>;

/// `tr U(t_m)/2^N` and `tr(O U(t_m))/2^N` for `m = 0 … R`, independent of
/// the filter center so one table serves a whole energy scan.
#[derive(Clone, Debug)]
pub struct TraceTable {
    pub tr_u: Vec<C64>,
    pub tr_ou: Vec<C64>,
    pub errors: Vec<f64>,
}

impl TraceTable {
    pub fn new(family: &EvolutionFamily, observable: &Observable, r: usize) -> EstResult<Self> {
        let t = family.traces(observable, r)?;
        let errors = (0..=r).map(|m| family.operator_error(m)).collect();
        Ok(Self { tr_u: t.iter().map(|x| x.0).collect(), tr_ou: t.iter().map(|x| x.1).collect(), errors })
    }

    fn combine(fp: &FilterParams, vals: &[C64]) -> C64 {
        let mut s = fp.coeffs[0] * vals[0] * C64::from_polar(1.0, fp.energy * fp.time(0));
        for m in 1..=fp.r_eff {
            let w = fp.coeffs[m] * C64::from_polar(1.0, fp.energy * fp.time(m as i64));
            // m and −m together; tr(U(−t)) = conj(tr U(t)) for Hermitian O.
            s += w * vals[m] + w.conj() * vals[m].conj();
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TraceRatio {
    pub energy: f64,
    pub value: f64,
    /// `Re Σ c_m e^{iEt_m} tr U(t_m) / 2^N`.
    pub dos_weight: f64,
    pub imag_residue: f64,
    pub truncation_error: f64,
}

/// Ratio from a precomputed table; `floor` is an absolute bound on
/// `dos_weight`.
pub fn trace_ratio_from_table(fp: &FilterParams, table: &TraceTable, floor: f64) -> EstResult<TraceRatio> {
    let den = TraceTable::combine(fp, &table.tr_u);
    let num = TraceTable::combine(fp, &table.tr_ou);
    if den.re.abs() <= floor || den.re == 0.0 {
        return Err(EstimatorError::VanishingDenominator { energy: fp.energy, weight: den.re, floor });
    }
    let imag = (den.im.abs() / den.norm()).max(if num.norm() > 0.0 { num.im.abs() / num.norm() } else { 0.0 });
    Ok(TraceRatio {
        energy: fp.energy,
        value: num.re / den.re,
        dos_weight: den.re,
        imag_residue: imag,
        truncation_error: table.errors[fp.r_eff],
    })
}

/// `Re[Σ c e^{iEt} tr(O U)] / Re[Σ c e^{iEt} tr U]`.
pub fn direct_trace_ratio(family: &EvolutionFamily, fp: &FilterParams, observable: &Observable, floor: f64) -> EstResult<TraceRatio> {
    let table = TraceTable::new(family, observable, fp.r_eff)?;
    trace_ratio_from_table(fp, &table, floor)
}

/// Broadened DOS `tr F(E) / (√(2π) δ 2^N)`.
pub fn dos_from_table(fp: &FilterParams, table: &TraceTable) -> f64 {
    TraceTable::combine(fp, &table.tr_u).re * fp.ldos_norm()
}

pub fn dos_trace(family: &EvolutionFamily, fp: &FilterParams) -> EstResult<f64> {
    let obs = match &family.source {
        crate::evolution::FamilySource::Exact(sys) => sys.observable.clone(),
        _ => Observable::by_name("m_z").expect("registered"),
    };
    let table = TraceTable::new(family, &obs, fp.r_eff)?;
    let d = dos_from_table(fp, &table);
    let tol = fp.ldos_norm() * (1e-10f64).max(2.0 * fp.tail);
    if d < -tol {
        log::warn!("negative DOS {d:e} at E = {} beyond tolerance {tol:e}", fp.energy);
    }
    Ok(d)
}

/// One row of an energy scan.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScanRow {
    pub energy: f64,
    pub energy_per_site: f64,
    pub value: Option<f64>,
    pub dos_weight: f64,
    pub imag_residue: f64,
    pub truncation_error: f64,
}

/// Trace ratio over a list of energies sharing one family. Points below
/// `1e-10` of the `E = 0` weight report no value.
pub fn trace_scan(family: &EvolutionFamily, fp: &FilterParams, observable: &Observable, energies: &[f64]) -> EstResult<Vec<ScanRow>> {
    let table = TraceTable::new(family, observable, fp.r_eff)?;
    let ref_weight = TraceTable::combine(&fp.with_energy(0.0), &table.tr_u).re.abs();
    let floor = 1e-10 * ref_weight;
    let n = family.spec.n as f64;
    Ok(energies
        .iter()
        .map(|&e| {
            let f = fp.with_energy(e);
            match trace_ratio_from_table(&f, &table, floor) {
                Ok(r) => ScanRow {
                    energy: e,
                    energy_per_site: e / n,
                    value: Some(r.value),
                    dos_weight: r.dos_weight,
                    imag_residue: r.imag_residue,
                    truncation_error: r.truncation_error,
                },
                Err(_) => ScanRow {
                    energy: e,
                    energy_per_site: e / n,
                    value: None,
                    dos_weight: TraceTable::combine(&f, &table.tr_u).re,
                    imag_residue: 0.0,
                    truncation_error: table.errors[fp.r_eff],
                },
            }
        })
        .collect())
}

/// Gaussian density of states of width `√N σ0`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GaussianDosModel {
    pub sigma0: f64,
    pub n: usize,
    pub d: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub e_shifted: f64,
    pub width_shifted: f64,
    pub filtered_state_width: Option<f64>,
}

impl GaussianDosModel {
    /// `σ0² = tr H² / (2^N N)`.
    pub fn from_spec(spec: &IsingSpec) -> Self {
        let (_, m2) = model::pauli_moments(spec);
        Self { sigma0: (m2 / spec.n as f64).sqrt(), n: spec.n, d: 2 }
    }

    pub fn gamma(&self, delta: f64) -> f64 {
        1.0 + delta * delta / (self.n as f64 * self.sigma0 * self.sigma0)
    }

    /// `(E0/γ, δ/√γ, δ/√(2 + δ²/(N σ_ψ²)))`; `sigma_state` is per site.
    pub fn predictions(&self, e0: f64, delta: f64, sigma_state: Option<f64>) -> EnsemblePrediction {
        let g = self.gamma(delta);
        EnsemblePrediction {
            e_shifted: e0 / g,
            width_shifted: delta / g.sqrt(),
            filtered_state_width: sigma_state.map(|s| filtered_state_width(delta, self.n as f64 * s * s)),
        }
    }
}

/// Width of a Gaussian-LDOS state of energy variance `var` after the filter
/// is applied once, `δ/√(2 + δ²/var)`.
pub fn filtered_state_width(delta: f64, var: f64) -> f64 {
    delta / (2.0 + delta * delta / var).sqrt()
}

pub fn gaussian_ensemble_predictions(model: &GaussianDosModel, e0: f64, delta: f64, sigma_state: Option<f64>) -> EnsemblePrediction {
    model.predictions(e0, delta, sigma_state)
}

/// Exclusion radius: for a Gaussian LDOS of width `σ_φ √N`, `|E − E_φ| > ν`
/// implies `D_φ < ε` in units of the peak value `1/(√(2π) δ)`.
pub fn exclusion_radius(delta: f64, n: usize, sigma_phi: f64, eps: f64) -> f64 {
    let var = delta * delta + n as f64 * sigma_phi * sigma_phi;
    let pref = (delta * delta / var).sqrt();
    if eps >= pref {
        return 0.0;
    }
    (2.0 * var * (pref / eps).ln()).sqrt()
}

#[derive(Clone, Debug)]
pub enum ThermalMethod<'a> {
    Ed(&'a SpectrumData),
    GibbsMpo { dbeta: f64, policy: TruncationPolicy },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ThermalPoint {
    pub beta: f64,
    pub energy: f64,
    pub value: f64,
}

fn bisect(mut lo: f64, mut hi: f64, target: f64, tol: f64, mut energy: impl FnMut(f64) -> EstResult<(f64, f64)>) -> EstResult<ThermalPoint> {
    // energy(β) is decreasing; lo has E ≥ target, hi has E ≤ target.
    let mut best = None;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (e, v) = energy(mid)?;
        best = Some(ThermalPoint { beta: mid, energy: e, value: v });
        if (e - target).abs() <= tol {
            break;
        }
        if e > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * hi.abs().max(1.0) {
            break;
        }
    }
    best.ok_or(EstimatorError::NoBracket(target))
}

/// Solve `⟨H⟩_β = E_target` and return the thermal observable there.
pub fn thermal_reference(spec: &IsingSpec, e_target: f64, observable: &Observable, method: ThermalMethod<'_>) -> EstResult<ThermalPoint> {
    let n = spec.n;
    let tol = 1e-8 * n as f64;
    let sigma0 = GaussianDosModel::from_spec(spec).sigma0;
    match method {
        ThermalMethod::Ed(sd) => {
            let lo = sd.eigenvalues.first().copied().unwrap_or(0.0);
            let hi = sd.eigenvalues.last().copied().unwrap_or(0.0);
            if !(e_target > lo && e_target < hi) {
                return Err(EstimatorError::OutOfThermalRange { energy: e_target, lo, hi });
            }
            let (e0, v0) = ed::ed_gibbs(sd, 0.0);
            if (e0 - e_target).abs() <= tol {
                return Ok(ThermalPoint { beta: 0.0, energy: e0, value: v0 });
            }
            let sign = if e_target < e0 { 1.0 } else { -1.0 };
            let mut b = 50.0 / sigma0;
            // expand until the bracket holds the target
            loop {
                let (e, _) = ed::ed_gibbs(sd, sign * b);
                if (sign > 0.0 && e <= e_target) || (sign < 0.0 && e >= e_target) {
                    break;
                }
                b *= 2.0;
                if b > 1e12 {
                    return Err(EstimatorError::NoBracket(e_target));
                }
            }
            let (lo_b, hi_b) = if sign > 0.0 { (0.0, b) } else { (-b, 0.0) };
            bisect(lo_b, hi_b, e_target, tol, |beta| Ok(ed::ed_gibbs(sd, beta)))
        }
        ThermalMethod::GibbsMpo { dbeta, policy } => {
            let h = model::build_hamiltonian_mpo(spec).map_err(EvolutionError::from)?;
            let o = observable.mpo(n);
            let eval = |m: &tn::OperatorTrain| -> EstResult<(f64, f64)> {
                let z = tn::hs_sandwich(m, None, m)?.re;
                let e = tn::hs_sandwich(m, Some(&h), m)?.re / z;
                let v = tn::hs_sandwich(m, Some(&o), m)?.re / z;
                Ok((e, v))
            };
            if e_target.abs() <= tol {
                return Ok(ThermalPoint { beta: 0.0, energy: 0.0, value: 0.0 });
            }
            let sign = if e_target < 0.0 { 1.0 } else { -1.0 };
            let mut builder = GibbsBuilder::new(spec, dbeta, sign, &policy)?;
            let max_steps = ((1e4 / sigma0) / dbeta).ceil() as usize;
            for _ in 0..max_steps {
                builder.advance(1)?;
                let cur = eval(&builder.operator())?;
                let crossed = if sign > 0.0 { cur.0 <= e_target } else { cur.0 >= e_target };
                if (cur.0 - e_target).abs() <= tol {
                    return Ok(ThermalPoint { beta: builder.beta(), energy: cur.0, value: cur.1 });
                }
                if crossed {
                    // Step back one and bisect on a partial step from there.
                    let mut base = GibbsBuilder::new(spec, dbeta, sign, &policy)?;
                    base.advance(((builder.beta() / dbeta).abs().round() as usize).saturating_sub(1))?;
                    let b0 = base.beta();
                    let p = bisect(0.0, 1.0, if sign > 0.0 { e_target } else { -e_target }, tol, |f| {
                        let (m, _) = base.partial(f)?;
                        let (e, v) = eval(&m)?;
                        Ok((if sign > 0.0 { e } else { -e }, v))
                    })?;
                    return Ok(ThermalPoint {
                        beta: b0 + sign * p.beta * dbeta,
                        energy: if sign > 0.0 { p.energy } else { -p.energy },
                        value: p.value,
                    });
                }
            }
            Err(EstimatorError::OutOfThermalRange { energy: e_target, lo: f64::NAN, hi: f64::NAN })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ed::EdSystem;
    use crate::evolution::{build_evolution_family, exact_family, BackendMode, EvolutionConfig};
    use crate::filter::make_filter_params;
    use std::sync::Arc;

    fn mz() -> Observable {
        Observable::by_name("m_z").unwrap()
    }

    #[test]
    fn identity_observable_ratio_is_one() {
        let spec = IsingSpec::benchmark(6);
        let fp = make_filter_params(1.0, 1.5, 8.0, 3.0).unwrap();
        let sys = Arc::new(EdSystem::new(&spec, &mz()).unwrap());
        let fam = exact_family(sys, &fp);
        let table = TraceTable::new(&fam, &mz(), fp.r_eff).unwrap();
        let t = TraceTable { tr_ou: table.tr_u.clone(), ..table };
        let r = trace_ratio_from_table(&fp, &t, 0.0).unwrap();
        assert!((r.value - 1.0).abs() < 1e-14);
    }

    #[test]
    fn flat_filter_gives_infinite_temperature() {
        let spec = IsingSpec::benchmark(6);
        let fp = make_filter_params(0.0, 10.0, 14.2, 3.0).unwrap();
        assert_eq!(fp.m, 2);
        let cfg = EvolutionConfig::default();
        let fam = build_evolution_family(&spec, &fp, &cfg, BackendMode::MpoCache).unwrap();
        let r = direct_trace_ratio(&fam, &fp, &mz(), 0.0).unwrap();
        // cos² of a wide argument: only the O(1/α²) correction survives.
        let sys = EdSystem::new(&spec, &mz()).unwrap();
        let ed = ed::ed_filter_values(&sys, 0.0, &ed::FilterKind::Cosine(fp.clone()), None).unwrap();
        assert!(r.value.abs() < 0.05, "{}", r.value);
        assert!((r.value - ed.trace_ratio).abs() < 1e-5, "{} vs {}", r.value, ed.trace_ratio);
    }

    #[test]
    fn gaussian_model_limits() {
        let m = GaussianDosModel { sigma0: 1.2, n: 10, d: 2 };
        let p = m.predictions(3.0, 1e-8, Some(0.5));
        assert!((p.e_shifted - 3.0).abs() < 1e-12 && p.width_shifted < 1e-7);
        assert!(p.filtered_state_width.unwrap() < 1e-7);
        let delta = (10.0f64).sqrt() * 1.2;
        assert!((m.gamma(delta) - 2.0).abs() < 1e-12);
        let p = m.predictions(3.0, delta, None);
        assert!((p.e_shifted - 1.5).abs() < 1e-12);
        assert!((p.width_shifted - delta / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sigma0_from_moments() {
        let m = GaussianDosModel::from_spec(&IsingSpec::benchmark(10));
        assert!((m.sigma0 * m.sigma0 - 2.2525).abs() < 1e-12);
    }

    #[test]
    fn thermal_two_level() {
        let spec = IsingSpec::benchmark(1);
        let sd = ed::ed_spectrum(&spec, &mz(), None).unwrap();
        let p = thermal_reference(&spec, -0.5, &mz(), ThermalMethod::Ed(&sd)).unwrap();
        let w = (1.05f64 * 1.05 + 0.25).sqrt();
        let beta = (0.5 / w).atanh() / w;
        assert!((p.beta - beta).abs() < 1e-6, "{} vs {beta}", p.beta);
        assert!((p.value - (-0.5 * (beta * w).tanh() / w)).abs() < 1e-6);
        let z = thermal_reference(&spec, 0.0, &mz(), ThermalMethod::Ed(&sd)).unwrap();
        assert_eq!(z.beta, 0.0);
        assert!(z.value.abs() < 1e-14);
        assert!(matches!(
            thermal_reference(&spec, -2.0, &mz(), ThermalMethod::Ed(&sd)),
            Err(EstimatorError::OutOfThermalRange { .. })
        ));
    }

    #[test]
    fn thermal_energy_is_monotone() {
        let spec = IsingSpec::benchmark(6);
        let sd = ed::ed_spectrum(&spec, &mz(), None).unwrap();
        let es: Vec<f64> = (-20..=20).map(|k| ed::ed_gibbs(&sd, k as f64 * 0.1).0).collect();
        assert!(es.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn gibbs_mpo_reference_matches_ed_small() {
        let spec = IsingSpec::benchmark(6);
        let sd = ed::ed_spectrum(&spec, &mz(), None).unwrap();
        for e in [-1.8, 1.2] {
            let a = thermal_reference(&spec, e, &mz(), ThermalMethod::Ed(&sd)).unwrap();
            let b = thermal_reference(
                &spec,
                e,
                &mz(),
                ThermalMethod::GibbsMpo { dbeta: 0.02, policy: TruncationPolicy::new(64, 1e-12) },
            )
            .unwrap();
            assert!((b.energy - e).abs() <= 6e-8);
            assert!((a.value - b.value).abs() < 1e-3, "{} vs {}", a.value, b.value);
        }
    }

    #[test]
    fn exclusion_radius_is_consistent() {
        let (delta, n, s, eps) = (1.0, 10, 1.05, 1e-4);
        let nu = exclusion_radius(delta, n, s, eps);
        let var: f64 = delta * delta + n as f64 * s * s;
        let d = |x: f64| (delta * delta / var).sqrt() * (-x * x / (2.0 * var)).exp();
        assert!((d(nu) - eps).abs() < 1e-12);
    }
}

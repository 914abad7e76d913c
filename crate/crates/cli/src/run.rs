use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};
use spectra_core::cache::{CacheError, CacheStatus, OperatorCache};
use spectra_core::ed::{self, EdSystem, FilterKind};
use spectra_core::estimators::{self, direct_trace_ratio, ThermalMethod};
use spectra_core::evolution::{build_evolution_family, exact_family, BackendMode, EvolutionFamily, Probe};
use spectra_core::filter::{choose_alpha, filtered_observable_of_state, make_filter_params, FilterParams};
use spectra_core::model::{pauli_moments, Observable};
use spectra_core::sampler::{run_chains, seed_state_search, BasisKind, Sampler};
use spectra_core::tn::TensorTrain;
use spectra_core::varmin::{self, PipelineOptions, PipelineRow};
use thiserror::Error;

use crate::config::{Basis, ConfigError, Mode, RunConfig};

/// Largest chain handled by dense diagonalization in CLI runs.
pub const ED_MAX_N: usize = 12;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {message}")]
    Numerical { context: String, message: String },
    #[error(transparent)]
    Cache(CacheError),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Numerical { .. } => 3,
            RunError::Cache(_) => 4,
            RunError::Io { .. } => 1,
        }
    }
}

fn num<E: std::fmt::Display>(context: impl Into<String>) -> impl FnOnce(E) -> RunError {
    let context = context.into();
    move |e| RunError::Numerical { context, message: e.to_string() }
}

fn cache_err(e: CacheError) -> RunError {
    match e {
        CacheError::Evolution(inner) => RunError::Numerical { context: "operator cache build".into(), message: inner.to_string() },
        other => RunError::Cache(other),
    }
}

/// Tabular output plus per-row structured results.
#[derive(Debug, Default)]
pub struct Output {
    pub header: String,
    pub rows: Vec<String>,
    pub results: Vec<Value>,
    pub passed: Option<bool>,
    pub cache_status: Option<CacheStatus>,
}

impl Output {
    pub fn csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(&self.header);
        s.push('\n');
        for r in &self.rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Serialize)]
pub struct ResultRecord<'a> {
    pub version: &'static str,
    pub mode: Mode,
    pub config_hash: String,
    pub config: &'a RunConfig,
    pub results: &'a [Value],
    pub passed: Option<bool>,
    pub wall_clock_s: f64,
}

impl<'a> ResultRecord<'a> {
    pub fn new(cfg: &'a RunConfig, out: &'a Output, wall_clock_s: f64) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION"),
            mode: cfg.mode,
            config_hash: cfg.hash(),
            config: cfg,
            results: &out.results,
            passed: out.passed,
            wall_clock_s,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

fn observable(cfg: &RunConfig) -> Observable {
    Observable::by_name(&cfg.observable).expect("validated at parse time")
}

fn base_filter(cfg: &RunConfig) -> Result<FilterParams, RunError> {
    let (delta, alpha) = (cfg.filter.delta.expect("delta resolved"), cfg.filter.alpha.expect("alpha resolved"));
    let e0 = cfg.filter.energies.first().copied().unwrap_or(0.0);
    make_filter_params(e0, delta, alpha, cfg.filter.x).map_err(|e| ConfigError::RuleUnresolvable {
        key: "delta".into(),
        value: format!("δ = {delta}, α = {alpha}"),
        reason: e.to_string(),
    })
    .map_err(Into::into)
}

fn ed_limit(cfg: &RunConfig, what: &str) -> Result<(), RunError> {
    if cfg.model.n > ED_MAX_N {
        return Err(ConfigError::RuleUnresolvable {
            key: "N".into(),
            value: cfg.model.n.to_string(),
            reason: format!("{what} needs dense diagonalization, N ≤ {ED_MAX_N}"),
        }
        .into());
    }
    Ok(())
}

/// Family for the configured backend; operator families go through the disk
/// cache when one is configured.
fn family(cfg: &RunConfig, fp: &FilterParams, out: &mut Output) -> Result<EvolutionFamily, RunError> {
    let spec = cfg.spec();
    let evo = cfg.evolution_config();
    match (cfg.evolution.backend, &cfg.evolution.cache_dir) {
        (BackendMode::MpoCache, Some(dir)) => {
            let cache = OperatorCache::open(dir).map_err(cache_err)?;
            let (fam, status) = cache.load_or_build(&spec, fp, &evo).map_err(cache_err)?;
            out.cache_status = Some(status);
            Ok(fam)
        }
        (BackendMode::Exact, _) => {
            ed_limit(cfg, "backend = exact")?;
            let sys = EdSystem::new(&spec, &observable(cfg)).map_err(num("exact backend"))?;
            Ok(exact_family(Arc::new(sys), fp))
        }
        (mode, _) => build_evolution_family(&spec, fp, &evo, mode).map_err(num("evolution family")),
    }
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<Output, RunError> {
    match cfg.mode {
        Mode::TraceScan => trace_scan(cfg),
        Mode::Mc => monte_carlo(cfg),
        Mode::StateFilter => state_filter(cfg),
        Mode::EdCheck => ed_check(cfg),
        Mode::GibbsRef => gibbs_ref(cfg),
    }
}

fn trace_scan(cfg: &RunConfig) -> Result<Output, RunError> {
    if cfg.evolution.backend == BackendMode::MpsOnDemand {
        return Err(ConfigError::RuleUnresolvable {
            key: "backend".into(),
            value: "mps-on-demand".into(),
            reason: "trace-scan needs operators (mpo-cache or exact)".into(),
        }
        .into());
    }
    let fp = base_filter(cfg)?;
    let mut out = Output { header: "E,E_per_site,value,dos_weight,imag_residue,truncation_error,budget".into(), ..Default::default() };
    let fam = family(cfg, &fp, &mut out)?;
    let rows = estimators::trace_scan(&fam, &fp, &observable(cfg), &cfg.filter.energies).map_err(num("mode=trace-scan"))?;
    for r in rows {
        let budget = r.truncation_error + fp.tail;
        out.rows.push(format!(
            "{:.12e},{:.12e},{},{:.12e},{:.3e},{:.3e},{:.3e}",
            r.energy,
            r.energy_per_site,
            fmt_opt(r.value),
            r.dos_weight,
            r.imag_residue,
            r.truncation_error,
            budget
        ));
        out.results.push(json!({
            "energy": r.energy, "value": r.value, "dos_weight": r.dos_weight,
            "imag_residue": r.imag_residue, "truncation_error": r.truncation_error, "budget": budget,
        }));
    }
    Ok(out)
}

fn monte_carlo(cfg: &RunConfig) -> Result<Output, RunError> {
    let spec = cfg.spec();
    let obs = observable(cfg);
    let fp = base_filter(cfg)?;
    let mut out = Output {
        header: "E,E_per_site,estimate,stderr,acceptance_rate,cutoff_rate,truncation_error,seed_weight".into(),
        ..Default::default()
    };
    let fam = family(cfg, &fp, &mut out)?;
    let scfg = cfg.sampler_config();
    for &e in &cfg.filter.energies {
        let ctx = format!("mode=mc E={e}");
        let fp_e = fp.with_energy(e);
        let (basis, seed) = match cfg.sampler.basis {
            Basis::Computational => (BasisKind::Computational, seed_state_search(&spec, e).bits),
            Basis::PauliDressed => {
                let vm = varmin::minimize_variance_lenient(&spec, e, 1, 30, 1e-10).map_err(num(ctx.clone()))?;
                (BasisKind::PauliDressed { seed: Arc::new(vm.state) }, vec![0; spec.n])
            }
        };
        let sampler = Sampler::new(&fp_e, &obs, &fam, basis);
        let r = run_chains(&sampler, &seed, &scfg, cfg.sampler.n_chains).map_err(num(ctx))?;
        let seed_weight = r.chains.first().map(|c| c.seed_weight).unwrap_or(0.0);
        out.rows.push(format!(
            "{:.12e},{:.12e},{:.12e},{:.12e},{:.6},{:.6},{:.3e},{:.12e}",
            e,
            e / spec.n as f64,
            r.estimate,
            r.stderr,
            r.acceptance_rate,
            r.cutoff_rate,
            r.max_truncation_error,
            seed_weight
        ));
        let chains: Vec<Value> = r
            .chains
            .iter()
            .map(|c| json!({"chain": c.chain_index, "estimate": c.estimate, "stderr": c.stderr, "acceptance_rate": c.acceptance_rate, "distinct_states": c.distinct_states}))
            .collect();
        out.results.push(json!({
            "energy": e, "estimate": r.estimate, "stderr": r.stderr, "acceptance_rate": r.acceptance_rate,
            "cutoff_rate": r.cutoff_rate, "imag_residue": r.max_imag_residue,
            "truncation_error": r.max_truncation_error, "chains": chains,
        }));
    }
    Ok(out)
}

fn thermal_method<'a>(cfg: &RunConfig, sd: Option<&'a ed::SpectrumData>) -> ThermalMethod<'a> {
    match sd {
        Some(sd) => ThermalMethod::Ed(sd),
        None => ThermalMethod::GibbsMpo { dbeta: cfg.evolution.dbeta, policy: cfg.policy() },
    }
}

fn state_filter(cfg: &RunConfig) -> Result<Output, RunError> {
    let spec = cfg.spec();
    let obs = observable(cfg);
    let sd = if spec.n <= ED_MAX_N { Some(ed::ed_spectrum(&spec, &obs, None).map_err(num("thermal reference"))?) } else { None };
    let opts = PipelineOptions {
        mode: if cfg.evolution.backend == BackendMode::Exact && spec.n <= ED_MAX_N { BackendMode::Exact } else { BackendMode::MpsOnDemand },
        evolution: cfg.evolution_config(),
        ..Default::default()
    };
    let mut out = Output { header: format!("E,{},truncation_error", PipelineRow::CSV_HEADER), ..Default::default() };
    for &e in &cfg.filter.energies {
        let rows = varmin::state_filter_pipeline(&spec, e, &cfg.filter.d0, cfg.filter.x, &obs, thermal_method(cfg, sd.as_ref()), &opts)
            .map_err(num(format!("mode=state-filter E={e}")))?;
        for r in rows {
            out.rows.push(format!("{:.12e},{},{:.3e}", e, r.csv(), r.truncation_error));
            out.results.push(json!({
                "energy": e, "d0": r.d0, "e_mean": r.e_mean, "sigma_d": r.sigma_d, "delta": r.delta, "alpha": r.alpha,
                "value": r.value, "raw_value": r.raw_value, "thermal_ref": r.thermal_ref, "abs_gap": r.abs_gap,
                "imag_residue": r.imag_residue, "truncation_error": r.truncation_error,
            }));
        }
    }
    Ok(out)
}

fn gibbs_ref(cfg: &RunConfig) -> Result<Output, RunError> {
    let spec = cfg.spec();
    let obs = observable(cfg);
    let sd = if spec.n <= ED_MAX_N { Some(ed::ed_spectrum(&spec, &obs, None).map_err(num("ed spectrum"))?) } else { None };
    let mut out = Output { header: "E,E_per_site,beta,value,value_ed,abs_diff".into(), ..Default::default() };
    for &e in &cfg.filter.energies {
        let ctx = format!("mode=gibbs-ref E={e}");
        let tp = estimators::thermal_reference(&spec, e, &obs, thermal_method(cfg, None)).map_err(num(ctx.clone()))?;
        let ed_value = match &sd {
            Some(sd) => Some(estimators::thermal_reference(&spec, e, &obs, ThermalMethod::Ed(sd)).map_err(num(ctx))?.value),
            None => None,
        };
        let diff = ed_value.map(|v| (v - tp.value).abs());
        out.rows.push(format!(
            "{:.12e},{:.12e},{:.12e},{:.12e},{},{}",
            e,
            e / spec.n as f64,
            tp.beta,
            tp.value,
            fmt_opt(ed_value),
            fmt_opt(diff)
        ));
        out.results.push(json!({"energy": e, "beta": tp.beta, "value": tp.value, "value_ed": ed_value, "abs_diff": diff}));
    }
    Ok(out)
}

struct Checks {
    out: Output,
}

impl Checks {
    fn record(&mut self, name: &str, measured: f64, tolerance: f64) {
        let pass = measured.is_finite() && measured <= tolerance;
        log::info!("[{}] {name}: {measured:.3e} (tolerance {tolerance:.1e})", if pass { "PASS" } else { "FAIL" });
        self.out.rows.push(format!("{name},{measured:.6e},{tolerance:.1e},{}", if pass { "pass" } else { "fail" }));
        self.out.results.push(json!({"check": name, "measured": measured, "tolerance": tolerance, "pass": pass}));
        self.out.passed = Some(self.out.passed.unwrap_or(true) && pass);
    }
}

/// Oracle-equivalence suite: every backend against dense diagonalization.
fn ed_check(cfg: &RunConfig) -> Result<Output, RunError> {
    ed_limit(cfg, "ed-check")?;
    let spec = cfg.spec();
    let n = spec.n;
    let obs = observable(cfg);
    let mut c = Checks { out: Output { header: "check,measured,tolerance,result".into(), ..Default::default() } };
    let sys = Arc::new(EdSystem::new(&spec, &obs).map_err(num("ed-check spectrum"))?);
    let energies: Vec<f64> =
        if cfg.filter.energies.is_empty() { [-0.6, -0.3, 0.0, 0.3].iter().map(|e| e * n as f64).collect() } else { cfg.filter.energies.clone() };
    let delta = cfg.filter.delta.unwrap_or((n as f64).sqrt());
    let alpha = cfg.filter.alpha.unwrap_or_else(|| choose_alpha(spec.g.abs(), n, delta));
    let fp = make_filter_params(energies[0], delta, alpha, cfg.filter.x).map_err(num("ed-check filter"))?;

    let trace: f64 = sys.eigenvalues.iter().sum();
    c.record("spectrum_trace", trace.abs(), 1e-9 * n as f64);
    let (_, m2) = pauli_moments(&spec);
    let second = sys.eigenvalues.iter().map(|e| e * e).sum::<f64>() / sys.dim() as f64;
    c.record("spectrum_second_moment", (second - m2).abs(), 1e-9 * m2);

    let mut tail_dev: f64 = 0.0;
    for &e in &energies {
        let f = fp.with_energy(e);
        for &l in sys.eigenvalues.iter().filter(|l| (*l - e).abs() <= alpha * std::f64::consts::FRAC_PI_2) {
            tail_dev = tail_dev.max((f.scalar_value(l) - f.cosine_value(l)).abs());
        }
    }
    c.record("filter_series_truncation", tail_dev, 2.0 * (-cfg.filter.x * cfg.filter.x / 2.0).exp());

    let exact = exact_family(sys.clone(), &fp);
    let evo = cfg.evolution_config();
    let mpo = build_evolution_family(&spec, &fp, &evo, BackendMode::MpoCache).map_err(num("ed-check operator family"))?;
    let (mut d_exact, mut d_mpo, mut budget_mpo): (f64, f64, f64) = (0.0, 0.0, 5e-3);
    for &e in &energies {
        let f = fp.with_energy(e);
        let Ok(reference) = ed::ed_filter_values(&sys, e, &FilterKind::Cosine(f.clone()), None) else { continue };
        let ex = direct_trace_ratio(&exact, &f, &obs, 0.0).map_err(num(format!("ed-check exact E={e}")))?;
        d_exact = d_exact.max((ex.value - reference.trace_ratio).abs());
        if let Ok(tn) = direct_trace_ratio(&mpo, &f, &obs, 1e-6 * reference.dos.abs()) {
            d_mpo = d_mpo.max((tn.value - reference.trace_ratio).abs());
            budget_mpo = budget_mpo.max(5e-3 + tn.truncation_error);
        }
    }
    c.record("trace_ratio_exact_backend", d_exact, 1e-10);
    c.record("trace_ratio_mpo_backend", d_mpo, budget_mpo);

    if n <= 10 {
        let f = fp.with_energy(energies[energies.len() / 2]);
        let fam = exact_family(sys.clone(), &f);
        let s = Sampler::new(&f, &obs, &fam, BasisKind::Computational);
        let (sum, _) = s.basis_sum().map_err(num("ed-check basis sum"))?;
        let direct = direct_trace_ratio(&fam, &f, &obs, 0.0).map_err(num("ed-check basis sum"))?;
        c.record("basis_sum_identity", (sum - direct.value).abs(), 1e-10);
    }

    let bits: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let psi = TensorTrain::basis_state(&bits).map_err(num("ed-check state"))?;
    let e_psi = spec.bitstring_energy(&bits);
    let f = fp.with_energy(e_psi);
    let sd = sys.decompose_basis(ed::bits_to_index(&bits));
    let reference = ed::ed_filter_values(&sys, e_psi, &FilterKind::Cosine(f.clone()), Some(&sd)).map_err(num("ed-check state filter"))?;
    let ds = filtered_observable_of_state(&Probe::Mps(&psi), &f, &obs, &exact, 1e-12).map_err(num("ed-check double sum"))?;
    c.record("double_sum_exact_backend", (ds.value - reference.state_filter_value.unwrap_or(f64::NAN)).abs(), 1e-10);

    let spectrum = sys.spectrum(None).map_err(num("ed-check spectrum"))?;
    let mut d_thermal: f64 = 0.0;
    for &e in energies.iter().filter(|e| e.abs() > 1e-12) {
        let (Ok(a), Ok(b)) = (
            estimators::thermal_reference(&spec, e, &obs, ThermalMethod::Ed(&spectrum)),
            estimators::thermal_reference(&spec, e, &obs, thermal_method(cfg, None)),
        ) else {
            continue;
        };
        d_thermal = d_thermal.max((a.value - b.value).abs());
    }
    c.record("thermal_ed_vs_gibbs_mpo", d_thermal, 1e-3);
    Ok(c.out)
}

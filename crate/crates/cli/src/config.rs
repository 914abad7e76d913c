use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ini::Ini;
use serde::Serialize;
use spectra_core::cache::sha256_hex;
use spectra_core::evolution::{BackendMode, EvolutionConfig};
use spectra_core::filter::{choose_alpha, full_spectrum_alpha};
use spectra_core::model::IsingSpec;
use spectra_core::sampler::{Proposal, SamplerConfig};
use spectra_core::tn::TruncationPolicy;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown key `{key}` in section [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("missing required key `{key}` in section [{section}]")]
    MissingRequired { section: String, key: String },
    #[error("cannot resolve `{key} = {value}`: {reason}")]
    RuleUnresolvable { key: String, value: String, reason: String },
    #[error("malformed config: {0}")]
    Syntax(String),
}

type CfgResult<T> = Result<T, ConfigError>;

/// Documented defaults, shown by `--help`.
pub const DEFAULTS_HELP: &str = "\
Config file: flat INI sections, `key = value`, `#` or `;` comments.

[run]        mode (required: trace-scan | mc | state-filter | ed-check | gibbs-ref)
             rng_seed = 0, observable = m_z (m_z | m_x | z0 | x0)
[model]      N (required), J = 1, g = -1.05, h = 0.5
[filter]     one of: energy = list | energy_per_site = list | scan = lo:hi:count (E/N)
             delta = number or rule c*sqrtN (required except state-filter, ed-check: sqrtN)
             alpha = 3max (default) | full-spectrum | number | c*sqrtN
             sigma_state = |g| (per-site width used by 3max), x = 3
             d0 = 1,2,5,10 (state-filter bond dimensions), window = 0.5
[evolution]  dt = 0.02, max_bond = 64, sv_cutoff = 1e-10, error_ceiling = 1e-3
             backend = mpo-cache | mps-on-demand | exact (default mpo-cache)
             dbeta = 0.01 (imaginary-time step), cache_dir = none
[sampler]    n_samples = 50000, burn_in = 1000, n_chains = 4, n_batches = 50
             proposal = flip | pauli, basis = computational | pauli-dressed
             cutoff_rel = 1e-4";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TraceScan,
    Mc,
    StateFilter,
    EdCheck,
    GibbsRef,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::TraceScan => "trace-scan",
            Mode::Mc => "mc",
            Mode::StateFilter => "state-filter",
            Mode::EdCheck => "ed-check",
            Mode::GibbsRef => "gibbs-ref",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Basis {
    Computational,
    PauliDressed,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelBlock {
    pub n: usize,
    pub j: f64,
    pub g: f64,
    pub h: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FilterBlock {
    /// Absolute filter centers.
    pub energies: Vec<f64>,
    pub delta: Option<f64>,
    pub alpha: Option<f64>,
    pub alpha_rule: String,
    pub sigma_state: f64,
    pub x: f64,
    pub d0: Vec<usize>,
    pub window: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvolutionBlock {
    pub dt: f64,
    pub max_bond: usize,
    pub sv_cutoff: f64,
    pub error_ceiling: f64,
    pub backend: BackendMode,
    pub dbeta: f64,
    pub cache_dir: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SamplerBlock {
    pub n_samples: usize,
    pub burn_in: usize,
    pub n_chains: usize,
    pub n_batches: usize,
    pub proposal: Proposal,
    pub basis: Basis,
    pub cutoff_rel: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub rng_seed: u64,
    pub observable: String,
    pub model: ModelBlock,
    pub filter: FilterBlock,
    pub evolution: EvolutionBlock,
    pub sampler: SamplerBlock,
}

const KEYS: &[(&str, &[&str])] = &[
    ("run", &["mode", "rng_seed", "observable"]),
    ("model", &["n", "j", "g", "h"]),
    ("filter", &["energy", "energy_per_site", "scan", "delta", "alpha", "sigma_state", "x", "d0", "window"]),
    ("evolution", &["dt", "max_bond", "sv_cutoff", "error_ceiling", "backend", "dbeta", "cache_dir"]),
    ("sampler", &["n_samples", "burn_in", "n_chains", "n_batches", "proposal", "basis", "cutoff_rel"]),
];

/// Raw `section.key -> value` table after key validation.
struct Table {
    values: BTreeMap<(String, String), String>,
}

impl Table {
    fn parse(text: &str) -> CfgResult<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut values = BTreeMap::new();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(ConfigError::UnknownKey { section: String::new(), key: k.to_string() });
                }
                continue;
            };
            let sec = section.trim().to_ascii_lowercase();
            let allowed = KEYS
                .iter()
                .find(|(s, _)| *s == sec)
                .map(|(_, k)| *k)
                .ok_or_else(|| ConfigError::UnknownSection(section.to_string()))?;
            for (k, v) in props.iter() {
                let key = k.trim().to_ascii_lowercase();
                if !allowed.contains(&key.as_str()) {
                    return Err(ConfigError::UnknownKey { section: sec.clone(), key: k.to_string() });
                }
                if values.insert((sec.clone(), key), v.trim().to_string()).is_some() {
                    return Err(ConfigError::Syntax(format!("duplicate key `{k}` in [{sec}]")));
                }
            }
        }
        Ok(Self { values })
    }

    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.values.get(&(section.to_string(), key.to_string())).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn required(&self, section: &str, key: &str) -> CfgResult<&str> {
        self.raw(section, key).ok_or_else(|| ConfigError::MissingRequired { section: section.into(), key: key.into() })
    }

    fn num<T: FromStr>(&self, section: &str, key: &str, default: T) -> CfgResult<T> {
        match self.raw(section, key) {
            None => Ok(default),
            Some(v) => parse_num(key, v),
        }
    }
}

fn unresolvable(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::RuleUnresolvable { key: key.into(), value: value.into(), reason: reason.into() }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> CfgResult<T> {
    v.parse().map_err(|_| unresolvable(key, v, "not a number"))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> CfgResult<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_num(key, s)).collect()
}

/// Product of factors, each a number, `N`, `sqrtN` or `sqrt(N)`.
pub fn eval_rule(key: &str, value: &str, n: usize) -> CfgResult<f64> {
    let mut acc = 1.0;
    let mut any = false;
    for factor in value.split('*').map(str::trim) {
        let f = match factor {
            "sqrtN" | "sqrt(N)" | "√N" => (n as f64).sqrt(),
            "N" => n as f64,
            s => s.parse::<f64>().map_err(|_| unresolvable(key, value, format!("unknown factor `{s}`")))?,
        };
        acc *= f;
        any = true;
    }
    if !any || !acc.is_finite() || acc <= 0.0 {
        return Err(unresolvable(key, value, "must evaluate to a positive number"));
    }
    Ok(acc)
}

fn energies(t: &Table, n: usize) -> CfgResult<Vec<f64>> {
    let given: Vec<&str> = ["energy", "energy_per_site", "scan"].into_iter().filter(|k| t.raw("filter", k).is_some()).collect();
    if given.len() > 1 {
        return Err(unresolvable(given[1], t.raw("filter", given[1]).unwrap_or(""), "only one of energy, energy_per_site, scan may be set"));
    }
    let nf = n as f64;
    Ok(match given.first().copied() {
        None => Vec::new(),
        Some("energy") => parse_list("energy", t.raw("filter", "energy").unwrap_or(""))?,
        Some("energy_per_site") => parse_list::<f64>("energy_per_site", t.raw("filter", "energy_per_site").unwrap_or(""))?
            .into_iter()
            .map(|e| e * nf)
            .collect(),
        Some(_) => {
            let v = t.raw("filter", "scan").unwrap_or("");
            let parts: Vec<&str> = v.split(':').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(unresolvable("scan", v, "expected lo:hi:count"));
            }
            let lo: f64 = parse_num("scan", parts[0])?;
            let hi: f64 = parse_num("scan", parts[1])?;
            let count: usize = parse_num("scan", parts[2])?;
            if count == 0 || (count == 1 && lo != hi) {
                return Err(unresolvable("scan", v, "count must be ≥ 2 unless lo = hi"));
            }
            (0..count)
                .map(|i| {
                    let f = if count == 1 { 0.0 } else { i as f64 / (count - 1) as f64 };
                    (lo + f * (hi - lo)) * nf
                })
                .collect()
        }
    })
}

pub fn parse_config(text: &str) -> CfgResult<RunConfig> {
    let t = Table::parse(text)?;
    let mode = match t.required("run", "mode")? {
        "trace-scan" => Mode::TraceScan,
        "mc" => Mode::Mc,
        "state-filter" => Mode::StateFilter,
        "ed-check" => Mode::EdCheck,
        "gibbs-ref" => Mode::GibbsRef,
        other => return Err(unresolvable("mode", other, "unknown mode")),
    };
    let observable = t.raw("run", "observable").unwrap_or("m_z").to_string();
    if spectra_core::model::Observable::by_name(&observable).is_err() {
        return Err(unresolvable("observable", &observable, "unknown observable"));
    }
    let n: usize = parse_num("N", t.required("model", "n")?)?;
    let model = ModelBlock { n, j: t.num("model", "j", 1.0)?, g: t.num("model", "g", -1.05)?, h: t.num("model", "h", 0.5)? };
    let spec = IsingSpec::new(model.n, model.j, model.g, model.h).map_err(|e| unresolvable("model", &format!("N = {n}"), e.to_string()))?;

    let energies = energies(&t, n)?;
    let delta = match t.raw("filter", "delta") {
        Some(v) => Some(eval_rule("delta", v, n)?),
        None if matches!(mode, Mode::StateFilter | Mode::GibbsRef) => None,
        None if mode == Mode::EdCheck => Some((n as f64).sqrt()),
        None => return Err(ConfigError::MissingRequired { section: "filter".into(), key: "delta".into() }),
    };
    if energies.is_empty() && mode != Mode::EdCheck {
        return Err(ConfigError::MissingRequired { section: "filter".into(), key: "energy | energy_per_site | scan".into() });
    }
    let sigma_state = t.num("filter", "sigma_state", spec.g.abs())?;
    let alpha_rule = t.raw("filter", "alpha").unwrap_or("3max").to_string();
    let alpha = match (alpha_rule.as_str(), delta) {
        (_, None) => None,
        ("3max", Some(d)) => Some(choose_alpha(sigma_state, n, d)),
        ("full-spectrum", Some(_)) => Some(full_spectrum_alpha(&spec)),
        (rule, Some(_)) => Some(eval_rule("alpha", rule, n)?),
    };
    if let (Some(a), Some(d)) = (alpha, delta) {
        if a < d * 2f64.sqrt() {
            return Err(unresolvable("alpha", &alpha_rule, format!("α = {a} must be at least √2·δ = {}", d * 2f64.sqrt())));
        }
    }
    let d0_text = t.raw("filter", "d0").unwrap_or("1,2,5,10");
    let d0: Vec<usize> = parse_list("d0", d0_text)?;
    if d0.is_empty() || d0.contains(&0) {
        return Err(unresolvable("d0", d0_text, "bond dimensions must be positive"));
    }
    let filter = FilterBlock {
        energies,
        delta,
        alpha,
        alpha_rule,
        sigma_state,
        x: t.num("filter", "x", 3.0)?,
        d0,
        window: t.num("filter", "window", 0.5)?,
    };

    let backend = match t.raw("evolution", "backend").unwrap_or("mpo-cache") {
        "mpo-cache" => BackendMode::MpoCache,
        "mps-on-demand" => BackendMode::MpsOnDemand,
        "exact" => BackendMode::Exact,
        other => return Err(unresolvable("backend", other, "expected mpo-cache, mps-on-demand or exact")),
    };
    let evolution = EvolutionBlock {
        dt: t.num("evolution", "dt", 0.02)?,
        max_bond: t.num("evolution", "max_bond", 64)?,
        sv_cutoff: t.num("evolution", "sv_cutoff", 1e-10)?,
        error_ceiling: t.num("evolution", "error_ceiling", 1e-3)?,
        backend,
        dbeta: t.num("evolution", "dbeta", 0.01)?,
        cache_dir: t.raw("evolution", "cache_dir").map(str::to_string),
    };
    let d = SamplerConfig::default();
    let proposal = match t.raw("sampler", "proposal").unwrap_or("flip") {
        "flip" => Proposal::SingleSiteFlip,
        "pauli" => Proposal::SingleSitePauli,
        other => return Err(unresolvable("proposal", other, "expected flip or pauli")),
    };
    let basis = match t.raw("sampler", "basis").unwrap_or("computational") {
        "computational" => Basis::Computational,
        "pauli-dressed" => Basis::PauliDressed,
        other => return Err(unresolvable("basis", other, "expected computational or pauli-dressed")),
    };
    let sampler = SamplerBlock {
        n_samples: t.num("sampler", "n_samples", d.n_samples)?,
        burn_in: t.num("sampler", "burn_in", d.burn_in)?,
        n_chains: t.num("sampler", "n_chains", 4)?,
        n_batches: t.num("sampler", "n_batches", d.n_batches)?,
        proposal,
        basis,
        cutoff_rel: t.num("sampler", "cutoff_rel", d.cutoff_rel)?,
    };
    let cfg = RunConfig { mode, rng_seed: t.num("run", "rng_seed", 0)?, observable, model, filter, evolution, sampler };
    cfg.evolution_config().validate().map_err(|e| unresolvable("evolution", "", e.to_string()))?;
    if mode == Mode::Mc {
        cfg.sampler_config().validate().map_err(|e| unresolvable("sampler", "", e.to_string()))?;
        let expected = match cfg.sampler.basis {
            Basis::Computational => Proposal::SingleSiteFlip,
            Basis::PauliDressed => Proposal::SingleSitePauli,
        };
        if cfg.sampler.proposal != expected {
            return Err(unresolvable("proposal", &format!("{:?}", cfg.sampler.proposal), "does not match the sampling basis"));
        }
    }
    Ok(cfg)
}

impl RunConfig {
    pub fn spec(&self) -> IsingSpec {
        IsingSpec { n: self.model.n, j: self.model.j, g: self.model.g, h: self.model.h }
    }

    pub fn policy(&self) -> TruncationPolicy {
        TruncationPolicy::new(self.evolution.max_bond, self.evolution.sv_cutoff)
    }

    pub fn evolution_config(&self) -> EvolutionConfig {
        EvolutionConfig {
            dt: self.evolution.dt,
            policy: self.policy(),
            error_ceiling: self.evolution.error_ceiling,
            ..Default::default()
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            n_samples: self.sampler.n_samples,
            burn_in: self.sampler.burn_in,
            proposal: self.sampler.proposal,
            cutoff_rel: self.sampler.cutoff_rel,
            rng_seed: self.rng_seed,
            n_batches: self.sampler.n_batches,
            ..Default::default()
        }
    }

    /// Hash over the resolved numbers; output locations are not part of it.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_string(self).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[run]\nmode = trace-scan\n[model]\nN = 10\n[filter]\nscan = -1:1:21\ndelta = sqrtN\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.evolution.dt, 0.02);
        assert_eq!(c.filter.x, 3.0);
        assert_eq!(c.filter.energies.len(), 21);
        assert!((c.filter.energies[0] + 10.0).abs() < 1e-12 && (c.filter.energies[20] - 10.0).abs() < 1e-12);
        assert_eq!(c.evolution.backend, BackendMode::MpoCache);
        assert!((c.filter.alpha.unwrap() - 3.0 * 1.05 * 10f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn delta_rule_arithmetic() {
        assert_eq!(eval_rule("delta", "0.5*sqrtN", 64).unwrap(), 4.0);
        assert_eq!(eval_rule("delta", "2 * N", 3).unwrap(), 6.0);
        assert_eq!(eval_rule("delta", "1.5", 3).unwrap(), 1.5);
        assert!(matches!(eval_rule("delta", "0.5*sqrtM", 4), Err(ConfigError::RuleUnresolvable { .. })));
        assert!(eval_rule("delta", "-1", 4).is_err());
    }

    #[test]
    fn unknown_key_is_named() {
        let text = MINIMAL.replace("delta =", "deltta =");
        match parse_config(&text) {
            Err(ConfigError::UnknownKey { key, .. }) => assert_eq!(key, "deltta"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_values_are_reported() {
        assert!(matches!(parse_config("[model]\nN = 4\n"), Err(ConfigError::MissingRequired { .. })));
        let text = MINIMAL.replace("delta = sqrtN\n", "");
        assert!(matches!(parse_config(&text), Err(ConfigError::MissingRequired { key, .. }) if key == "delta"));
    }

    #[test]
    fn alpha_rules() {
        let full = parse_config(&format!("{MINIMAL}alpha = full-spectrum\n")).unwrap();
        assert!((full.filter.alpha.unwrap() - (1.0f64 + 1.05 * 1.05 + 0.25).sqrt() * 10.0).abs() < 1e-12);
        let explicit = parse_config(&format!("{MINIMAL}alpha = 6*sqrtN\n")).unwrap();
        assert!((explicit.filter.alpha.unwrap() - 6.0 * 10f64.sqrt()).abs() < 1e-12);
        assert!(parse_config(&format!("{MINIMAL}alpha = 1\n")).is_err());
    }

    #[test]
    fn sampler_basis_must_match_proposal() {
        let base = "[run]\nmode = mc\n[model]\nN = 4\n[filter]\nenergy = 0\ndelta = 1\n[sampler]\n";
        assert!(parse_config(&format!("{base}basis = pauli-dressed\n")).is_err());
        assert!(parse_config(&format!("{base}basis = pauli-dressed\nproposal = pauli\n")).is_ok());
    }

    #[test]
    fn hash_tracks_resolved_numbers() {
        let a = parse_config(MINIMAL).unwrap();
        let b = parse_config(&MINIMAL.replace("sqrtN", "3.1622776601683795")).unwrap();
        let c = parse_config(&format!("{MINIMAL}[evolution]\ndt = 0.01\n")).unwrap();
        assert_eq!(a.filter.delta, b.filter.delta);
        assert_ne!(a.hash(), c.hash());
    }
}

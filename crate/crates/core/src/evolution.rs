//! Real- and imaginary-time Trotter evolution of states and operators.
//!
//! Operators are evolved as fused `(out, in)` chains with gates acting on the
//! out index only, so the same sweep code serves states, `U(t)` and the Gibbs
//! operator `e^{−βH/2}`.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ed::{EdError, EdSystem};
use crate::filter::FilterParams;
use crate::linalg;
use crate::model::{self, IsingSpec, ModelError, Observable};
use crate::tn::{
    self, apply_mpo, sandwich, sweep, ApplyMethod, OperatorTrain, TensorTrain, TnError, TruncationPolicy,
};

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("time {t} is not a multiple of dt = {dt}")]
    NonCommensurateTime { t: f64, dt: f64 },
    #[error("cumulative truncation error {error:e} exceeds the ceiling {ceiling:e}")]
    TruncationBudgetExceeded { error: f64, ceiling: f64 },
    #[error("operator cache needs {needed} bytes, budget is {budget}")]
    MemoryBudgetExceeded { needed: usize, budget: usize },
    #[error("invalid evolution setting: {0}")]
    Invalid(String),
    #[error("observable {got:?} does not match the backend observable {want:?}")]
    ObservableMismatch { got: String, want: String },
    #[error("backend provides {have} grid points, {need} requested")]
    GridTooShort { have: usize, need: usize },
    #[error(transparent)]
    Tn(#[from] TnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ed(#[from] EdError),
}

type EvoResult<T> = Result<T, EvolutionError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[default]
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub dt: f64,
    pub policy: TruncationPolicy,
    pub direction: Direction,
    pub order: u32,
    /// Cumulative truncation error allowed per evolved object.
    pub error_ceiling: f64,
    /// Upper bound on the bytes held by an operator cache.
    pub memory_budget: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            policy: TruncationPolicy::default(),
            direction: Direction::Forward,
            order: 2,
            error_ceiling: 1e-3,
            memory_budget: 4 << 30,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> EvoResult<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(EvolutionError::Invalid(format!("dt = {} must be positive", self.dt)));
        }
        if self.order != 2 {
            return Err(ModelError::UnsupportedOrder(self.order).into());
        }
        self.policy.validate()?;
        Ok(())
    }

    pub fn key(&self) -> String {
        format!(
            "dt={:e};order={};max_bond={};cutoff={:e};renorm={};method={:?}",
            self.dt,
            self.order,
            self.policy.max_bond,
            self.policy.sv_cutoff,
            self.policy.renormalize,
            self.policy.method
        )
    }
}

/// Lift a gate on `k` sites to the fused `(out, in)` index, acting on out.
fn lift_gate(g: &Array2<C64>, sites: usize) -> Array2<C64> {
    let d = 2usize;
    let dim = g.nrows();
    let fused = dim * dim;
    let mut out = Array2::<C64>::zeros((fused, fused));
    let split = |p: usize| -> (usize, usize) {
        // p over (o1, i1, o2, i2, …) → (o, i) multi-indices
        let (mut o, mut i) = (0, 0);
        for s in 0..sites {
            let digit = (p / (d * d).pow((sites - 1 - s) as u32)) % (d * d);
            o = o * d + digit / d;
            i = i * d + digit % d;
        }
        (o, i)
    };
    for p in 0..fused {
        let (o1, i1) = split(p);
        for q in 0..fused {
            let (o2, i2) = split(q);
            if i1 == i2 {
                out[[p, q]] = g[[o1, o2]];
            }
        }
    }
    out
}

/// A Hermitian-generated step `exp(−i z H)` split into layers.
#[derive(Clone, Debug)]
struct Stepper {
    even_half: Vec<Array2<C64>>,
    even_full: Vec<Array2<C64>>,
    odd_full: Vec<Array2<C64>>,
    single: Option<Array2<C64>>,
}

impl Stepper {
    fn new(spec: &IsingSpec, z: C64, order: u32, lifted: bool) -> EvoResult<Self> {
        let lift = |gs: Vec<Array2<C64>>, k: usize| -> Vec<Array2<C64>> {
            if lifted {
                gs.iter().map(|g| lift_gate(g, k)).collect()
            } else {
                gs
            }
        };
        let layers = model::trotter_layers_complex(spec, z, order)?;
        if spec.n == 1 {
            let g = lift(layers[0].gates.clone(), 1).remove(0);
            return Ok(Self { even_half: vec![], even_full: vec![], odd_full: vec![], single: Some(g) });
        }
        // Two merged even half-layers form one full even layer.
        let even_full_gates: Vec<Array2<C64>> = (0..spec.n - 1)
            .step_by(2)
            .map(|i| linalg::expm_hermitian(&model::bond_hamiltonian(spec, i), z))
            .collect::<Result<_, _>>()
            .map_err(ModelError::from)?;
        Ok(Self {
            even_half: lift(layers[0].gates.clone(), 2),
            even_full: lift(even_full_gates, 2),
            odd_full: lift(layers[1].gates.clone(), 2),
            single: None,
        })
    }

    /// Apply `steps` full steps, merging adjacent half layers.
    fn run(&self, tt: &mut TensorTrain, steps: usize, policy: &TruncationPolicy, forward: &mut bool) -> EvoResult<f64> {
        if steps == 0 {
            return Ok(0.0);
        }
        if let Some(g) = &self.single {
            for _ in 0..steps {
                sweep::apply_one_site(&mut tt.sites[0], g);
            }
            return Ok(0.0);
        }
        let mut err = apply_layer(tt, &self.even_half, 0, policy, forward)?;
        for s in 0..steps {
            err += apply_layer(tt, &self.odd_full, 1, policy, forward)?;
            let last = if s + 1 < steps { &self.even_full } else { &self.even_half };
            err += apply_layer(tt, last, 0, policy, forward)?;
        }
        Ok(err)
    }
}

fn apply_layer(
    tt: &mut TensorTrain,
    gates: &[Array2<C64>],
    first: usize,
    policy: &TruncationPolicy,
    forward: &mut bool,
) -> EvoResult<f64> {
    if gates.is_empty() {
        return Ok(0.0);
    }
    let bonds: Vec<usize> = (0..gates.len()).map(|k| first + 2 * k).collect();
    let order: Vec<usize> = if *forward { (0..gates.len()).collect() } else { (0..gates.len()).rev().collect() };
    let mut err = 0.0;
    for k in order {
        let i = bonds[k];
        let target = if *forward { i } else { i + 1 };
        if tt.center != Some(i) && tt.center != Some(i + 1) {
            sweep::move_center(&mut tt.sites, &mut tt.log_norm, tt.center, target)?;
            if tt.center.is_none() {
                let nrm = sweep::frobenius(tt.sites[target].iter().cloned());
                if nrm == 0.0 {
                    return Err(TnError::ZeroNorm.into());
                }
                tt.sites[target].mapv_inplace(|x| x / nrm);
                tt.log_norm += nrm.ln();
            }
            tt.center = Some(target);
        }
        err += sweep::apply_two_site(&mut tt.sites, &mut tt.log_norm, i, &gates[k], policy, *forward)?;
        tt.center = Some(if *forward { i + 1 } else { i });
    }
    *forward = !*forward;
    Ok(err)
}

fn commensurate_steps(t: f64, dt: f64) -> EvoResult<usize> {
    let x = t.abs() / dt;
    let k = x.round();
    if (t.abs() - k * dt).abs() > 1e-12 * t.abs().max(1.0) {
        return Err(EvolutionError::NonCommensurateTime { t, dt });
    }
    Ok(k as usize)
}

fn signed_step(dt: f64, t_sign: f64, direction: Direction) -> C64 {
    let s = match direction {
        Direction::Forward => t_sign,
        Direction::Backward => -t_sign,
    };
    C64::new(s * dt, 0.0)
}

/// `e^{−iHt}|state⟩` (or `e^{+iHt}` for the backward direction) by `t/dt`
/// second-order Trotter steps.
pub fn evolve_mps(spec: &IsingSpec, state: &TensorTrain, t: f64, cfg: &EvolutionConfig) -> EvoResult<(TensorTrain, f64)> {
    cfg.validate()?;
    check_len(spec, state.len())?;
    let steps = commensurate_steps(t, cfg.dt)?;
    let mut out = state.clone();
    if steps == 0 {
        return Ok((out, 0.0));
    }
    let z = signed_step(cfg.dt, t.signum(), cfg.direction);
    let stepper = Stepper::new(spec, z, cfg.order, false)?;
    let mut fwd = true;
    let err = stepper.run(&mut out, steps, &cfg.policy, &mut fwd)?;
    check_budget(err, cfg)?;
    Ok((out, err))
}

fn check_len(spec: &IsingSpec, n: usize) -> EvoResult<()> {
    if spec.n != n {
        return Err(TnError::LengthMismatch(spec.n, n).into());
    }
    Ok(())
}

fn check_budget(err: f64, cfg: &EvolutionConfig) -> EvoResult<()> {
    if err > cfg.error_ceiling {
        return Err(EvolutionError::TruncationBudgetExceeded { error: err, ceiling: cfg.error_ceiling });
    }
    Ok(())
}

/// Filter time grid `t_m = m · (2/α)` realized with an integer number of
/// Trotter steps per spacing; the effective step never exceeds `dt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub steps_per_point: usize,
    pub dt_eff: f64,
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(alpha: f64, r_eff: usize, dt: f64) -> Self {
        let spacing = 2.0 / alpha;
        let k = ((spacing / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let dt_eff = spacing / k as f64;
        if (dt_eff - dt).abs() > 1e-9 * dt {
            log::debug!("time grid uses dt_eff = {dt_eff:.6e} instead of dt = {dt:.6e}");
        }
        Self { steps_per_point: k, dt_eff, times: (0..=r_eff).map(|m| m as f64 * spacing).collect() }
    }

    pub fn for_filter(fp: &FilterParams, dt: f64) -> Self {
        Self::new(fp.alpha, fp.r_eff, dt)
    }

    pub fn r(&self) -> usize {
        self.times.len() - 1
    }
}

/// States at `t_0 … t_R` (sign `+1`) or `−t_0 … −t_R` (sign `−1`), with the
/// cumulative truncation error at each point.
pub fn evolve_on_grid(
    spec: &IsingSpec,
    state: &TensorTrain,
    grid: &TimeGrid,
    r: usize,
    sign: f64,
    cfg: &EvolutionConfig,
) -> EvoResult<Vec<(TensorTrain, f64)>> {
    cfg.validate()?;
    check_len(spec, state.len())?;
    let mut out = vec![(state.clone(), 0.0)];
    if r == 0 {
        return Ok(out);
    }
    let stepper = Stepper::new(spec, signed_step(grid.dt_eff, sign, cfg.direction), cfg.order, false)?;
    let mut cur = state.clone();
    let mut err = 0.0;
    let mut fwd = true;
    for _ in 1..=r {
        err += stepper.run(&mut cur, grid.steps_per_point, &cfg.policy, &mut fwd)?;
        check_budget(err, cfg)?;
        out.push((cur.clone(), err));
    }
    Ok(out)
}

fn fused_identity(n: usize) -> TensorTrain {
    let mut site = Array3::<C64>::zeros((1, 4, 1));
    site[[0, 0, 0]] = C64::new(1.0, 0.0);
    site[[0, 3, 0]] = C64::new(1.0, 0.0);
    TensorTrain::from_parts(vec![site; n], Some(0), 0.0)
}

fn fused_to_operator(tt: &TensorTrain) -> OperatorTrain {
    OperatorTrain::from_fused(&tt.sites, tt.log_norm)
}

fn operator_bytes(op: &OperatorTrain) -> usize {
    op.sites().iter().map(|s| s.len() * std::mem::size_of::<C64>()).sum()
}

/// `U(t_0) … U(t_R)` as operators, each step compressed per `cfg.policy`.
pub fn evolution_operators(spec: &IsingSpec, grid: &TimeGrid, cfg: &EvolutionConfig) -> EvoResult<(Vec<OperatorTrain>, Vec<f64>)> {
    cfg.validate()?;
    let mut cur = fused_identity(spec.n);
    let mut ops = vec![fused_to_operator(&cur)];
    let mut errs = vec![0.0];
    let mut bytes = operator_bytes(&ops[0]);
    if grid.r() == 0 {
        return Ok((ops, errs));
    }
    let stepper = Stepper::new(spec, signed_step(grid.dt_eff, 1.0, cfg.direction), cfg.order, true)?;
    let mut err = 0.0;
    let mut fwd = true;
    for m in 1..=grid.r() {
        err += stepper.run(&mut cur, grid.steps_per_point, &cfg.policy, &mut fwd)?;
        check_budget(err, cfg)?;
        let op = fused_to_operator(&cur);
        bytes += operator_bytes(&op);
        if bytes > cfg.memory_budget {
            return Err(EvolutionError::MemoryBudgetExceeded { needed: bytes, budget: cfg.memory_budget });
        }
        log::debug!("U(t_{m}) bond {} err {err:.2e}", op.max_bond());
        ops.push(op);
        errs.push(err);
    }
    Ok((ops, errs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendMode {
    MpoCache,
    MpsOnDemand,
    Exact,
}

#[derive(Clone)]
pub enum FamilySource {
    MpoCache { operators: Vec<OperatorTrain>, errors: Vec<f64>, cfg: EvolutionConfig },
    MpsOnDemand { cfg: EvolutionConfig },
    Exact(Arc<EdSystem>),
}

/// The filter time grid together with a way to evaluate `U(t_m)`.
#[derive(Clone)]
pub struct EvolutionFamily {
    pub spec: IsingSpec,
    pub grid: TimeGrid,
    pub source: FamilySource,
}

/// A state handed to a backend.
#[derive(Clone, Copy, Debug)]
pub enum Probe<'a> {
    Mps(&'a TensorTrain),
    /// Computational basis state, `bits[i] = 0` is up.
    Bits(&'a [u8]),
}

impl Probe<'_> {
    fn to_mps(self) -> EvoResult<TensorTrain> {
        Ok(match self {
            Probe::Mps(t) => t.clone(),
            Probe::Bits(b) => TensorTrain::basis_state(b)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Amplitudes {
    /// `a(t_m)` for `m = 0 … R`.
    pub a: Vec<C64>,
    /// `⟨ψ|O U(t_m)|ψ⟩` for `m = −R … R`.
    pub a_o: Option<Vec<C64>>,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct DoubleGrid {
    pub a_o: Array2<C64>,
    pub gram: Array2<C64>,
    pub error: f64,
}

pub fn build_evolution_family(
    spec: &IsingSpec,
    fp: &FilterParams,
    cfg: &EvolutionConfig,
    mode: BackendMode,
) -> EvoResult<EvolutionFamily> {
    spec.validate()?;
    cfg.validate()?;
    let grid = TimeGrid::for_filter(fp, cfg.dt);
    let source = match mode {
        BackendMode::MpoCache => {
            let (operators, errors) = evolution_operators(spec, &grid, cfg)?;
            FamilySource::MpoCache { operators, errors, cfg: *cfg }
        }
        BackendMode::MpsOnDemand => FamilySource::MpsOnDemand { cfg: *cfg },
        BackendMode::Exact => {
            let obs = Observable::by_name("m_z")?;
            FamilySource::Exact(Arc::new(EdSystem::new(spec, &obs)?))
        }
    };
    Ok(EvolutionFamily { spec: *spec, grid, source })
}

/// Exact family over a prepared diagonalization; times are exactly `2m/α`.
pub fn exact_family(sys: Arc<EdSystem>, fp: &FilterParams) -> EvolutionFamily {
    let grid = TimeGrid {
        steps_per_point: 0,
        dt_eff: 0.0,
        times: (0..=fp.r_eff).map(|m| fp.time(m as i64)).collect(),
    };
    EvolutionFamily { spec: sys.spec, grid, source: FamilySource::Exact(sys) }
}

/// Family from operators loaded elsewhere (e.g. a disk cache).
pub fn family_from_operators(
    spec: &IsingSpec,
    grid: TimeGrid,
    operators: Vec<OperatorTrain>,
    errors: Vec<f64>,
    cfg: &EvolutionConfig,
) -> EvolutionFamily {
    EvolutionFamily { spec: *spec, grid, source: FamilySource::MpoCache { operators, errors, cfg: *cfg } }
}

impl EvolutionFamily {
    pub fn mode(&self) -> BackendMode {
        match self.source {
            FamilySource::MpoCache { .. } => BackendMode::MpoCache,
            FamilySource::MpsOnDemand { .. } => BackendMode::MpsOnDemand,
            FamilySource::Exact(_) => BackendMode::Exact,
        }
    }

    pub fn operators(&self) -> Option<&[OperatorTrain]> {
        match &self.source {
            FamilySource::MpoCache { operators, .. } => Some(operators),
            _ => None,
        }
    }

    /// Cumulative truncation error of `U(t_m)`; zero for non-cached backends.
    pub fn operator_error(&self, m: usize) -> f64 {
        match &self.source {
            FamilySource::MpoCache { errors, .. } => errors[m],
            _ => 0.0,
        }
    }

    fn check_r(&self, r: usize) -> EvoResult<()> {
        if r > self.grid.r() {
            return Err(EvolutionError::GridTooShort { have: self.grid.r() + 1, need: r + 1 });
        }
        Ok(())
    }

    fn exact_observable_check(sys: &EdSystem, obs: &Observable) -> EvoResult<()> {
        if sys.observable.name != obs.name {
            return Err(EvolutionError::ObservableMismatch { got: obs.name.clone(), want: sys.observable.name.clone() });
        }
        Ok(())
    }

    /// Amplitude series of a state for `m ≤ r`.
    pub fn amplitudes(&self, probe: &Probe<'_>, obs: Option<&Observable>, r: usize) -> EvoResult<Amplitudes> {
        self.check_r(r)?;
        let times = &self.grid.times[..=r];
        match &self.source {
            FamilySource::Exact(sys) => {
                let sd = match probe {
                    Probe::Bits(b) => sys.decompose_basis(crate::ed::bits_to_index(b)),
                    Probe::Mps(t) => sys.decompose(&t.to_dense())?,
                };
                let a = times.iter().map(|&t| sys.amplitude(&sd, t)).collect();
                let a_o = match obs {
                    None => None,
                    Some(o) => {
                        Self::exact_observable_check(sys, o)?;
                        let mut v: Vec<C64> = times.iter().skip(1).rev().map(|&t| sys.obs_amplitude(&sd, -t)).collect();
                        v.extend(times.iter().map(|&t| sys.obs_amplitude(&sd, t)));
                        Some(v)
                    }
                };
                Ok(Amplitudes { a, a_o, error: 0.0 })
            }
            FamilySource::MpoCache { operators, errors, .. } => {
                let psi = probe.to_mps()?;
                let mut a = Vec::with_capacity(r + 1);
                for u in &operators[..=r] {
                    a.push(sandwich(&psi, Some(u), &psi)?);
                }
                let a_o = match obs {
                    None => None,
                    Some(o) => {
                        let o_dag = o.mpo(self.spec.n).dagger();
                        let (ophi, _) = apply_mpo(&o_dag, &psi, &TruncationPolicy::lossless())?;
                        let mut v = Vec::with_capacity(2 * r + 1);
                        // ⟨ψ|O U†|ψ⟩ = conj(⟨ψ|U|O†ψ⟩)
                        for u in operators[1..=r].iter().rev() {
                            v.push(sandwich(&psi, Some(u), &ophi)?.conj());
                        }
                        for u in &operators[..=r] {
                            v.push(sandwich(&ophi, Some(u), &psi)?);
                        }
                        Some(v)
                    }
                };
                Ok(Amplitudes { a, a_o, error: errors[r] })
            }
            FamilySource::MpsOnDemand { cfg } => {
                let psi = probe.to_mps()?;
                let fwd = evolve_on_grid(&self.spec, &psi, &self.grid, r, 1.0, cfg)?;
                let mut error = fwd.last().map(|x| x.1).unwrap_or(0.0);
                let mut a = Vec::with_capacity(r + 1);
                for (s, _) in &fwd {
                    a.push(sandwich(&psi, None, s)?);
                }
                let a_o = match obs {
                    None => None,
                    Some(o) => {
                        let o_dag = o.mpo(self.spec.n).dagger();
                        let (ophi, _) = apply_mpo(&o_dag, &psi, &TruncationPolicy::lossless())?;
                        let bwd = evolve_on_grid(&self.spec, &psi, &self.grid, r, -1.0, cfg)?;
                        error = error.max(bwd.last().map(|x| x.1).unwrap_or(0.0));
                        let mut v = Vec::with_capacity(2 * r + 1);
                        for (s, _) in bwd[1..].iter().rev() {
                            v.push(sandwich(&ophi, None, s)?);
                        }
                        for (s, _) in &fwd {
                            v.push(sandwich(&ophi, None, s)?);
                        }
                        Some(v)
                    }
                };
                Ok(Amplitudes { a, a_o, error })
            }
        }
    }

    /// `⟨ψ(t_m)|O|ψ(t_n)⟩` and `⟨ψ(t_m)|ψ(t_n)⟩` over `−r ≤ m, n ≤ r`.
    pub fn double_grid(&self, probe: &Probe<'_>, obs: &Observable, r: usize) -> EvoResult<DoubleGrid> {
        self.check_r(r)?;
        let k = 2 * r + 1;
        let mut a_o = Array2::<C64>::zeros((k, k));
        let mut gram = Array2::<C64>::zeros((k, k));
        match &self.source {
            FamilySource::Exact(sys) => {
                Self::exact_observable_check(sys, obs)?;
                let sd = match probe {
                    Probe::Bits(b) => sys.decompose_basis(crate::ed::bits_to_index(b)),
                    Probe::Mps(t) => sys.decompose(&t.to_dense())?,
                };
                let states: Vec<Vec<C64>> =
                    (-(r as i64)..=r as i64).map(|m| sys.evolve(&sd, m.signum() as f64 * self.grid.times[m.unsigned_abs() as usize])).collect();
                let ostates: Vec<Vec<C64>> = states.iter().map(|s| sys.apply_observable(s)).collect();
                let dot = |a: &[C64], b: &[C64]| -> C64 { a.iter().zip(b).map(|(x, y)| x.conj() * y).sum() };
                for i in 0..k {
                    for j in i..k {
                        gram[[i, j]] = dot(&states[i], &states[j]);
                        a_o[[i, j]] = dot(&states[i], &ostates[j]);
                        gram[[j, i]] = gram[[i, j]].conj();
                        a_o[[j, i]] = dot(&ostates[i], &states[j]).conj();
                    }
                }
                Ok(DoubleGrid { a_o, gram, error: 0.0 })
            }
            FamilySource::MpoCache { operators, errors, cfg } => {
                let psi = probe.to_mps()?;
                let mut states = Vec::with_capacity(k);
                let pol = cfg.policy.with_method(ApplyMethod::Exact);
                let mut err: f64 = errors[r];
                for m in -(r as i64)..=r as i64 {
                    let u = &operators[m.unsigned_abs() as usize];
                    let op = if m < 0 { u.dagger() } else { u.clone() };
                    let (s, e) = apply_mpo(&op, &psi, &pol)?;
                    err = err.max(errors[m.unsigned_abs() as usize] + e);
                    states.push(s);
                }
                fill_double(&mut a_o, &mut gram, &states, &obs.mpo(self.spec.n))?;
                Ok(DoubleGrid { a_o, gram, error: err })
            }
            FamilySource::MpsOnDemand { cfg } => {
                let psi = probe.to_mps()?;
                let fwd = evolve_on_grid(&self.spec, &psi, &self.grid, r, 1.0, cfg)?;
                let bwd = evolve_on_grid(&self.spec, &psi, &self.grid, r, -1.0, cfg)?;
                let err = fwd.last().map(|x| x.1).unwrap_or(0.0).max(bwd.last().map(|x| x.1).unwrap_or(0.0));
                let states: Vec<TensorTrain> =
                    bwd[1..].iter().rev().map(|x| x.0.clone()).chain(fwd.iter().map(|x| x.0.clone())).collect();
                fill_double(&mut a_o, &mut gram, &states, &obs.mpo(self.spec.n))?;
                Ok(DoubleGrid { a_o, gram, error: err })
            }
        }
    }

    /// `(tr U(t_m) / 2^N, tr(O U(t_m)) / 2^N)` for `m = 0 … r`.
    pub fn traces(&self, obs: &Observable, r: usize) -> EvoResult<Vec<(C64, C64)>> {
        self.check_r(r)?;
        match &self.source {
            FamilySource::Exact(sys) => {
                Self::exact_observable_check(sys, obs)?;
                Ok(self.grid.times[..=r].iter().map(|&t| (sys.trace_u(t), sys.trace_ou(t))).collect())
            }
            FamilySource::MpoCache { operators, .. } => {
                let o = obs.mpo(self.spec.n);
                operators[..=r]
                    .iter()
                    .map(|u| Ok((tn::mpo_trace_normalized(u)?, tn::trace_product(&o, u)?)))
                    .collect()
            }
            FamilySource::MpsOnDemand { .. } => {
                Err(EvolutionError::Invalid("trace evaluation needs operator or exact backend".into()))
            }
        }
    }
}

fn fill_double(a_o: &mut Array2<C64>, gram: &mut Array2<C64>, states: &[TensorTrain], o: &OperatorTrain) -> EvoResult<()> {
    let k = states.len();
    let herm = o.to_dense_if_small().map(|d| linalg::max_abs_diff(&d, &linalg::dagger(&d)) < 1e-14).unwrap_or(true);
    for i in 0..k {
        for j in i..k {
            gram[[i, j]] = sandwich(&states[i], None, &states[j])?;
            gram[[j, i]] = gram[[i, j]].conj();
            a_o[[i, j]] = sandwich(&states[i], Some(o), &states[j])?;
            a_o[[j, i]] = if herm { a_o[[i, j]].conj() } else { sandwich(&states[j], Some(o), &states[i])? };
        }
    }
    Ok(())
}

/// Imaginary-time builder for `M(β) ≈ e^{−βH/2}`.
pub struct GibbsBuilder {
    spec: IsingSpec,
    policy: TruncationPolicy,
    dbeta: f64,
    sign: f64,
    stepper: Stepper,
    state: TensorTrain,
    steps: usize,
    error: f64,
    forward: bool,
}

impl GibbsBuilder {
    /// Steps of size `dbeta` toward positive (`sign = 1`) or negative β.
    pub fn new(spec: &IsingSpec, dbeta: f64, sign: f64, policy: &TruncationPolicy) -> EvoResult<Self> {
        spec.validate()?;
        policy.validate()?;
        if !(dbeta > 0.0 && dbeta.is_finite()) {
            return Err(EvolutionError::Invalid(format!("dbeta = {dbeta} must be positive")));
        }
        let z = C64::new(0.0, -sign * dbeta / 2.0);
        Ok(Self {
            spec: *spec,
            policy: *policy,
            dbeta,
            sign: sign.signum(),
            stepper: Stepper::new(spec, z, 2, true)?,
            state: fused_identity(spec.n),
            steps: 0,
            error: 0.0,
            forward: true,
        })
    }

    pub fn beta(&self) -> f64 {
        self.sign * self.steps as f64 * self.dbeta
    }

    pub fn error(&self) -> f64 {
        self.error
    }

    pub fn advance(&mut self, steps: usize) -> EvoResult<()> {
        self.error += self.stepper.run(&mut self.state, steps, &self.policy, &mut self.forward)?;
        self.steps += steps;
        Ok(())
    }

    pub fn operator(&self) -> OperatorTrain {
        fused_to_operator(&self.state)
    }

    /// Operator at `beta() + sign · fraction · dbeta` from one partial step.
    pub fn partial(&self, fraction: f64) -> EvoResult<(OperatorTrain, f64)> {
        let z = C64::new(0.0, -self.sign * fraction * self.dbeta / 2.0);
        let st = Stepper::new(&self.spec, z, 2, true)?;
        let mut s = self.state.clone();
        let mut fwd = self.forward;
        let e = st.run(&mut s, 1, &self.policy, &mut fwd)?;
        Ok((fused_to_operator(&s), self.error + e))
    }
}

/// `M(β) ≈ e^{−βH/2}` by `|β|/dbeta` imaginary-time steps.
pub fn build_gibbs_mpo(spec: &IsingSpec, beta: f64, dbeta: f64, policy: &TruncationPolicy) -> EvoResult<(OperatorTrain, f64)> {
    if !(dbeta > 0.0) {
        return Err(EvolutionError::Invalid(format!("dbeta = {dbeta} must be positive")));
    }
    let steps = commensurate_steps(beta, dbeta)?;
    let mut b = GibbsBuilder::new(spec, dbeta, if beta < 0.0 { -1.0 } else { 1.0 }, policy)?;
    b.advance(steps)?;
    Ok((b.operator(), b.error()))
}

/// `tr(M† O M) / tr(M† M)`.
pub fn thermal_value(m: &OperatorTrain, obs: &OperatorTrain) -> EvoResult<f64> {
    let num = tn::hs_sandwich(m, Some(obs), m)?;
    let den = tn::hs_sandwich(m, None, m)?;
    Ok(num.re / den.re)
}

impl OperatorTrain {
    /// Dense form for chains of at most 6 sites, for cheap structural checks.
    pub(crate) fn to_dense_if_small(&self) -> Option<Array2<C64>> {
        (self.len() <= 6).then(|| self.to_dense())
    }
}

//! Network models, their vector field `u + Fᵀ1 − F1 − w`, fixed-step
//! integration, and an empirical instability detector.

use std::io::{self, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowfuncs::{Demand, FlowFuncError, Supply};
use crate::policies::{
    dual_ascent_flows_unchecked, fifo_gamma_unchecked, logit_flow_control_unchecked,
    logit_routing_unchecked, nonfifo_flows_unchecked, ConvexCostSet, Flows, Policy, PolicyError,
    RoutingMatrix,
};
use crate::topology::Topology;

/// Default integration step.
pub const DEFAULT_DT: f64 = 1e-2;
/// Default horizon for the instability detector.
pub const DEFAULT_HORIZON: f64 = 1e3;
/// Tolerance of the free-flow inequality.
pub const FREE_FLOW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("negative state entry {value} at cell {cell}")]
    NegativeState { cell: usize, value: f64 },
    #[error("policy does not match topology: {0}")]
    PolicyTopologyMismatch(String),
    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("model has no supply functions")]
    NoSupplyFunctions,
    #[error("invalid inflow: {0}")]
    InvalidInflow(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    FlowFunc(#[from] FlowFuncError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// A dynamical flow network with constant external inflow.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    topology: Topology,
    demands: Vec<Demand>,
    supplies: Option<Vec<Supply>>,
    policy: Policy,
    inflow: Vec<f64>,
}

impl Model {
    /// Validates the pieces against each other. `demands` may be empty for
    /// dual-ascent models, which do not use them.
    pub fn new(
        topology: Topology,
        demands: Vec<Demand>,
        supplies: Option<Vec<Supply>>,
        policy: Policy,
        inflow: Vec<f64>,
    ) -> Result<Self, DynamicsError> {
        let n = topology.n();
        let mismatch = |e: PolicyError| DynamicsError::PolicyTopologyMismatch(e.to_string());
        match &policy {
            Policy::Constant(r) | Policy::Fifo(r) | Policy::NonFifo(r) => {
                RoutingMatrix::new(&topology, r.matrix().clone()).map_err(mismatch)?;
            }
            Policy::Logit(p) | Policy::LogitControl(p) => {
                if p.alpha.len() != n {
                    return Err(DynamicsError::PolicyTopologyMismatch(format!(
                        "logit parameters have {} entries for {n} cells",
                        p.alpha.len()
                    )));
                }
            }
            Policy::DualAscent(costs) => {
                ConvexCostSet::new(&topology, costs.links().clone(), costs.outflow().clone()).map_err(mismatch)?;
            }
        }
        if policy.uses_demands() || !demands.is_empty() {
            if demands.len() != n {
                return Err(DynamicsError::Dimension { expected: n, got: demands.len() });
            }
            for d in &demands {
                d.validate()?;
            }
        }
        if policy.uses_demands() && !matches!(policy, Policy::Constant(_)) {
            if let Some(i) = demands.iter().position(|d| d.capacity().is_infinite()) {
                return Err(DynamicsError::PolicyTopologyMismatch(format!(
                    "cell {i} has unbounded demand; only constant-routing (affine) models accept it"
                )));
            }
        }
        if let Some(s) = &supplies {
            if s.len() != n {
                return Err(DynamicsError::Dimension { expected: n, got: s.len() });
            }
            for f in s {
                f.validate()?;
            }
        } else if policy.needs_supplies() {
            return Err(DynamicsError::NoSupplyFunctions);
        }
        check_inflow(&topology, &inflow)?;
        Ok(Self { topology, demands, supplies, policy, inflow })
    }

    /// Affine network `ẋ = u − Lᵀx` from an outflow-connected compartmental `L`.
    pub fn affine(topology: Topology, laplacian: &DMatrix<f64>, inflow: Vec<f64>) -> Result<Self, DynamicsError> {
        let n = topology.n();
        if laplacian.nrows() != n || laplacian.ncols() != n {
            return Err(DynamicsError::Dimension { expected: n, got: laplacian.nrows() });
        }
        let (d, r) = crate::analysis::compartmental_decompose(laplacian)
            .map_err(|e| DynamicsError::PolicyTopologyMismatch(e.to_string()))?;
        let demands = d.iter().map(|&a| Demand::linear(a)).collect::<Result<Vec<_>, _>>()?;
        let routing = RoutingMatrix::new(&topology, r)
            .map_err(|e| DynamicsError::PolicyTopologyMismatch(e.to_string()))?;
        Self::new(topology, demands, None, Policy::Constant(routing), inflow)
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn n(&self) -> usize {
        self.topology.n()
    }

    pub fn demands(&self) -> &[Demand] {
        &self.demands
    }

    pub fn supplies(&self) -> Option<&[Supply]> {
        self.supplies.as_deref()
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn inflow(&self) -> &[f64] {
        &self.inflow
    }

    /// Flow capacities `sup φ_i`.
    pub fn capacities(&self) -> Vec<f64> {
        self.demands.iter().map(Demand::capacity).collect()
    }

    /// Buffer capacities; infinite everywhere without supply functions.
    pub fn buffer_capacities(&self) -> Vec<f64> {
        match &self.supplies {
            Some(s) => s.iter().map(Supply::buffer_capacity).collect(),
            None => vec![f64::INFINITY; self.n()],
        }
    }

    pub fn with_inflow(&self, inflow: Vec<f64>) -> Result<Self, DynamicsError> {
        check_inflow(&self.topology, &inflow)?;
        Ok(Self { inflow, ..self.clone() })
    }

    pub fn with_demands(&self, demands: Vec<Demand>) -> Result<Self, DynamicsError> {
        Self::new(self.topology.clone(), demands, self.supplies.clone(), self.policy.clone(), self.inflow.clone())
    }

    /// `L = D (I − R)` when the model is affine (constant routing, linear
    /// demands).
    pub fn laplacian(&self) -> Option<DMatrix<f64>> {
        let Policy::Constant(r) = &self.policy else { return None };
        let n = self.n();
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n {
            let Demand::Linear { a } = self.demands[i] else { return None };
            for j in 0..n {
                let delta = if i == j { 1.0 } else { 0.0 };
                l[(i, j)] = a * (delta - r.matrix()[(i, j)]);
            }
        }
        Some(l)
    }

    /// Routing matrix in effect at `x`, if the policy routes by one.
    pub fn routing_at(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        match &self.policy {
            Policy::Constant(r) | Policy::Fifo(r) | Policy::NonFifo(r) => Some(r.matrix().clone()),
            Policy::Logit(p) | Policy::LogitControl(p) => Some(logit_routing_unchecked(p, &self.topology, x)),
            Policy::DualAscent(_) => None,
        }
    }

    pub fn demand_values(&self, x: &[f64]) -> Vec<f64> {
        self.demands.iter().zip(x).map(|(d, &xi)| d.value(xi)).collect()
    }

    fn supply_values(&self, x: &[f64]) -> Vec<f64> {
        match &self.supplies {
            Some(s) => s.iter().zip(x).map(|(f, &xi)| f.value(xi)).collect(),
            None => vec![f64::INFINITY; self.n()],
        }
    }

    fn check_state(&self, x: &[f64]) -> Result<(), DynamicsError> {
        if x.len() != self.n() {
            return Err(DynamicsError::Dimension { expected: self.n(), got: x.len() });
        }
        match x.iter().position(|&v| !(v >= 0.0)) {
            Some(cell) => Err(DynamicsError::NegativeState { cell, value: x[cell] }),
            None => Ok(()),
        }
    }

    /// Flows `(F, w)` at state `x`.
    pub fn flows(&self, x: &[f64]) -> Result<Flows, DynamicsError> {
        self.check_state(x)?;
        Ok(self.flows_unchecked(x))
    }

    pub(crate) fn flows_unchecked(&self, x: &[f64]) -> Flows {
        let topo = &self.topology;
        match &self.policy {
            Policy::Constant(r) => Flows::routed(r.matrix(), &self.demand_values(x)),
            Policy::Logit(p) => Flows::routed(&logit_routing_unchecked(p, topo, x), &self.demand_values(x)),
            Policy::LogitControl(p) => {
                let gamma = logit_flow_control_unchecked(p, topo, x);
                let z: Vec<f64> = self.demand_values(x).iter().zip(&gamma).map(|(d, g)| d * g).collect();
                Flows::routed(&logit_routing_unchecked(p, topo, x), &z)
            }
            Policy::Fifo(r) => {
                let phi = self.demand_values(x);
                let gamma = fifo_gamma_unchecked(topo, r.matrix(), &phi, &self.supply_values(x));
                let z: Vec<f64> = phi.iter().zip(&gamma).map(|(d, g)| d * g).collect();
                Flows::routed(r.matrix(), &z)
            }
            Policy::NonFifo(r) => {
                nonfifo_flows_unchecked(topo, r.matrix(), &self.demand_values(x), &self.supply_values(x))
            }
            Policy::DualAscent(costs) => dual_ascent_flows_unchecked(topo, costs, x),
        }
    }

    /// `ẋ = u + Fᵀ1 − F1 − w`.
    pub fn rhs(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        self.check_state(x)?;
        Ok(self.rhs_unchecked(x))
    }

    pub(crate) fn rhs_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.flows_unchecked(x).balance(&self.inflow)
    }

    /// Whether `u + Rᵀφ(x) ≤ σ(x)` entrywise.
    pub fn free_flow_check(&self, x: &[f64]) -> Result<bool, DynamicsError> {
        self.check_state(x)?;
        if self.supplies.is_none() {
            return Err(DynamicsError::NoSupplyFunctions);
        }
        let r = self.routing_at(x).ok_or_else(|| {
            DynamicsError::PolicyTopologyMismatch("dual-ascent models have no routing matrix".into())
        })?;
        let phi = self.demand_values(x);
        let sigma = self.supply_values(x);
        let n = self.n();
        Ok((0..n).all(|k| {
            let arriving: f64 = self.inflow[k] + (0..n).map(|h| r[(h, k)] * phi[h]).sum::<f64>();
            arriving <= sigma[k] + FREE_FLOW_TOL
        }))
    }
}

fn check_inflow(topology: &Topology, inflow: &[f64]) -> Result<(), DynamicsError> {
    if inflow.len() != topology.n() {
        return Err(DynamicsError::Dimension { expected: topology.n(), got: inflow.len() });
    }
    for (i, &u) in inflow.iter().enumerate() {
        if !(u >= 0.0) || !u.is_finite() {
            return Err(DynamicsError::InvalidInflow(format!("cell {i} has inflow {u}")));
        }
        if u > 0.0 && !topology.is_inflow_cell(i) {
            return Err(DynamicsError::InvalidInflow(format!("cell {i} is not an inflow cell")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: f64,
    pub dt: f64,
    /// Keep per-step total and external outflows.
    pub record_flows: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { horizon: 100.0, dt: DEFAULT_DT, record_flows: false }
    }
}

impl SimConfig {
    pub fn new(horizon: f64, dt: f64) -> Self {
        Self { horizon, dt, record_flows: false }
    }

    fn validate(&self) -> Result<usize, DynamicsError> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(DynamicsError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= self.dt) || !self.horizon.is_finite() {
            return Err(DynamicsError::InvalidConfig(format!(
                "horizon {} must be finite and at least dt {}",
                self.horizon, self.dt
            )));
        }
        Ok(steps_for(self.horizon, self.dt))
    }
}

fn steps_for(horizon: f64, dt: f64) -> usize {
    (horizon / dt - 1e-9).ceil() as usize
}

/// Per-step flow record.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    /// Total outflow `z = F1 + w`.
    pub total: Vec<f64>,
    /// External outflow `w`.
    pub external: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub flows: Option<Vec<FlowRecord>>,
    /// Largest amount any entry was moved by the post-step clamp.
    pub max_clamp: f64,
    /// Smallest entry observed before clamping.
    pub min_before_clamp: f64,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least the initial state")
    }

    /// CSV with header `t,x_1,...,x_n[,z_1,...,z_n]` and 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        let mut header = String::from("t");
        for i in 1..=n {
            header.push_str(&format!(",x_{i}"));
        }
        if self.flows.is_some() {
            for i in 1..=n {
                header.push_str(&format!(",z_{i}"));
            }
        }
        writeln!(out, "{header}")?;
        for (k, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            write!(out, "{}", fmt17(*t))?;
            for v in x {
                write!(out, ",{}", fmt17(*v))?;
            }
            if let Some(flows) = &self.flows {
                for v in &flows[k].total {
                    write!(out, ",{}", fmt17(*v))?;
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Decimal float with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Fixed-step classical Runge–Kutta stepper with a post-step clamp onto
/// `[0, x̄]`.
pub struct Stepper<'a> {
    model: &'a Model,
    dt: f64,
    upper: Vec<f64>,
    x: Vec<f64>,
    step: usize,
    pub max_clamp: f64,
    pub min_before_clamp: f64,
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a Model, x0: &[f64], dt: f64) -> Result<Self, DynamicsError> {
        model.check_state(x0)?;
        Ok(Self {
            model,
            dt,
            upper: model.buffer_capacities(),
            x: x0.to_vec(),
            step: 0,
            max_clamp: 0.0,
            min_before_clamp: x0.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    fn stage(&self, base: &[f64], k: &[f64], h: f64) -> Vec<f64> {
        base.iter().zip(k).map(|(x, k)| (x + h * k).max(0.0)).collect()
    }

    pub fn step(&mut self) -> Result<(), DynamicsError> {
        let dt = self.dt;
        let m = self.model;
        let k1 = m.rhs_unchecked(&self.x);
        let k2 = m.rhs_unchecked(&self.stage(&self.x, &k1, 0.5 * dt));
        let k3 = m.rhs_unchecked(&self.stage(&self.x, &k2, 0.5 * dt));
        let k4 = m.rhs_unchecked(&self.stage(&self.x, &k3, dt));
        self.step += 1;
        for i in 0..self.x.len() {
            let raw = self.x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            if !raw.is_finite() {
                return Err(DynamicsError::NonFiniteState { step: self.step });
            }
            self.min_before_clamp = self.min_before_clamp.min(raw);
            let clamped = raw.clamp(0.0, self.upper[i]);
            self.max_clamp = self.max_clamp.max((clamped - raw).abs());
            self.x[i] = clamped;
        }
        Ok(())
    }
}

fn flow_record(model: &Model, x: &[f64]) -> FlowRecord {
    let flows = model.flows_unchecked(x);
    FlowRecord { total: flows.total_outflow(), external: flows.w }
}

/// Integrates from `x0` over `[0, horizon]` with fixed step `dt`.
pub fn simulate(model: &Model, x0: &[f64], config: &SimConfig) -> Result<Trajectory, DynamicsError> {
    let steps = config.validate()?;
    let mut stepper = Stepper::new(model, x0, config.dt)?;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut flows = config.record_flows.then(|| Vec::with_capacity(steps + 1));
    times.push(0.0);
    states.push(x0.to_vec());
    if let Some(f) = flows.as_mut() {
        f.push(flow_record(model, x0));
    }
    for _ in 0..steps {
        stepper.step()?;
        times.push(stepper.time());
        states.push(stepper.state().to_vec());
        if let Some(f) = flows.as_mut() {
            f.push(flow_record(model, stepper.state()));
        }
    }
    if stepper.max_clamp > 0.0 {
        log::debug!("simulate: max clamp {:.3e}, min before clamp {:.3e}", stepper.max_clamp, stepper.min_before_clamp);
    }
    Ok(Trajectory {
        times,
        states,
        flows,
        max_clamp: stepper.max_clamp,
        min_before_clamp: stepper.min_before_clamp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub horizon: f64,
    pub dt: f64,
    /// Sup-norm threshold; `None` means `1e6 (1 + ‖x0‖∞)`.
    pub x_max: Option<f64>,
    /// Least-squares slope of total mass over the last quarter above which
    /// growth is declared.
    pub slope_min: f64,
    /// Equilibrium threshold on `‖ẋ‖∞`.
    pub eps_eq: f64,
    /// Return as soon as `‖ẋ‖∞ < eps_eq` instead of at the horizon.
    pub stop_at_equilibrium: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            dt: DEFAULT_DT,
            x_max: None,
            slope_min: 1e-3,
            eps_eq: 1e-8,
            stop_at_equilibrium: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Stable { limit: Vec<f64>, residual: f64, time: f64 },
    Unstable { time: f64, sup_norm: f64, slope: Option<f64> },
    Inconclusive { residual: f64, slope: f64 },
}

impl Verdict {
    pub fn is_stable(&self) -> bool {
        matches!(self, Verdict::Stable { .. })
    }

    pub fn is_unstable(&self) -> bool {
        matches!(self, Verdict::Unstable { .. })
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Streaming least-squares slope of `(t, y)` samples.
#[derive(Default)]
struct SlopeFit {
    n: f64,
    t0: Option<f64>,
    st: f64,
    sy: f64,
    stt: f64,
    sty: f64,
}

impl SlopeFit {
    fn push(&mut self, t: f64, y: f64) {
        let t = t - *self.t0.get_or_insert(t);
        self.n += 1.0;
        self.st += t;
        self.sy += y;
        self.stt += t * t;
        self.sty += t * y;
    }

    fn slope(&self) -> f64 {
        let denom = self.n * self.stt - self.st * self.st;
        if self.n < 2.0 || denom <= 0.0 {
            return 0.0;
        }
        (self.n * self.sty - self.st * self.sy) / denom
    }
}

/// Classifies the trajectory from `x0` as stable, growing, or undecided.
pub fn detect_instability(model: &Model, x0: &[f64], config: &DetectorConfig) -> Result<Verdict, DynamicsError> {
    let steps = SimConfig::new(config.horizon, config.dt).validate()?;
    let x_max = config.x_max.unwrap_or(1e6 * (1.0 + sup_norm(x0)));
    let tail_start = steps - steps / 4;
    let mut stepper = Stepper::new(model, x0, config.dt)?;
    let mut fit = SlopeFit::default();
    let mut residual = sup_norm(&model.rhs_unchecked(x0));
    if config.stop_at_equilibrium && residual < config.eps_eq {
        return Ok(Verdict::Stable { limit: x0.to_vec(), residual, time: 0.0 });
    }
    for k in 1..=steps {
        if let Err(DynamicsError::NonFiniteState { .. }) = stepper.step() {
            return Ok(Verdict::Unstable { time: stepper.time(), sup_norm: f64::INFINITY, slope: None });
        }
        let x = stepper.state();
        let norm = sup_norm(x);
        if norm > x_max {
            return Ok(Verdict::Unstable { time: stepper.time(), sup_norm: norm, slope: None });
        }
        if k >= tail_start {
            fit.push(stepper.time(), x.iter().sum());
        }
        if config.stop_at_equilibrium || k == steps {
            residual = sup_norm(&model.rhs_unchecked(x));
            if residual < config.eps_eq {
                return Ok(Verdict::Stable { limit: x.to_vec(), residual, time: stepper.time() });
            }
        }
    }
    let slope = fit.slope();
    let x = stepper.state();
    if slope > config.slope_min {
        return Ok(Verdict::Unstable { time: stepper.time(), sup_norm: sup_norm(x), slope: Some(slope) });
    }
    Ok(Verdict::Inconclusive { residual, slope })
}

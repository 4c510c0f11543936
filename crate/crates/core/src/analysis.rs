//! Structural checks (compartmental Jacobians, sampled monotonicity),
//! equilibria, trajectory audits, and the convex network flow problem solved
//! both by dual ascent and by a primal augmented-Lagrangian oracle.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{detect_instability, DetectorConfig, DynamicsError, Model, Stepper, Verdict};
use crate::flowfuncs::FlowFuncError;
use crate::policies::{ConvexCostSet, Flows, Policy};
use crate::topology::Topology;

/// Threshold for reading the adjacency of a linearization off its entries.
pub const JACOBIAN_EDGE_THRESHOLD: f64 = 1e-9;
/// Largest matrix handed to the dense eigenvalue routine.
pub const MAX_EIGEN_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("state entry {value} at cell {cell} is not strictly interior")]
    BoundaryPoint { cell: usize, value: f64 },
    #[error("zero diagonal entry at cell {0}")]
    ZeroDiagonal(usize),
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("series sum and direct solve differ by {0}")]
    SeriesMismatch(f64),
    #[error("equilibrium outflow {flow} at cell {cell} is not below its capacity {capacity}")]
    CapacityViolated { cell: usize, flow: f64, capacity: f64 },
    #[error("topology is not outflow-connected")]
    NotOutflowConnected,
    #[error("topology is not inflow-connected")]
    NotInflowConnected,
    #[error("operation needs a constant-routing model, got {0}")]
    NotConstantRouting(&'static str),
    #[error("inconclusive: residual {residual}, tail slope {slope}")]
    Inconclusive { residual: f64, slope: f64 },
    #[error("initial states or inflows are not ordered: {0}")]
    InvalidOrder(String),
    #[error("matrix dimension {n} exceeds {max}")]
    TooLarge { n: usize, max: usize },
    #[error("matrix is singular")]
    Singular,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    FlowFunc(#[from] FlowFuncError),
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Central-difference Jacobian of the vector field at an interior point.
pub fn jacobian_fd(model: &Model, x: &[f64]) -> Result<DMatrix<f64>, AnalysisError> {
    model.rhs(x)?;
    let n = model.n();
    let steps: Vec<f64> = x.iter().map(|v| 1e-6 * (1.0 + v)).collect();
    if let Some(cell) = (0..n).find(|&j| x[j] <= steps[j]) {
        return Err(AnalysisError::BoundaryPoint { cell, value: x[cell] });
    }
    let mut jac = DMatrix::zeros(n, n);
    let mut probe = x.to_vec();
    for j in 0..n {
        probe[j] = x[j] + steps[j];
        let plus = model.rhs_unchecked(&probe);
        probe[j] = x[j] - steps[j];
        let minus = model.rhs_unchecked(&probe);
        probe[j] = x[j];
        for i in 0..n {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * steps[j]);
        }
    }
    Ok(jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompartmentalCheck {
    pub compartmental: bool,
    /// Most negative off-diagonal entry, or 0.
    pub worst_off_diagonal: f64,
    /// Largest row sum.
    pub worst_row_sum: f64,
}

impl CompartmentalCheck {
    pub fn violation(&self) -> f64 {
        (-self.worst_off_diagonal).max(self.worst_row_sum).max(0.0)
    }
}

/// Metzler with nonpositive row sums, both up to `tol`.
pub fn is_compartmental(m: &DMatrix<f64>, tol: f64) -> CompartmentalCheck {
    let n = m.nrows();
    let mut worst_off_diagonal: f64 = 0.0;
    let mut worst_row_sum = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                worst_off_diagonal = worst_off_diagonal.min(m[(i, j)]);
            }
        }
        worst_row_sum = worst_row_sum.max(m.row(i).sum());
    }
    CompartmentalCheck {
        compartmental: worst_off_diagonal >= -tol && worst_row_sum <= tol,
        worst_off_diagonal,
        worst_row_sum,
    }
}

/// Outflow-connectivity of a compartmental matrix `M`: `(i, j)` is an edge when
/// `M_ij > threshold`, and cells with row sum below `-threshold` leak out.
pub fn compartmental_outflow_connected(m: &DMatrix<f64>, threshold: f64) -> bool {
    let n = m.nrows();
    let edges: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && m[(i, j)] > threshold)
        .collect();
    let leaks: Vec<usize> = (0..n).filter(|&i| m.row(i).sum() < -threshold).collect();
    Topology::new(n, &edges, &[], &leaks).is_ok_and(|t| t.outflow_connectivity().all)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianReport {
    pub point: Vec<f64>,
    pub jacobian: Vec<Vec<f64>>,
    pub is_metzler: bool,
    pub transpose_is_compartmental: bool,
    /// Outflow-connectivity of the transpose, edges thresholded at
    /// [`JACOBIAN_EDGE_THRESHOLD`].
    pub is_outflow_connected_jacobian: bool,
    pub worst_violation: f64,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn jacobian_report(model: &Model, x: &[f64], tol: f64) -> Result<JacobianReport, AnalysisError> {
    let jac = jacobian_fd(model, x)?;
    let transposed = jac.transpose();
    let check = is_compartmental(&transposed, tol);
    Ok(JacobianReport {
        point: x.to_vec(),
        jacobian: rows(&jac),
        is_metzler: check.worst_off_diagonal >= -tol,
        transpose_is_compartmental: check.compartmental,
        is_outflow_connected_jacobian: compartmental_outflow_connected(&transposed, JACOBIAN_EDGE_THRESHOLD),
        worst_violation: check.violation(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotoneConfig {
    /// Sampling box `[lower, upper]^n`.
    pub lower: f64,
    pub upper: f64,
    pub samples: usize,
    pub seed: u64,
    pub tol: f64,
    /// Only accept points strictly inside the free-flow region.
    pub free_flow_only: bool,
}

impl Default for MonotoneConfig {
    fn default() -> Self {
        Self { lower: 0.0, upper: 5.0, samples: 200, seed: 0, tol: 1e-6, free_flow_only: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneReport {
    pub config: MonotoneConfig,
    pub samples: usize,
    pub passed: usize,
    pub pass_rate: f64,
    pub worst_violation: f64,
    pub worst_point: Option<Vec<f64>>,
    /// Draws discarded near kinks, near the boundary, or outside the
    /// free-flow region.
    pub rejected: usize,
}

/// Margin kept between samples and nonsmooth points.
const KINK_BAND: f64 = 1e-4;

fn near_kink(model: &Model, x: &[f64]) -> bool {
    let close = |k: Option<f64>, v: f64| k.is_some_and(|k| (v - k).abs() < KINK_BAND);
    x.iter().enumerate().any(|(i, &v)| {
        v < KINK_BAND
            || model.demands().get(i).is_some_and(|d| close(d.kink(), v))
            || model.supplies().is_some_and(|s| close(s[i].kink(), v))
    })
}

/// Smallest slack `σ_k − u_k − Σ_h R_hk φ_h` of the free-flow inequalities.
fn free_flow_slack(model: &Model, x: &[f64]) -> Option<f64> {
    let supplies = model.supplies()?;
    let r = model.routing_at(x)?;
    let phi = model.demand_values(x);
    let n = model.n();
    Some(
        (0..n)
            .map(|k| {
                let arriving = model.inflow()[k] + (0..n).map(|h| r[(h, k)] * phi[h]).sum::<f64>();
                supplies[k].eval(x[k]).unwrap_or(0.0) - arriving
            })
            .fold(f64::INFINITY, f64::min),
    )
}

/// Samples the box and checks that the transposed Jacobian of `rhs − u` is
/// compartmental at each point.
pub fn check_monotone(model: &Model, config: &MonotoneConfig) -> Result<MonotoneReport, AnalysisError> {
    let n = model.n();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = MonotoneReport {
        config: *config,
        samples: 0,
        passed: 0,
        pass_rate: 0.0,
        worst_violation: 0.0,
        worst_point: None,
        rejected: 0,
    };
    let max_draws = 1000 * config.samples.max(1);
    let mut draws = 0;
    while report.samples < config.samples {
        draws += 1;
        if draws > max_draws {
            break;
        }
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(config.lower..config.upper)).collect();
        if near_kink(model, &x) {
            report.rejected += 1;
            continue;
        }
        if config.free_flow_only && !free_flow_slack(model, &x).is_some_and(|s| s > KINK_BAND) {
            report.rejected += 1;
            continue;
        }
        let jac = jacobian_fd(model, &x)?;
        let check = is_compartmental(&jac.transpose(), config.tol);
        report.samples += 1;
        if check.compartmental {
            report.passed += 1;
        }
        if check.violation() > report.worst_violation || report.worst_point.is_none() {
            report.worst_violation = report.worst_violation.max(check.violation());
            report.worst_point = Some(x);
        }
    }
    report.pass_rate = if report.samples == 0 { 0.0 } else { report.passed as f64 / report.samples as f64 };
    Ok(report)
}

/// Splits `L` into its diagonal `d` and the routing matrix `R = I − D⁻¹L`.
pub fn compartmental_decompose(l: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>), AnalysisError> {
    let n = l.nrows();
    let d: Vec<f64> = (0..n).map(|i| l[(i, i)]).collect();
    if let Some(i) = d.iter().position(|&v| !(v > 0.0)) {
        return Err(AnalysisError::ZeroDiagonal(i));
    }
    let mut r = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                // Exact zeros stay zero so the support is preserved.
                r[(i, j)] = if l[(i, j)] == 0.0 { 0.0 } else { -l[(i, j)] / d[i] };
            }
        }
    }
    Ok((d, r))
}

/// Solves `(I − Rᵀ) z = u` directly.
pub fn solve_outflow(r: &DMatrix<f64>, u: &[f64]) -> Result<Vec<f64>, AnalysisError> {
    let n = r.nrows();
    let a = DMatrix::identity(n, n) - r.transpose();
    let z = a.lu().solve(&DVector::from_column_slice(u)).ok_or(AnalysisError::Singular)?;
    Ok(z.iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeumannResult {
    pub z: Vec<f64>,
    /// Index of the last series term that was not negligible.
    pub converged_at: usize,
    /// Sup-norm gap to the direct linear solve.
    pub direct_gap: f64,
}

/// Sums `u + Rᵀu + (R²)ᵀu + …` until a term drops below `tol`.
pub fn neumann_outflow(r: &DMatrix<f64>, u: &[f64], k_max: usize, tol: f64) -> Result<NeumannResult, AnalysisError> {
    let rt = r.transpose();
    let mut term = DVector::from_column_slice(u);
    let mut sum = DVector::zeros(u.len());
    for k in 0..=k_max {
        if term.amax() < tol {
            let z: Vec<f64> = sum.iter().copied().collect();
            let direct = solve_outflow(r, u)?;
            let gap = z.iter().zip(&direct).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if gap > 1e-8 * (1.0 + sup_norm(&direct)) {
                return Err(AnalysisError::SeriesMismatch(gap));
            }
            return Ok(NeumannResult { z, converged_at: k.saturating_sub(1), direct_gap: gap });
        }
        sum += &term;
        term = &rt * term;
    }
    Err(AnalysisError::NoConvergence { iterations: k_max })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EquilibriumMethod {
    ClosedForm,
    TrajectoryLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumResult {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub method: EquilibriumMethod,
    /// `‖rhs(x)‖∞`.
    pub residual: f64,
    /// Whether every entry of `x` is positive; reported for inflow-connected
    /// topologies only.
    pub strictly_positive: Option<bool>,
}

fn positivity(model: &Model, x: &[f64]) -> Option<bool> {
    model.topology().inflow_connectivity().all.then(|| x.iter().all(|&v| v > 0.0))
}

/// `z* = (I − Rᵀ)⁻¹u`, `x* = φ⁻¹(z*)` for constant-routing models.
pub fn equilibrium_closed_form(model: &Model) -> Result<EquilibriumResult, AnalysisError> {
    let Policy::Constant(routing) = model.policy() else {
        return Err(AnalysisError::NotConstantRouting(model.policy().kind()));
    };
    if !model.topology().outflow_connectivity().all {
        return Err(AnalysisError::NotOutflowConnected);
    }
    let z = solve_outflow(routing.matrix(), model.inflow())?;
    let mut x = Vec::with_capacity(z.len());
    for (cell, (d, &flow)) in model.demands().iter().zip(&z).enumerate() {
        // Roundoff can leave tiny negative outflows where u is zero upstream.
        let flow = flow.max(0.0);
        if flow >= d.capacity() {
            return Err(AnalysisError::CapacityViolated { cell, flow, capacity: d.capacity() });
        }
        x.push(d.inverse(flow)?);
    }
    let residual = sup_norm(&model.rhs(&x)?);
    let strictly_positive = positivity(model, &x);
    Ok(EquilibriumResult { x, z, method: EquilibriumMethod::ClosedForm, residual, strictly_positive })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum FromZero {
    Equilibrium(EquilibriumResult),
    Unbounded { time: f64, sup_norm: f64, slope: Option<f64> },
}

impl FromZero {
    pub fn equilibrium(&self) -> Option<&EquilibriumResult> {
        match self {
            FromZero::Equilibrium(e) => Some(e),
            FromZero::Unbounded { .. } => None,
        }
    }
}

/// Integrates from the empty network until the vector field vanishes or
/// growth is detected.
pub fn equilibrium_from_zero(model: &Model, config: &DetectorConfig) -> Result<FromZero, AnalysisError> {
    let zero = vec![0.0; model.n()];
    let config = DetectorConfig { stop_at_equilibrium: true, ..*config };
    match detect_instability(model, &zero, &config)? {
        Verdict::Stable { limit, residual, .. } => {
            let z = model.flows(&limit)?.total_outflow();
            let strictly_positive = positivity(model, &limit);
            Ok(FromZero::Equilibrium(EquilibriumResult {
                x: limit,
                z,
                method: EquilibriumMethod::TrajectoryLimit,
                residual,
                strictly_positive,
            }))
        }
        Verdict::Unstable { time, sup_norm, slope } => Ok(FromZero::Unbounded { time, sup_norm, slope }),
        Verdict::Inconclusive { residual, slope } => Err(AnalysisError::Inconclusive { residual, slope }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct L1Report {
    /// Largest one-step increase of `‖x − x̃‖₁`.
    pub max_increase: f64,
    /// Allowed per-step increase `10 dt⁴ (1 + ‖x0 − x̃0‖₁)`.
    pub bound: f64,
    pub steps: usize,
    pub passed: bool,
}

fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Integrates two trajectories on one grid and records the largest growth of
/// their ℓ1 distance.
pub fn l1_audit(model: &Model, x0: &[f64], y0: &[f64], horizon: f64, dt: f64) -> Result<L1Report, AnalysisError> {
    let steps = (horizon / dt - 1e-9).ceil() as usize;
    let mut a = Stepper::new(model, x0, dt)?;
    let mut b = Stepper::new(model, y0, dt)?;
    let initial = l1_distance(x0, y0);
    let bound = 10.0 * dt.powi(4) * (1.0 + initial);
    let mut previous = initial;
    let mut max_increase = f64::NEG_INFINITY;
    for _ in 0..steps {
        a.step()?;
        b.step()?;
        let d = l1_distance(a.state(), b.state());
        max_increase = max_increase.max(d - previous);
        previous = d;
    }
    Ok(L1Report { max_increase, bound, steps, passed: max_increase <= bound })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderReport {
    /// Largest `x_i(t) − x̃_i(t)` over all steps and cells.
    pub max_violation: f64,
    pub steps: usize,
    pub passed: bool,
}

/// Order tolerance for [`order_audit`].
pub const ORDER_TOL: f64 = 1e-6;

/// Checks `x(t) ≤ x̃(t)` for `x0 ≤ x̃0` and inflows `u ≤ ũ`.
pub fn order_audit(
    model: &Model,
    x0: &[f64],
    upper_x0: &[f64],
    upper_inflow: &[f64],
    horizon: f64,
    dt: f64,
) -> Result<OrderReport, AnalysisError> {
    if x0.iter().zip(upper_x0).any(|(a, b)| a > b) {
        return Err(AnalysisError::InvalidOrder("x0 must be below the upper initial state".into()));
    }
    if model.inflow().iter().zip(upper_inflow).any(|(a, b)| a > b) {
        return Err(AnalysisError::InvalidOrder("u must be below the upper inflow".into()));
    }
    let upper_model = model.with_inflow(upper_inflow.to_vec())?;
    let steps = (horizon / dt - 1e-9).ceil() as usize;
    let mut lo = Stepper::new(model, x0, dt)?;
    let mut hi = Stepper::new(&upper_model, upper_x0, dt)?;
    let mut max_violation = x0.iter().zip(upper_x0).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..steps {
        lo.step()?;
        hi.step()?;
        for (a, b) in lo.state().iter().zip(hi.state()) {
            max_violation = max_violation.max(a - b);
        }
    }
    Ok(OrderReport { max_violation, steps, passed: max_violation <= ORDER_TOL })
}

/// Largest single-step decrease of any entry along the trajectory from zero.
pub fn from_zero_max_decrease(model: &Model, horizon: f64, dt: f64) -> Result<f64, AnalysisError> {
    let steps = (horizon / dt - 1e-9).ceil() as usize;
    let mut stepper = Stepper::new(model, &vec![0.0; model.n()], dt)?;
    let mut previous = stepper.state().to_vec();
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        stepper.step()?;
        for (p, c) in previous.iter_mut().zip(stepper.state()) {
            worst = worst.max(*p - c);
            *p = *c;
        }
    }
    Ok(worst)
}

/// Largest real part of the eigenvalues of a dense square matrix.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<f64, AnalysisError> {
    let n = m.nrows();
    if n > MAX_EIGEN_DIM {
        return Err(AnalysisError::TooLarge { n, max: MAX_EIGEN_DIM });
    }
    let eig = m.clone().complex_eigenvalues();
    Ok(eig.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max))
}

/// Hurwitz test for `−Lᵀ` with margin: all real parts below `-margin`.
pub fn is_hurwitz(m: &DMatrix<f64>, margin: f64) -> Result<bool, AnalysisError> {
    Ok(spectral_abscissa(m)? < -margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub kkt_tol: f64,
    pub violation_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { kkt_tol: 1e-8, violation_tol: 1e-10, max_outer: 200, max_inner: 200_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSolution {
    pub flows: Flows,
    pub objective: f64,
    /// Multipliers of the conservation constraints.
    pub multipliers: Vec<f64>,
    pub kkt_residual: f64,
    pub violation: f64,
}

/// Primal variables of the convex flow problem: one per adjacency pair, then
/// one per outflow cell.
struct FlowProblem<'a> {
    n: usize,
    links: Vec<(usize, usize)>,
    sinks: Vec<usize>,
    costs: &'a ConvexCostSet,
    inflow: &'a [f64],
}

impl FlowProblem<'_> {
    fn cost(&self, k: usize) -> &crate::policies::ConvexCost {
        if k < self.links.len() {
            &self.costs.links()[&self.links[k]]
        } else {
            &self.costs.outflow()[&self.sinks[k - self.links.len()]]
        }
    }

    /// Conservation residual `u + Fᵀ1 − F1 − w`.
    fn residual(&self, v: &[f64]) -> Vec<f64> {
        let mut g = self.inflow.to_vec();
        for (k, &(i, j)) in self.links.iter().enumerate() {
            g[j] += v[k];
            g[i] -= v[k];
        }
        for (k, &s) in self.sinks.iter().enumerate() {
            g[s] -= v[self.links.len() + k];
        }
        g
    }

    fn objective(&self, v: &[f64]) -> f64 {
        v.iter().enumerate().map(|(k, &y)| self.cost(k).value(y)).sum()
    }

    /// Gradient of `Σψ + Σ p_i g_i` in the primal variables for prices `p`.
    fn lagrangian_gradient(&self, v: &[f64], prices: &[f64]) -> Vec<f64> {
        let mut grad: Vec<f64> = v.iter().enumerate().map(|(k, &y)| self.cost(k).marginal(y)).collect();
        for (k, &(i, j)) in self.links.iter().enumerate() {
            grad[k] += prices[j] - prices[i];
        }
        for (k, &s) in self.sinks.iter().enumerate() {
            grad[self.links.len() + k] -= prices[s];
        }
        grad
    }

    /// Gradient of the augmented Lagrangian `Σψ + λᵀg + ρ|g|²/2`.
    fn augmented_gradient(&self, v: &[f64], lambda: &[f64], rho: f64) -> Vec<f64> {
        let g = self.residual(v);
        let prices: Vec<f64> = lambda.iter().zip(&g).map(|(l, gi)| l + rho * gi).collect();
        self.lagrangian_gradient(v, &prices)
    }

    fn kkt_residual(&self, v: &[f64], lambda: &[f64]) -> f64 {
        let grad = self.lagrangian_gradient(v, lambda);
        let stationarity = v.iter().zip(&grad).map(|(y, gr)| (y - (y - gr).max(0.0)).abs()).fold(0.0, f64::max);
        stationarity.max(sup_norm(&self.residual(v)))
    }

    fn flows(&self, v: &[f64]) -> Flows {
        let mut flows = Flows::zeros(self.n);
        for (k, &(i, j)) in self.links.iter().enumerate() {
            flows.f[(i, j)] = v[k];
        }
        for (k, &s) in self.sinks.iter().enumerate() {
            flows.w[s] = v[self.links.len() + k];
        }
        flows
    }
}

/// Minimizes `Σψ_ij(F_ij) + Σψ_k(w_k)` subject to conservation and
/// nonnegativity by an augmented Lagrangian whose subproblems are solved
/// with projected gradient steps and backtracking.
pub fn solve_convex_flow_oracle(
    topology: &Topology,
    costs: &ConvexCostSet,
    inflow: &[f64],
    config: &OracleConfig,
) -> Result<FlowSolution, AnalysisError> {
    if !topology.inflow_connectivity().all {
        return Err(AnalysisError::NotInflowConnected);
    }
    if !topology.outflow_connectivity().all {
        return Err(AnalysisError::NotOutflowConnected);
    }
    let problem = FlowProblem {
        n: topology.n(),
        links: topology.adjacency().to_vec(),
        sinks: topology.outflow_cells(),
        costs,
        inflow,
    };
    let dim = problem.links.len() + problem.sinks.len();
    // Each primal variable enters at most two conservation rows, and a row
    // holds at most `width` variables, so `‖A‖² ≤ 2 width`.
    let mut width = vec![0usize; problem.n];
    for &(i, j) in &problem.links {
        width[i] += 1;
        width[j] += 1;
    }
    for &s in &problem.sinks {
        width[s] += 1;
    }
    let a_norm_sq = 2.0 * width.iter().copied().max().unwrap_or(1) as f64;
    let curvature = (0..dim).map(|k| problem.cost(k).curvature()).fold(0.0, f64::max);
    let mut v = vec![0.0; dim];
    let mut lambda = vec![0.0; problem.n];
    let mut rho = 1.0;
    let mut last_violation = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..config.max_outer {
        // Inner: accelerated projected gradient with step 1/Lipschitz and
        // restart whenever momentum points uphill.
        let step = 1.0 / (curvature + rho * a_norm_sq);
        let inner_tol = 0.1 * config.kkt_tol.min(config.violation_tol);
        let mut y = v.clone();
        let mut momentum = 1.0f64;
        for _ in 0..config.max_inner {
            iterations += 1;
            let grad = problem.augmented_gradient(&y, &lambda, rho);
            let next: Vec<f64> = y.iter().zip(&grad).map(|(yk, g)| (yk - step * g).max(0.0)).collect();
            let grad_next = problem.augmented_gradient(&next, &lambda, rho);
            let projected_gap =
                next.iter().zip(&grad_next).map(|(x, g)| (x - (x - g).max(0.0)).abs()).fold(0.0, f64::max);
            if projected_gap < inner_tol {
                v = next;
                break;
            }
            let uphill: f64 = grad.iter().zip(next.iter().zip(&v)).map(|(g, (a, b))| g * (a - b)).sum();
            let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = if uphill > 0.0 { 0.0 } else { (momentum - 1.0) / next_momentum };
            momentum = if uphill > 0.0 { 1.0 } else { next_momentum };
            y = next.iter().zip(&v).map(|(a, b)| (a + beta * (a - b)).max(0.0)).collect();
            v = next;
        }
        let g = problem.residual(&v);
        for (l, gi) in lambda.iter_mut().zip(&g) {
            *l += rho * gi;
        }
        let violation = sup_norm(&g);
        let kkt = problem.kkt_residual(&v, &lambda);
        if violation < config.violation_tol && kkt < config.kkt_tol {
            let flows = problem.flows(&v);
            return Ok(FlowSolution {
                objective: problem.objective(&v),
                flows,
                multipliers: lambda,
                kkt_residual: kkt,
                violation,
            });
        }
        if violation > 0.25 * last_violation && rho < 1e6 {
            rho *= 2.0;
        }
        last_violation = violation;
    }
    Err(AnalysisError::NoConvergence { iterations })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualAscentSolution {
    /// Limit of the multipliers.
    pub x: Vec<f64>,
    pub flows: Flows,
    /// `‖u + Fᵀ1 − F1 − w‖∞` at the limit.
    pub mass_residual: f64,
    pub objective: f64,
    pub time: f64,
}

/// Integrates the dual-ascent network from zero until its vector field, which
/// is the conservation residual, falls below `tol`.
pub fn dual_ascent_solve(
    topology: &Topology,
    costs: &ConvexCostSet,
    inflow: &[f64],
    horizon: f64,
    dt: f64,
    tol: f64,
) -> Result<DualAscentSolution, AnalysisError> {
    if !topology.inflow_connectivity().all {
        return Err(AnalysisError::NotInflowConnected);
    }
    if !topology.outflow_connectivity().all {
        return Err(AnalysisError::NotOutflowConnected);
    }
    let model = Model::new(topology.clone(), Vec::new(), None, Policy::DualAscent(costs.clone()), inflow.to_vec())?;
    let config = DetectorConfig {
        horizon,
        dt,
        eps_eq: tol,
        slope_min: f64::INFINITY,
        x_max: Some(f64::MAX),
        stop_at_equilibrium: true,
    };
    match detect_instability(&model, &vec![0.0; topology.n()], &config)? {
        Verdict::Stable { limit, residual, time } => {
            let flows = model.flows(&limit)?;
            let objective = costs.objective(&flows);
            Ok(DualAscentSolution { x: limit, flows, mass_residual: residual, objective, time })
        }
        Verdict::Unstable { .. } => Err(AnalysisError::Inconclusive { residual: f64::INFINITY, slope: f64::NAN }),
        Verdict::Inconclusive { residual, slope } => Err(AnalysisError::Inconclusive { residual, slope }),
    }
}

//! Routing matrices, flow controls, and the flow assemblies `(F, w)` of each
//! policy family.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::Topology;

/// Row-sum tolerance for routing matrices.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("routing matrix is not substochastic at row {row}: {detail}")]
    NotSubstochastic { row: usize, detail: String },
    #[error("routing entry ({0}, {1}) lies outside the adjacency set")]
    SupportViolation(usize, usize),
    #[error("row {row} of a cell without external outflow sums to {sum}, not 1")]
    NonSinkRowSumNotOne { row: usize, sum: f64 },
    #[error("negative state entry {value} at cell {cell}")]
    NegativeState { cell: usize, value: f64 },
    #[error("negative input entry {value} at cell {cell}")]
    NegativeInput { cell: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

fn check_nonneg(v: &[f64], state: bool) -> Result<(), PolicyError> {
    match v.iter().position(|&x| !(x >= 0.0)) {
        None => Ok(()),
        Some(cell) if state => Err(PolicyError::NegativeState { cell, value: v[cell] }),
        Some(cell) => Err(PolicyError::NegativeInput { cell, value: v[cell] }),
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), PolicyError> {
    if expected == got {
        Ok(())
    } else {
        Err(PolicyError::Dimension { expected, got })
    }
}

/// A constant substochastic routing matrix supported on the adjacency set,
/// fully routing the outflow of every cell without external outflow.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMatrix(DMatrix<f64>);

impl RoutingMatrix {
    pub fn new(topology: &Topology, matrix: DMatrix<f64>) -> Result<Self, PolicyError> {
        let n = topology.n();
        check_len(n, matrix.nrows())?;
        check_len(n, matrix.ncols())?;
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                let r = matrix[(i, j)];
                if !(r >= 0.0) || !r.is_finite() {
                    return Err(PolicyError::NotSubstochastic { row: i, detail: format!("entry {j} is {r}") });
                }
                if r > 0.0 && !topology.is_adjacent(i, j) {
                    return Err(PolicyError::SupportViolation(i, j));
                }
                sum += r;
            }
            if sum > 1.0 + ROW_SUM_TOL {
                return Err(PolicyError::NotSubstochastic { row: i, detail: format!("row sum {sum}") });
            }
            if !topology.is_outflow_cell(i) && (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(PolicyError::NonSinkRowSumNotOne { row: i, sum });
            }
        }
        Ok(Self(matrix))
    }

    /// Builds from sparse `(i, j, R_ij)` triples.
    pub fn from_entries(topology: &Topology, entries: &[(usize, usize, f64)]) -> Result<Self, PolicyError> {
        let n = topology.n();
        let mut m = DMatrix::zeros(n, n);
        for &(i, j, r) in entries {
            if i >= n || j >= n {
                return Err(PolicyError::Dimension { expected: n, got: i.max(j) + 1 });
            }
            m[(i, j)] = r;
        }
        Self::new(topology, m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Nonzero entries as `(i, j, R_ij)`, row-major.
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        let n = self.0.nrows();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.0[(i, j)] != 0.0 {
                    out.push((i, j, self.0[(i, j)]));
                }
            }
        }
        out
    }

    /// Fraction of the outflow of `i` leaving the network.
    pub fn deficit(&self, i: usize) -> f64 {
        (1.0 - self.0.row(i).sum()).max(0.0)
    }
}

/// Logit parameters shared by the routing and the flow control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LogitParams {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self, PolicyError> {
        check_len(alpha.len(), beta.len())?;
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(PolicyError::InvalidParameter("alpha must be finite".into()));
        }
        if beta.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(PolicyError::InvalidParameter("beta must be nonnegative and finite".into()));
        }
        Ok(Self { alpha, beta })
    }

    fn exponent(&self, k: usize, x: &[f64]) -> f64 {
        self.alpha[k] - self.beta[k] * x[k]
    }
}

/// Strictly convex increasing link cost given through its marginal cost
/// `ψ'` and the inverse of the marginal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ConvexCost {
    /// `c y² / 2`.
    Quadratic { c: f64 },
}

impl ConvexCost {
    pub fn quadratic(c: f64) -> Result<Self, PolicyError> {
        if c.is_finite() && c > 0.0 {
            Ok(ConvexCost::Quadratic { c })
        } else {
            Err(PolicyError::InvalidParameter(format!("quadratic cost needs c > 0, got {c}")))
        }
    }

    pub fn value(&self, y: f64) -> f64 {
        match *self {
            ConvexCost::Quadratic { c } => 0.5 * c * y * y,
        }
    }

    pub fn marginal(&self, y: f64) -> f64 {
        match *self {
            ConvexCost::Quadratic { c } => c * y,
        }
    }

    /// Inverse of the marginal cost on `[ψ'(0), ∞)`.
    pub fn marginal_inverse(&self, p: f64) -> f64 {
        match *self {
            ConvexCost::Quadratic { c } => p / c,
        }
    }

    /// Flow of the first-order optimality conditions for price difference `p`.
    pub fn optimal_flow(&self, p: f64) -> f64 {
        if p < self.marginal(0.0) {
            0.0
        } else {
            self.marginal_inverse(p)
        }
    }

    /// Second derivative bound, used for step sizes.
    pub fn curvature(&self) -> f64 {
        match *self {
            ConvexCost::Quadratic { c } => c,
        }
    }
}

/// One cost per adjacency pair and one per outflow cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexCostSet {
    links: BTreeMap<(usize, usize), ConvexCost>,
    outflow: BTreeMap<usize, ConvexCost>,
}

impl ConvexCostSet {
    pub fn new(
        topology: &Topology,
        links: BTreeMap<(usize, usize), ConvexCost>,
        outflow: BTreeMap<usize, ConvexCost>,
    ) -> Result<Self, PolicyError> {
        let expected: Vec<_> = topology.adjacency().to_vec();
        let got: Vec<_> = links.keys().copied().collect();
        if expected != got {
            return Err(PolicyError::InvalidParameter(
                "link costs must cover exactly the adjacency set".into(),
            ));
        }
        if topology.outflow_cells() != outflow.keys().copied().collect::<Vec<_>>() {
            return Err(PolicyError::InvalidParameter(
                "outflow costs must cover exactly the outflow cells".into(),
            ));
        }
        Ok(Self { links, outflow })
    }

    /// Same cost on every link and every outflow cell.
    pub fn uniform(topology: &Topology, cost: ConvexCost) -> Self {
        Self {
            links: topology.adjacency().iter().map(|&e| (e, cost)).collect(),
            outflow: topology.outflow_cells().into_iter().map(|k| (k, cost)).collect(),
        }
    }

    pub fn links(&self) -> &BTreeMap<(usize, usize), ConvexCost> {
        &self.links
    }

    pub fn outflow(&self) -> &BTreeMap<usize, ConvexCost> {
        &self.outflow
    }

    pub fn objective(&self, flows: &Flows) -> f64 {
        let link: f64 = self.links.iter().map(|(&(i, j), c)| c.value(flows.f[(i, j)])).sum();
        let out: f64 = self.outflow.iter().map(|(&k, c)| c.value(flows.w[k])).sum();
        link + out
    }
}

/// Cell-to-cell flows `F` and external outflows `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Flows {
    pub f: DMatrix<f64>,
    pub w: Vec<f64>,
}

impl Flows {
    pub fn zeros(n: usize) -> Self {
        Self { f: DMatrix::zeros(n, n), w: vec![0.0; n] }
    }

    /// Total outflow `z = F 1 + w`.
    pub fn total_outflow(&self) -> Vec<f64> {
        (0..self.w.len()).map(|i| self.f.row(i).sum() + self.w[i]).collect()
    }

    /// Total inflow from other cells, `F^T 1`.
    pub fn cell_inflow(&self) -> Vec<f64> {
        (0..self.w.len()).map(|i| self.f.column(i).sum()).collect()
    }

    /// Mass balance `u + F^T 1 - F 1 - w`.
    pub fn balance(&self, u: &[f64]) -> Vec<f64> {
        (0..self.w.len())
            .map(|i| u[i] + self.f.column(i).sum() - self.f.row(i).sum() - self.w[i])
            .collect()
    }

    /// Flows that split each total outflow `z_i` by the rows of `r`.
    pub(crate) fn routed(r: &DMatrix<f64>, z: &[f64]) -> Self {
        let n = z.len();
        let mut f = DMatrix::zeros(n, n);
        let mut w = vec![0.0; n];
        for i in 0..n {
            let mut routed = 0.0;
            for j in 0..n {
                let rij = r[(i, j)];
                if rij != 0.0 {
                    f[(i, j)] = rij * z[i];
                    routed += rij;
                }
            }
            w[i] = (1.0 - routed).max(0.0) * z[i];
        }
        Self { f, w }
    }
}

/// The routing and flow-control rule of a model.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// Constant routing, no flow control.
    Constant(RoutingMatrix),
    /// Logit routing, no flow control.
    Logit(LogitParams),
    /// Logit routing with logit flow control.
    LogitControl(LogitParams),
    /// Cell transmission model with the FIFO diverge rule.
    Fifo(RoutingMatrix),
    /// Cell transmission model with the non-FIFO diverge rule.
    NonFifo(RoutingMatrix),
    /// Dual ascent for the convex network flow problem; the state holds the
    /// multipliers.
    DualAscent(ConvexCostSet),
}

impl Policy {
    pub fn kind(&self) -> &'static str {
        match self {
            Policy::Constant(_) => "constant",
            Policy::Logit(_) => "logit",
            Policy::LogitControl(_) => "logit_control",
            Policy::Fifo(_) => "fifo",
            Policy::NonFifo(_) => "nonfifo",
            Policy::DualAscent(_) => "dual_ascent",
        }
    }

    pub fn needs_supplies(&self) -> bool {
        matches!(self, Policy::Fifo(_) | Policy::NonFifo(_))
    }

    pub fn uses_demands(&self) -> bool {
        !matches!(self, Policy::DualAscent(_))
    }
}

/// Logit routing matrix `R(x)`.
pub fn logit_routing(params: &LogitParams, topology: &Topology, x: &[f64]) -> Result<DMatrix<f64>, PolicyError> {
    check_len(topology.n(), x.len())?;
    check_nonneg(x, true)?;
    Ok(logit_routing_unchecked(params, topology, x))
}

pub(crate) fn logit_routing_unchecked(params: &LogitParams, topology: &Topology, x: &[f64]) -> DMatrix<f64> {
    let n = topology.n();
    let mut r = DMatrix::zeros(n, n);
    for i in 0..n {
        let nbrs = topology.out_neighbors(i);
        if nbrs.is_empty() {
            continue;
        }
        let sink = topology.is_outflow_cell(i);
        // Shift by the largest exponent; the indicator term is e^0.
        let mut shift = nbrs.iter().map(|&k| params.exponent(k, x)).fold(f64::NEG_INFINITY, f64::max);
        if sink {
            shift = shift.max(0.0);
        }
        let mut denom = if sink { (-shift).exp() } else { 0.0 };
        for &k in nbrs {
            denom += (params.exponent(k, x) - shift).exp();
        }
        for &j in nbrs {
            r[(i, j)] = (params.exponent(j, x) - shift).exp() / denom;
        }
    }
    r
}

/// Logit flow control `γ(x)`.
pub fn logit_flow_control(params: &LogitParams, topology: &Topology, x: &[f64]) -> Result<Vec<f64>, PolicyError> {
    check_len(topology.n(), x.len())?;
    check_nonneg(x, true)?;
    Ok(logit_flow_control_unchecked(params, topology, x))
}

pub(crate) fn logit_flow_control_unchecked(params: &LogitParams, topology: &Topology, x: &[f64]) -> Vec<f64> {
    (0..topology.n())
        .map(|i| {
            let nbrs = topology.out_neighbors(i);
            let sink = topology.is_outflow_cell(i);
            let own = params.exponent(i, x);
            let mut shift = nbrs.iter().map(|&k| params.exponent(k, x)).fold(own, f64::max);
            if sink {
                shift = shift.max(0.0);
            }
            let mut downstream: f64 = nbrs.iter().map(|&k| (params.exponent(k, x) - shift).exp()).sum();
            if sink {
                downstream += (-shift).exp();
            }
            downstream / ((own - shift).exp() + downstream)
        })
        .collect()
}

/// Aggregate routed demand `D_k = Σ_h R_hk φ_h` arriving at each cell.
fn routed_demand(r: &DMatrix<f64>, demands: &[f64]) -> Vec<f64> {
    let n = demands.len();
    (0..n).map(|k| (0..n).map(|h| r[(h, k)] * demands[h]).sum()).collect()
}

/// Largest admissible fraction of demand `d` under supply `s`.
fn admissible_fraction(s: f64, d: f64) -> f64 {
    if d > 0.0 {
        (s / d).min(1.0)
    } else {
        1.0
    }
}

/// FIFO flow control: each cell scales its whole outflow by the tightest
/// downstream supply ratio.
pub fn fifo_gamma(
    topology: &Topology,
    routing: &RoutingMatrix,
    demands: &[f64],
    supplies: &[f64],
) -> Result<Vec<f64>, PolicyError> {
    let n = topology.n();
    check_len(n, demands.len())?;
    check_len(n, supplies.len())?;
    check_nonneg(demands, false)?;
    check_nonneg(supplies, false)?;
    Ok(fifo_gamma_unchecked(topology, routing.matrix(), demands, supplies))
}

pub(crate) fn fifo_gamma_unchecked(
    topology: &Topology,
    r: &DMatrix<f64>,
    demands: &[f64],
    supplies: &[f64],
) -> Vec<f64> {
    let d = routed_demand(r, demands);
    (0..topology.n())
        .map(|i| {
            topology
                .out_neighbors(i)
                .iter()
                .map(|&k| admissible_fraction(supplies[k], d[k]))
                .fold(1.0, f64::min)
        })
        .collect()
}

/// Non-FIFO flows: each link `(i, j)` is throttled only by the supply of `j`.
pub fn nonfifo_flows(
    topology: &Topology,
    routing: &RoutingMatrix,
    demands: &[f64],
    supplies: &[f64],
) -> Result<Flows, PolicyError> {
    let n = topology.n();
    check_len(n, demands.len())?;
    check_len(n, supplies.len())?;
    check_nonneg(demands, false)?;
    check_nonneg(supplies, false)?;
    Ok(nonfifo_flows_unchecked(topology, routing.matrix(), demands, supplies))
}

pub(crate) fn nonfifo_flows_unchecked(
    topology: &Topology,
    r: &DMatrix<f64>,
    demands: &[f64],
    supplies: &[f64],
) -> Flows {
    let n = topology.n();
    let d = routed_demand(r, demands);
    let ratio: Vec<f64> = (0..n).map(|j| admissible_fraction(supplies[j], d[j])).collect();
    let mut flows = Flows::zeros(n);
    for &(i, j) in topology.adjacency() {
        flows.f[(i, j)] = ratio[j] * r[(i, j)] * demands[i];
    }
    for i in 0..n {
        let routed: f64 = r.row(i).sum();
        flows.w[i] = (1.0 - routed).max(0.0) * demands[i];
    }
    flows
}

/// Flows solving the first-order optimality conditions at multipliers `x`.
pub fn dual_ascent_flows(topology: &Topology, costs: &ConvexCostSet, x: &[f64]) -> Result<Flows, PolicyError> {
    check_len(topology.n(), x.len())?;
    check_nonneg(x, true)?;
    Ok(dual_ascent_flows_unchecked(topology, costs, x))
}

pub(crate) fn dual_ascent_flows_unchecked(topology: &Topology, costs: &ConvexCostSet, x: &[f64]) -> Flows {
    let mut flows = Flows::zeros(topology.n());
    for (&(i, j), cost) in costs.links() {
        flows.f[(i, j)] = cost.optimal_flow(x[i] - x[j]);
    }
    for (&k, cost) in costs.outflow() {
        flows.w[k] = cost.optimal_flow(x[k]);
    }
    flows
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn line2() -> Topology {
        Topology::new(2, &[(0, 1)], &[0], &[1]).unwrap()
    }

    fn diverge(sink_source: bool) -> Topology {
        let outflow: &[usize] = if sink_source { &[0, 1, 2] } else { &[1, 2] };
        Topology::new(3, &[(0, 1), (0, 2)], &[0], outflow).unwrap()
    }

    fn merge() -> Topology {
        Topology::new(3, &[(0, 2), (1, 2)], &[0, 1], &[2]).unwrap()
    }

    #[test]
    fn constant_routing_validation() {
        assert!(RoutingMatrix::from_entries(&line2(), &[(0, 1, 1.0)]).is_ok());
        assert!(RoutingMatrix::from_entries(&diverge(false), &[(0, 1, 0.5), (0, 2, 0.5)]).is_ok());
        assert!(matches!(
            RoutingMatrix::from_entries(&line2(), &[(0, 1, 0.5)]),
            Err(PolicyError::NonSinkRowSumNotOne { row: 0, .. })
        ));
        assert_eq!(
            RoutingMatrix::from_entries(&line2(), &[(0, 1, 1.0), (1, 0, 0.5)]),
            Err(PolicyError::SupportViolation(1, 0))
        );
        assert!(matches!(
            RoutingMatrix::from_entries(&diverge(true), &[(0, 1, 0.7), (0, 2, 0.7)]),
            Err(PolicyError::NotSubstochastic { row: 0, .. })
        ));
        assert!(matches!(
            RoutingMatrix::from_entries(&diverge(true), &[(0, 1, -0.1)]),
            Err(PolicyError::NotSubstochastic { .. })
        ));
    }

    #[test]
    fn logit_routing_examples() {
        let p = LogitParams::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let r = logit_routing(&p, &diverge(false), &[0.0; 3]).unwrap();
        assert_abs_diff_eq!(r[(0, 1)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r[(0, 2)], 0.5, epsilon = 1e-15);
        let r = logit_routing(&p, &diverge(true), &[0.0; 3]).unwrap();
        assert_abs_diff_eq!(r[(0, 1)], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r[(0, 2)], 1.0 / 3.0, epsilon = 1e-15);
        let r = logit_routing(&p, &diverge(false), &[0.0, 800.0, 1.0]).unwrap();
        assert!(r[(0, 1)] < 1e-300);
        assert_abs_diff_eq!(r[(0, 2)], 1.0, epsilon = 1e-15);
        assert!(logit_routing(&p, &diverge(false), &[0.0, -1.0, 0.0]).is_err());
    }

    #[test]
    fn logit_control_examples() {
        let p = LogitParams::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let t = Topology::new(2, &[(0, 1)], &[0], &[1]).unwrap();
        assert_abs_diff_eq!(logit_flow_control(&p, &t, &[0.0, 0.0]).unwrap()[0], 0.5, epsilon = 1e-15);
        assert!(1.0 - logit_flow_control(&p, &t, &[700.0, 1.0]).unwrap()[0] < 1e-12);
        assert!(logit_flow_control(&p, &t, &[1.0, 700.0]).unwrap()[0] < 1e-12);
        // Huge negative exponents everywhere must not produce NaN.
        let g = logit_flow_control(&p, &t, &[1e6, 1e6]).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fifo_merge_example() {
        let t = merge();
        let r = RoutingMatrix::from_entries(&t, &[(0, 2, 1.0), (1, 2, 1.0)]).unwrap();
        let g = fifo_gamma(&t, &r, &[2.0, 2.0, 0.0], &[10.0, 10.0, 2.0]).unwrap();
        assert_abs_diff_eq!(g[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.5, epsilon = 1e-15);
        assert_eq!(g[2], 1.0);
        let free = fifo_gamma(&t, &r, &[2.0, 2.0, 0.0], &[10.0, 10.0, 4.0]).unwrap();
        assert_eq!(free, vec![1.0; 3]);
        let blocked = fifo_gamma(&t, &r, &[2.0, 2.0, 0.0], &[10.0, 10.0, 0.0]).unwrap();
        assert_eq!(&blocked[..2], &[0.0, 0.0]);
        assert!(fifo_gamma(&t, &r, &[-1.0, 0.0, 0.0], &[1.0; 3]).is_err());
    }

    #[test]
    fn fifo_zero_supply_without_demand_is_no_constraint() {
        let t = merge();
        let r = RoutingMatrix::from_entries(&t, &[(0, 2, 1.0), (1, 2, 1.0)]).unwrap();
        let g = fifo_gamma(&t, &r, &[0.0, 0.0, 0.0], &[1.0, 1.0, 0.0]).unwrap();
        assert_eq!(g, vec![1.0; 3]);
    }

    #[test]
    fn nonfifo_examples() {
        let t = merge();
        let r = RoutingMatrix::from_entries(&t, &[(0, 2, 1.0), (1, 2, 1.0)]).unwrap();
        let flows = nonfifo_flows(&t, &r, &[2.0, 2.0, 0.0], &[10.0, 10.0, 2.0]).unwrap();
        assert_abs_diff_eq!(flows.f[(0, 2)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(flows.f[(1, 2)], 1.0, epsilon = 1e-15);

        let d = diverge(false);
        let r = RoutingMatrix::from_entries(&d, &[(0, 1, 0.25), (0, 2, 0.75)]).unwrap();
        let flows = nonfifo_flows(&d, &r, &[2.0, 1.0, 1.0], &[9.0; 3]).unwrap();
        assert_abs_diff_eq!(flows.f[(0, 1)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(flows.f[(0, 2)], 1.5, epsilon = 1e-15);
        assert_eq!(flows.w, vec![0.0, 1.0, 1.0]);

        let zero = nonfifo_flows(&d, &r, &[0.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(zero, Flows::zeros(3));
    }

    #[test]
    fn dual_ascent_examples() {
        let t = line2();
        let costs = ConvexCostSet::uniform(&t, ConvexCost::quadratic(1.0).unwrap());
        let flows = dual_ascent_flows(&t, &costs, &[2.0, 1.0]).unwrap();
        assert_eq!(flows.f[(0, 1)], 1.0);
        assert_eq!(flows.w, vec![0.0, 1.0]);
        let back = dual_ascent_flows(&t, &costs, &[1.0, 2.0]).unwrap();
        assert_eq!(back.f[(0, 1)], 0.0);
        assert_eq!(dual_ascent_flows(&t, &costs, &[0.0, 0.0]).unwrap(), Flows::zeros(2));
        let costs2 = ConvexCostSet::uniform(&t, ConvexCost::quadratic(2.0).unwrap());
        assert_eq!(dual_ascent_flows(&t, &costs2, &[3.0, 0.0]).unwrap().f[(0, 1)], 1.5);
    }

    #[test]
    fn cost_set_must_match_topology() {
        let t = line2();
        let c = ConvexCost::quadratic(1.0).unwrap();
        assert!(ConvexCostSet::new(&t, BTreeMap::new(), BTreeMap::from([(1, c)])).is_err());
        assert!(ConvexCostSet::new(&t, BTreeMap::from([((0, 1), c)]), BTreeMap::from([(1, c)])).is_ok());
        assert!(ConvexCost::quadratic(0.0).is_err());
    }

    /// Random topology on up to 6 cells, with exposed out-neighborhoods.
    fn topo_strategy() -> impl Strategy<Value = Topology> {
        (2usize..=6).prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec(any::<bool>(), n * n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_map(|(n, adj, sinks)| {
                    let pairs: Vec<_> = (0..n * n)
                        .filter(|&k| adj[k] && k / n != k % n)
                        .map(|k| (k / n, k % n))
                        .collect();
                    let outflow: Vec<_> = (0..n).filter(|&i| sinks[i]).collect();
                    Topology::new(n, &pairs, &[0], &outflow).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn logit_routing_is_substochastic(
            t in topo_strategy(),
            seed in proptest::collection::vec((-2.0f64..2.0, 0.0f64..2.0, 0.0f64..5.0), 6),
        ) {
            let n = t.n();
            let p = LogitParams::new(seed[..n].iter().map(|s| s.0).collect(), seed[..n].iter().map(|s| s.1).collect()).unwrap();
            let x: Vec<f64> = seed[..n].iter().map(|s| s.2).collect();
            let r = logit_routing(&p, &t, &x).unwrap();
            for i in 0..n {
                let sum: f64 = r.row(i).sum();
                prop_assert!(r.row(i).iter().all(|&v| v >= 0.0));
                for j in 0..n {
                    if !t.is_adjacent(i, j) {
                        prop_assert_eq!(r[(i, j)], 0.0);
                    }
                }
                if t.out_neighbors(i).is_empty() {
                    prop_assert_eq!(sum, 0.0);
                } else if t.is_outflow_cell(i) {
                    prop_assert!(sum < 1.0);
                } else {
                    prop_assert!((sum - 1.0).abs() <= ROW_SUM_TOL);
                }
            }
        }

        #[test]
        fn logit_routing_responds_monotonically(
            t in topo_strategy(),
            seed in proptest::collection::vec((-2.0f64..2.0, 0.0f64..2.0, 0.1f64..5.0), 6),
        ) {
            let n = t.n();
            let p = LogitParams::new(seed[..n].iter().map(|s| s.0).collect(), seed[..n].iter().map(|s| s.1).collect()).unwrap();
            let x: Vec<f64> = seed[..n].iter().map(|s| s.2).collect();
            let h = 1e-5;
            let gamma = logit_flow_control(&p, &t, &x).unwrap();
            for i in 0..n {
                for &k in t.out_neighbors(i) {
                    let mut up = x.clone();
                    let mut down = x.clone();
                    up[k] += h;
                    down[k] -= h;
                    let (ru, rd) = (logit_routing(&p, &t, &up).unwrap(), logit_routing(&p, &t, &down).unwrap());
                    let (gu, gd) = (logit_flow_control(&p, &t, &up).unwrap(), logit_flow_control(&p, &t, &down).unwrap());
                    prop_assert!((ru[(i, k)] - rd[(i, k)]) / (2.0 * h) <= 1e-8);
                    prop_assert!((gu[i] - gd[i]) / (2.0 * h) <= 1e-8);
                    for &j in t.out_neighbors(i) {
                        if j != k {
                            prop_assert!((ru[(i, j)] - rd[(i, j)]) / (2.0 * h) >= -1e-8);
                            let d = (gu[i] * ru[(i, j)] - gd[i] * rd[(i, j)]) / (2.0 * h);
                            prop_assert!(d >= -1e-8, "d(γR)/dx = {d}");
                        }
                    }
                }
                prop_assert!((0.0..=1.0).contains(&gamma[i]));
            }
        }

        #[test]
        fn ctm_rules_respect_demand_and_supply(
            demands in proptest::collection::vec(0.0f64..3.0, 4),
            supplies in proptest::collection::vec(0.0f64..3.0, 4),
            split in 0.0f64..1.0,
        ) {
            // 0 and 1 merge into 2, 2 diverges into 3 and out of the network.
            let t = Topology::new(4, &[(0, 2), (1, 2), (2, 3)], &[0, 1], &[2, 3]).unwrap();
            let r = RoutingMatrix::from_entries(&t, &[(0, 2, 1.0), (1, 2, 1.0), (2, 3, split)]).unwrap();
            let gamma = fifo_gamma(&t, &r, &demands, &supplies).unwrap();
            let z: Vec<f64> = (0..4).map(|i| gamma[i] * demands[i]).collect();
            let fifo = Flows::routed(r.matrix(), &z);
            let nonfifo = nonfifo_flows(&t, &r, &demands, &supplies).unwrap();
            for flows in [fifo, nonfifo] {
                let inflow = flows.cell_inflow();
                let outflow = flows.total_outflow();
                for k in 0..4 {
                    prop_assert!(inflow[k] <= supplies[k] + 1e-9);
                    prop_assert!(outflow[k] <= demands[k] + 1e-9);
                }
            }
        }
    }
}

//! Perturbations, the min-cut residual capacity, margin-of-resilience
//! formulas, and empirical margins found by bisection on a perturbation
//! family.

use serde::Serialize;
use thiserror::Error;

use crate::analysis::{equilibrium_from_zero, solve_outflow, AnalysisError, FromZero};
use crate::dynamics::{detect_instability, DetectorConfig, DynamicsError, Model, Verdict};
use crate::policies::Policy;
use crate::topology::Topology;

/// Largest cell count for exhaustive cut enumeration.
pub const MAX_ENUM_CELLS: usize = 24;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResilienceError {
    #[error("{n} cells exceed the enumeration limit of {max}")]
    TooManyCells { n: usize, max: usize },
    #[error("cell {0} has infinite flow capacity")]
    InfiniteCapacity(usize),
    #[error("topology is not the line-digraph of an acyclic digraph")]
    TopologyNotLineDigraphAcyclic,
    #[error("equilibrium outflow {flow} at cell {cell} exceeds its capacity {capacity}")]
    CapacityViolated { cell: usize, flow: f64, capacity: f64 },
    #[error("margin formula does not apply to {0} models")]
    UnsupportedPolicy(&'static str),
    #[error("no cell has a nonempty out-neighborhood")]
    NoOutNeighborhoods,
    #[error("unperturbed equilibrium undetermined: residual {residual}, tail slope {slope}")]
    Inconclusive { residual: f64, slope: f64 },
    #[error("detector inconclusive around delta = {delta} with bracket [{lo}, {hi}]")]
    InconclusiveProbe { delta: f64, lo: f64, hi: f64 },
    #[error("no instability found up to delta = {upper}")]
    NoInstabilityFound { upper: f64 },
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

fn finite_capacities(capacities: &[f64]) -> Result<(), ResilienceError> {
    match capacities.iter().position(|c| !c.is_finite()) {
        Some(i) => Err(ResilienceError::InfiniteCapacity(i)),
        None => Ok(()),
    }
}

/// Constant inflow increments plus demand scalings `φ̃_i = s_i φ_i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Perturbation {
    pub inflow_delta: Vec<f64>,
    pub demand_scale: Vec<f64>,
}

impl Perturbation {
    pub fn none(n: usize) -> Self {
        Self { inflow_delta: vec![0.0; n], demand_scale: vec![1.0; n] }
    }

    fn check(&self, model: &Model) -> Result<(), ResilienceError> {
        let n = model.n();
        if self.inflow_delta.len() != n || self.demand_scale.len() != n {
            return Err(ResilienceError::InvalidPerturbation(format!("vectors must have {n} entries")));
        }
        if let Some(i) = self.demand_scale.iter().position(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(ResilienceError::InvalidPerturbation(format!(
                "demand scale {} at cell {i} is outside (0, 1]",
                self.demand_scale[i]
            )));
        }
        for (i, (&d, &u)) in self.inflow_delta.iter().zip(model.inflow()).enumerate() {
            if !d.is_finite() || u + d < 0.0 {
                return Err(ResilienceError::InvalidPerturbation(format!("inflow at cell {i} becomes {}", u + d)));
            }
            if d != 0.0 && !model.topology().is_inflow_cell(i) {
                return Err(ResilienceError::InvalidPerturbation(format!("cell {i} takes no external inflow")));
            }
        }
        Ok(())
    }

    /// `Σ|Δu_i| + Σ(1 − s_i) C_i`; the sup-norm gap of a scaled demand is
    /// attained at its capacity.
    pub fn magnitude(&self, model: &Model) -> Result<f64, ResilienceError> {
        self.check(model)?;
        let capacities = model.capacities();
        finite_capacities(&capacities)?;
        let inflow: f64 = self.inflow_delta.iter().map(|d| d.abs()).sum();
        let demand: f64 = self.demand_scale.iter().zip(&capacities).map(|(s, c)| (1.0 - s) * c).sum();
        Ok(inflow + demand)
    }

    /// The perturbed network: same topology and policy, scaled demands and
    /// shifted inflow.
    pub fn apply(&self, model: &Model) -> Result<Model, ResilienceError> {
        self.check(model)?;
        let demands = model.demands().iter().zip(&self.demand_scale).map(|(d, &s)| d.scaled(s)).collect();
        let inflow = model.inflow().iter().zip(&self.inflow_delta).map(|(u, d)| u + d).collect();
        Ok(model.with_demands(demands)?.with_inflow(inflow)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinCut {
    pub value: f64,
    /// An argmin `J`, sorted.
    pub cut: Vec<usize>,
    /// The cells trapped behind `cut`.
    pub trapped: Vec<usize>,
}

fn bits(mask: u64) -> Vec<usize> {
    (0..64).filter(|&i| mask & (1 << i) != 0).collect()
}

fn masked_sum(values: &[f64], mask: u64) -> f64 {
    values.iter().enumerate().filter(|&(i, _)| mask & (1 << i) != 0).map(|(_, v)| v).sum()
}

/// Minimum over nonempty cell sets `J` of `max(0, Σ_J C_j − Σ_{K_J} u_k)`,
/// where `K_J` is the set trapped by removing `J`.
pub fn min_cut_residual_capacity(
    topology: &Topology,
    capacities: &[f64],
    inflow: &[f64],
) -> Result<MinCut, ResilienceError> {
    let n = topology.n();
    if n > MAX_ENUM_CELLS {
        return Err(ResilienceError::TooManyCells { n, max: MAX_ENUM_CELLS });
    }
    if capacities.len() != n || inflow.len() != n {
        return Err(DynamicsError::Dimension { expected: n, got: capacities.len().min(inflow.len()) }.into());
    }
    finite_capacities(capacities)?;
    let total_inflow: f64 = inflow.iter().sum();
    // Exact values are recomputed in index order for candidates; the Gray
    // code running sum only drives pruning.
    let slack = 1e-9 * (1.0 + capacities.iter().sum::<f64>() + total_inflow);
    let mut best: Option<(f64, u64, u64)> = None;
    let mut running = 0.0;
    let mut mask = 0u64;
    for k in 1u64..(1u64 << n) {
        let flip = k.trailing_zeros() as usize;
        mask ^= 1 << flip;
        if mask & (1 << flip) != 0 {
            running += capacities[flip];
        } else {
            running -= capacities[flip];
        }
        if let Some((incumbent, _, _)) = best {
            if running - total_inflow > incumbent + slack {
                continue;
            }
        }
        let trapped = topology.trapped_mask(mask);
        let value = (masked_sum(capacities, mask) - masked_sum(inflow, trapped)).max(0.0);
        let better = match best {
            None => true,
            Some((v, m, _)) => value < v || (value == v && (mask.count_ones(), mask) < (m.count_ones(), m)),
        };
        if better {
            best = Some((value, mask, trapped));
        }
    }
    let (value, mask, trapped) = best.expect("n >= 1 gives a nonempty subset");
    Ok(MinCut { value, cut: bits(mask), trapped: bits(trapped) })
}

/// Which margin formula produced a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginFormula {
    /// Min-cut residual capacity.
    MinCut,
    /// Minimum cell residual capacity under fixed routing.
    MinCell,
    /// Minimum out-neighborhood residual capacity under logit routing.
    OutNeighborhood,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoreticalMargin {
    pub value: f64,
    pub formula: MarginFormula,
    /// False when the value is only an upper bound on the margin.
    pub exact: bool,
    /// The minimizing cell, out-neighborhood, or cut.
    pub argmin: Vec<usize>,
    /// Equilibrium outflows used by the formula, if any.
    pub equilibrium_outflow: Option<Vec<f64>>,
    pub notes: Vec<String>,
}

fn require_line_digraph_acyclic(topology: &Topology) -> Result<(), ResilienceError> {
    if topology.line_digraph_properties().all() && !topology.has_cycle() {
        Ok(())
    } else {
        Err(ResilienceError::TopologyNotLineDigraphAcyclic)
    }
}

/// `min_i max(0, C_i − z*_i)` with `z* = (I − Rᵀ)⁻¹u`.
pub fn margin_fixed_routing(model: &Model) -> Result<TheoreticalMargin, ResilienceError> {
    let Policy::Constant(routing) = model.policy() else {
        return Err(ResilienceError::UnsupportedPolicy(model.policy().kind()));
    };
    require_line_digraph_acyclic(model.topology())?;
    let capacities = model.capacities();
    finite_capacities(&capacities)?;
    let z = solve_outflow(routing.matrix(), model.inflow())?;
    let mut best = (f64::INFINITY, 0);
    for (i, (&c, &flow)) in capacities.iter().zip(&z).enumerate() {
        if flow > c {
            return Err(ResilienceError::CapacityViolated { cell: i, flow, capacity: c });
        }
        let residual = (c - flow).max(0.0);
        if residual < best.0 {
            best = (residual, i);
        }
    }
    Ok(TheoreticalMargin {
        value: best.0,
        formula: MarginFormula::MinCell,
        exact: true,
        argmin: vec![best.1],
        equilibrium_outflow: Some(z),
        notes: Vec::new(),
    })
}

const NEIGHBORHOOD_NOTE: &str =
    "minimum taken over cells with nonempty out-neighborhoods; cells without one are excluded";

/// `min_i Σ_{j∈E_i} (C_j − z*_j)` over cells with nonempty out-neighborhoods,
/// where `z*` is the equilibrium outflow reached from zero, or `C` when the
/// unperturbed network is unstable.
pub fn margin_locally_responsive(model: &Model, detector: &DetectorConfig) -> Result<TheoreticalMargin, ResilienceError> {
    if !matches!(model.policy(), Policy::Logit(_)) {
        return Err(ResilienceError::UnsupportedPolicy(model.policy().kind()));
    }
    let topology = model.topology();
    require_line_digraph_acyclic(topology)?;
    let capacities = model.capacities();
    finite_capacities(&capacities)?;
    let (z, stable) = match equilibrium_from_zero(model, detector) {
        Ok(FromZero::Equilibrium(e)) => (e.z, true),
        Ok(FromZero::Unbounded { .. }) => (capacities.clone(), false),
        Err(AnalysisError::Inconclusive { residual, slope }) => {
            return Err(ResilienceError::Inconclusive { residual, slope })
        }
        Err(e) => return Err(e.into()),
    };
    let mut best: Option<(f64, usize)> = None;
    for i in 0..topology.n() {
        let hood = topology.out_neighbors(i);
        if hood.is_empty() {
            continue;
        }
        let residual: f64 = hood.iter().map(|&j| capacities[j] - z[j]).sum();
        if best.is_none_or(|(v, _)| residual < v) {
            best = Some((residual, i));
        }
    }
    let (value, cell) = best.ok_or(ResilienceError::NoOutNeighborhoods)?;
    let mut notes = vec![NEIGHBORHOOD_NOTE.to_string()];
    if !stable {
        notes.push("unperturbed network is unstable; equilibrium outflow taken as capacity".into());
    }
    Ok(TheoreticalMargin {
        value: value.max(0.0),
        formula: MarginFormula::OutNeighborhood,
        exact: true,
        argmin: topology.out_neighbors(cell).to_vec(),
        equilibrium_outflow: Some(z),
        notes,
    })
}

/// Min-cut residual capacity of the model, an upper bound on any margin.
pub fn upper_bound_min_cut(model: &Model) -> Result<MinCut, ResilienceError> {
    min_cut_residual_capacity(model.topology(), &model.capacities(), model.inflow())
}

const EMPTY_CUT_NOTE: &str = "cuts range over nonempty cell sets; the empty set would force the value to zero";

/// The formula matching the model's policy: cell residuals for fixed
/// routing, out-neighborhood residuals for logit routing, and the min-cut
/// residual capacity otherwise (exact with logit flow control, an upper
/// bound for the rest).
pub fn theoretical_margin(model: &Model, detector: &DetectorConfig) -> Result<TheoreticalMargin, ResilienceError> {
    match model.policy() {
        Policy::Constant(_) => margin_fixed_routing(model),
        Policy::Logit(_) => margin_locally_responsive(model, detector),
        policy => {
            let cut = upper_bound_min_cut(model)?;
            let exact = matches!(policy, Policy::LogitControl(_));
            let mut notes = vec![EMPTY_CUT_NOTE.to_string()];
            if !exact {
                notes.push(format!("{} models: min-cut residual capacity is only an upper bound", policy.kind()));
            }
            Ok(TheoreticalMargin {
                value: cut.value,
                formula: MarginFormula::MinCut,
                exact,
                argmin: cut.cut,
                equilibrium_outflow: None,
                notes,
            })
        }
    }
}

/// A one-parameter perturbation family whose member at `δ` has magnitude `δ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PerturbationFamily {
    /// Scales the demands of `cells` by the common factor
    /// `1 − δ / Σ_{cells} C_j`, which splits `δ` in proportion to capacity.
    DemandScaling { cells: Vec<usize> },
    /// Adds `δ · weights_i` to the inflow; weights sum to one and live on
    /// inflow cells.
    InflowIncrease { weights: Vec<f64> },
}

impl PerturbationFamily {
    fn validate(&self, model: &Model) -> Result<(), ResilienceError> {
        let n = model.n();
        match self {
            PerturbationFamily::DemandScaling { cells } => {
                if cells.is_empty() || cells.iter().any(|&i| i >= n) {
                    return Err(ResilienceError::InvalidPerturbation("demand cells must be valid and nonempty".into()));
                }
            }
            PerturbationFamily::InflowIncrease { weights } => {
                let sum: f64 = weights.iter().sum();
                if weights.len() != n || weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                    return Err(ResilienceError::InvalidPerturbation(
                        "inflow weights must be nonnegative and sum to one".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Largest magnitude the family can reach, capped at `Σ C`.
    fn reach(&self, capacities: &[f64]) -> f64 {
        let total: f64 = capacities.iter().sum();
        match self {
            PerturbationFamily::DemandScaling { cells } => {
                let sum: f64 = cells.iter().map(|&i| capacities[i]).sum();
                // Scaling to exactly zero leaves the admissible class.
                sum.min(total) * (1.0 - 1e-9)
            }
            PerturbationFamily::InflowIncrease { .. } => total,
        }
    }

    pub fn at(&self, model: &Model, delta: f64) -> Perturbation {
        let mut p = Perturbation::none(model.n());
        match self {
            PerturbationFamily::DemandScaling { cells } => {
                let capacities = model.capacities();
                let sum: f64 = cells.iter().map(|&i| capacities[i]).sum();
                for &i in cells {
                    p.demand_scale[i] = 1.0 - delta / sum;
                }
            }
            PerturbationFamily::InflowIncrease { weights } => {
                for (d, w) in p.inflow_delta.iter_mut().zip(weights) {
                    *d = delta * w;
                }
            }
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalConfig {
    /// Largest accepted bracket width.
    pub tol: f64,
    pub detector: DetectorConfig,
    /// `None` scales the cells of the theoretical argmin.
    pub family: Option<PerturbationFamily>,
}

impl Default for EmpiricalConfig {
    fn default() -> Self {
        Self { tol: 5e-3, detector: DetectorConfig::default(), family: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOutcome {
    Stable,
    Unstable,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub delta: f64,
    pub outcome: ProbeOutcome,
    /// Verdicts from the empty network and, if it exists, from the
    /// unperturbed equilibrium.
    pub from_zero: ProbeOutcome,
    pub from_equilibrium: Option<ProbeOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginReport {
    pub theoretical: TheoreticalMargin,
    pub upper_bound: MinCut,
    /// `[ν_lo, ν_hi]`: largest stable and smallest unstable probe.
    pub bracket: [f64; 2],
    pub tol: f64,
    pub family: PerturbationFamily,
    /// The perturbation at `ν_hi`.
    pub witness: Perturbation,
    pub probes: Vec<Probe>,
    pub notes: Vec<String>,
}

fn outcome(v: &Verdict) -> ProbeOutcome {
    match v {
        Verdict::Stable { .. } => ProbeOutcome::Stable,
        Verdict::Unstable { .. } => ProbeOutcome::Unstable,
        Verdict::Inconclusive { .. } => ProbeOutcome::Inconclusive,
    }
}

struct Prober<'a> {
    model: &'a Model,
    family: &'a PerturbationFamily,
    detector: &'a DetectorConfig,
    nominal: Option<Vec<f64>>,
    log: Vec<Probe>,
}

impl Prober<'_> {
    fn probe(&mut self, delta: f64) -> Result<ProbeOutcome, ResilienceError> {
        let perturbed = self.family.at(self.model, delta).apply(self.model)?;
        let from_zero = outcome(&detect_instability(&perturbed, &vec![0.0; self.model.n()], self.detector)?);
        let from_equilibrium = match (&self.nominal, from_zero) {
            (Some(x), ProbeOutcome::Stable | ProbeOutcome::Inconclusive) => {
                Some(outcome(&detect_instability(&perturbed, x, self.detector)?))
            }
            _ => None,
        };
        let combined = match (from_zero, from_equilibrium) {
            (ProbeOutcome::Unstable, _) | (_, Some(ProbeOutcome::Unstable)) => ProbeOutcome::Unstable,
            (ProbeOutcome::Stable, None | Some(ProbeOutcome::Stable)) => ProbeOutcome::Stable,
            _ => ProbeOutcome::Inconclusive,
        };
        log::debug!("probe delta={delta} -> {combined:?}");
        self.log.push(Probe { delta, outcome: combined, from_zero, from_equilibrium });
        Ok(combined)
    }
}

/// Brackets the smallest destabilizing magnitude within the family by
/// bisection. Each probe runs the detector on the perturbed network from
/// the empty state and from the unperturbed equilibrium.
pub fn empirical_margin(model: &Model, config: &EmpiricalConfig) -> Result<MarginReport, ResilienceError> {
    if !(config.tol > 0.0) {
        return Err(DynamicsError::InvalidConfig(format!("tolerance must be positive, got {}", config.tol)).into());
    }
    let capacities = model.capacities();
    finite_capacities(&capacities)?;
    let upper_bound = upper_bound_min_cut(model)?;
    let theoretical = theoretical_margin(model, &config.detector)?;
    let family = match &config.family {
        Some(f) => f.clone(),
        None => PerturbationFamily::DemandScaling { cells: theoretical.argmin.clone() },
    };
    family.validate(model)?;
    let mut notes = theoretical.notes.clone();

    let nominal_verdict = detect_instability(model, &vec![0.0; model.n()], &config.detector)?;
    let nominal = match &nominal_verdict {
        Verdict::Stable { limit, .. } => Some(limit.clone()),
        _ => None,
    };
    let mut prober = Prober { model, family: &family, detector: &config.detector, nominal, log: Vec::new() };

    let (mut lo, mut hi) = (0.0, family.reach(&capacities));
    match prober.probe(0.0)? {
        ProbeOutcome::Stable => {}
        ProbeOutcome::Unstable => {
            notes.push("unperturbed network is already unstable".into());
            let probes = prober.log;
            return Ok(MarginReport {
                theoretical,
                upper_bound,
                bracket: [0.0, 0.0],
                tol: config.tol,
                witness: Perturbation::none(model.n()),
                family,
                probes,
                notes,
            });
        }
        ProbeOutcome::Inconclusive => return Err(ResilienceError::InconclusiveProbe { delta: 0.0, lo, hi }),
    }
    match prober.probe(hi)? {
        ProbeOutcome::Unstable => {}
        ProbeOutcome::Stable => return Err(ResilienceError::NoInstabilityFound { upper: hi }),
        ProbeOutcome::Inconclusive => return Err(ResilienceError::InconclusiveProbe { delta: hi, lo, hi }),
    }
    while hi - lo > config.tol {
        let mid = 0.5 * (lo + hi);
        match prober.probe(mid)? {
            ProbeOutcome::Stable => lo = mid,
            ProbeOutcome::Unstable => hi = mid,
            ProbeOutcome::Inconclusive => {
                // Near the threshold growth is slow; step away on both sides.
                let quarter = 0.25 * (hi - lo);
                let (low_q, high_q) = (lo + quarter, hi - quarter);
                match prober.probe(high_q)? {
                    ProbeOutcome::Stable => lo = high_q,
                    ProbeOutcome::Unstable => match prober.probe(low_q)? {
                        ProbeOutcome::Stable => {
                            lo = low_q;
                            hi = high_q;
                        }
                        ProbeOutcome::Unstable => hi = low_q,
                        ProbeOutcome::Inconclusive => hi = high_q,
                    },
                    ProbeOutcome::Inconclusive => match prober.probe(low_q)? {
                        ProbeOutcome::Stable => lo = low_q,
                        ProbeOutcome::Unstable => hi = low_q,
                        ProbeOutcome::Inconclusive => {
                            return Err(ResilienceError::InconclusiveProbe { delta: mid, lo, hi })
                        }
                    },
                }
            }
        }
    }
    let probes = prober.log;
    let witness = family.at(model, hi);
    Ok(MarginReport {
        theoretical,
        upper_bound,
        bracket: [lo, hi],
        tol: config.tol,
        family,
        witness,
        probes,
        notes,
    })
}

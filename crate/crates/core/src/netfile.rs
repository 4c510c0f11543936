//! JSON network files. Cells are numbered from 1 in files and from 0 in the
//! library; conversion happens here and nowhere else.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, Model};
use crate::flowfuncs::{Demand, Supply};
use crate::policies::{ConvexCost, ConvexCostSet, LogitParams, Policy, PolicyError, RoutingMatrix};
use crate::topology::{Topology, TopologyError};

#[derive(Debug, Error)]
pub enum NetfileError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("schema: {0}")]
    Schema(String),
    /// Indices already converted to file numbering.
    #[error(transparent)]
    Topology(TopologyError),
    /// Indices already converted to file numbering.
    #[error(transparent)]
    Policy(PolicyError),
    #[error(transparent)]
    Model(#[from] DynamicsError),
}

impl NetfileError {
    /// True for unreadable or malformed input, as opposed to a well-formed
    /// file describing an invalid network.
    pub fn is_format_error(&self) -> bool {
        matches!(self, NetfileError::Io { .. } | NetfileError::Parse { .. } | NetfileError::Schema(_))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            NetfileError::Io { .. } => "io",
            NetfileError::Parse { .. } => "parse",
            NetfileError::Schema(_) => "schema",
            NetfileError::Topology(_) => "topology",
            NetfileError::Policy(_) => "policy",
            NetfileError::Model(_) => "model",
        }
    }
}

fn topology_to_file(e: TopologyError) -> TopologyError {
    match e {
        TopologyError::IndexOutOfRange { index, n } => TopologyError::IndexOutOfRange { index: index + 1, n },
        TopologyError::SelfLoop(i) => TopologyError::SelfLoop(i + 1),
        TopologyError::DuplicateAdjacency(i, j) => TopologyError::DuplicateAdjacency(i + 1, j + 1),
        TopologyError::DuplicateLink(i, j) => TopologyError::DuplicateLink(i + 1, j + 1),
        other => other,
    }
}

fn policy_to_file(e: PolicyError) -> PolicyError {
    match e {
        PolicyError::NotSubstochastic { row, detail } => PolicyError::NotSubstochastic { row: row + 1, detail },
        PolicyError::SupportViolation(i, j) => PolicyError::SupportViolation(i + 1, j + 1),
        PolicyError::NonSinkRowSumNotOne { row, sum } => PolicyError::NonSinkRowSumNotOne { row: row + 1, sum },
        PolicyError::NegativeState { cell, value } => PolicyError::NegativeState { cell: cell + 1, value },
        PolicyError::NegativeInput { cell, value } => PolicyError::NegativeInput { cell: cell + 1, value },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<Demand>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supply: Option<Supply>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkCost {
    pub link: [usize; 2],
    pub cost: ConvexCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutflowCost {
    pub cell: usize,
    pub cost: ConvexCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub links: Vec<LinkCost>,
    pub outflow: Vec<OutflowCost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    /// Routing entries as `[i, j, R_ij]`.
    Constant { routing: Vec<(usize, usize, f64)> },
    Logit { alpha: Vec<f64>, beta: Vec<f64> },
    LogitControl { alpha: Vec<f64>, beta: Vec<f64> },
    Fifo { routing: Vec<(usize, usize, f64)> },
    #[serde(rename = "nonfifo")]
    NonFifo { routing: Vec<(usize, usize, f64)> },
    DualAscent { costs: CostSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub adjacency: Vec<[usize; 2]>,
    #[serde(default)]
    pub inflow_cells: Vec<usize>,
    pub outflow_cells: Vec<usize>,
    /// Constant external inflow keyed by cell id; missing cells get zero.
    #[serde(default)]
    pub inflow: BTreeMap<String, f64>,
    pub policy: PolicySpec,
}

/// File id to library index; ids outside `1..=n` are left for the topology
/// check to reject.
fn index(id: usize) -> usize {
    id.wrapping_sub(1)
}

fn routing_entries(entries: &[(usize, usize, f64)]) -> Vec<(usize, usize, f64)> {
    entries.iter().map(|&(i, j, r)| (index(i), index(j), r)).collect()
}

fn file_routing(r: &RoutingMatrix) -> Vec<(usize, usize, f64)> {
    r.entries().into_iter().map(|(i, j, v)| (i + 1, j + 1, v)).collect()
}

impl NetworkFile {
    pub fn parse(text: &str) -> Result<Self, NetfileError> {
        serde_json::from_str(text).map_err(|e| NetfileError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, NetfileError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NetfileError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network files always serialize")
    }

    pub fn topology(&self) -> Result<Topology, NetfileError> {
        let n = self.cells.len();
        let mut ids: Vec<usize> = self.cells.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids != (1..=n).collect::<Vec<_>>() {
            return Err(NetfileError::Schema(format!("cell ids must be exactly 1..={n}")));
        }
        let adjacency: Vec<(usize, usize)> = self.adjacency.iter().map(|&[i, j]| (index(i), index(j))).collect();
        let inflow: Vec<usize> = self.inflow_cells.iter().map(|&i| index(i)).collect();
        let outflow: Vec<usize> = self.outflow_cells.iter().map(|&i| index(i)).collect();
        Topology::new(n, &adjacency, &inflow, &outflow).map_err(|e| NetfileError::Topology(topology_to_file(e)))
    }

    pub fn to_model(&self) -> Result<Model, NetfileError> {
        let topology = self.topology()?;
        let n = topology.n();
        let mut cells: Vec<&CellSpec> = self.cells.iter().collect();
        cells.sort_by_key(|c| c.id);

        let demands: Vec<Demand> = cells.iter().filter_map(|c| c.demand).collect();
        if !demands.is_empty() && demands.len() != n {
            return Err(NetfileError::Schema("either every cell or no cell has a demand".into()));
        }
        let supplies: Vec<Supply> = cells.iter().filter_map(|c| c.supply).collect();
        let supplies = match supplies.len() {
            0 => None,
            len if len == n => Some(supplies),
            _ => return Err(NetfileError::Schema("either every cell or no cell has a supply".into())),
        };

        let mut inflow = vec![0.0; n];
        for (key, &value) in &self.inflow {
            let id: usize = key
                .parse()
                .ok()
                .filter(|id| (1..=n).contains(id))
                .ok_or_else(|| NetfileError::Schema(format!("inflow key {key:?} is not a cell id")))?;
            inflow[id - 1] = value;
        }

        let routing = |entries: &[(usize, usize, f64)]| {
            RoutingMatrix::from_entries(&topology, &routing_entries(entries))
                .map_err(|e| NetfileError::Policy(policy_to_file(e)))
        };
        let logit = |alpha: &[f64], beta: &[f64]| {
            LogitParams::new(alpha.to_vec(), beta.to_vec()).map_err(|e| NetfileError::Policy(policy_to_file(e)))
        };
        let policy = match &self.policy {
            PolicySpec::Constant { routing: r } => Policy::Constant(routing(r)?),
            PolicySpec::Fifo { routing: r } => Policy::Fifo(routing(r)?),
            PolicySpec::NonFifo { routing: r } => Policy::NonFifo(routing(r)?),
            PolicySpec::Logit { alpha, beta } => Policy::Logit(logit(alpha, beta)?),
            PolicySpec::LogitControl { alpha, beta } => Policy::LogitControl(logit(alpha, beta)?),
            PolicySpec::DualAscent { costs } => {
                let links = costs.links.iter().map(|l| ((index(l.link[0]), index(l.link[1])), l.cost)).collect();
                let outflow = costs.outflow.iter().map(|o| (index(o.cell), o.cost)).collect();
                Policy::DualAscent(
                    ConvexCostSet::new(&topology, links, outflow).map_err(|e| NetfileError::Policy(policy_to_file(e)))?,
                )
            }
        };
        Ok(Model::new(topology, demands, supplies, policy, inflow)?)
    }

    pub fn from_model(model: &Model) -> Self {
        let t = model.topology();
        let n = t.n();
        let cells = (0..n)
            .map(|i| CellSpec {
                id: i + 1,
                demand: model.demands().get(i).copied(),
                supply: model.supplies().map(|s| s[i]),
            })
            .collect();
        let policy = match model.policy() {
            Policy::Constant(r) => PolicySpec::Constant { routing: file_routing(r) },
            Policy::Fifo(r) => PolicySpec::Fifo { routing: file_routing(r) },
            Policy::NonFifo(r) => PolicySpec::NonFifo { routing: file_routing(r) },
            Policy::Logit(p) => PolicySpec::Logit { alpha: p.alpha.clone(), beta: p.beta.clone() },
            Policy::LogitControl(p) => PolicySpec::LogitControl { alpha: p.alpha.clone(), beta: p.beta.clone() },
            Policy::DualAscent(c) => PolicySpec::DualAscent {
                costs: CostSpec {
                    links: c.links().iter().map(|(&(i, j), &cost)| LinkCost { link: [i + 1, j + 1], cost }).collect(),
                    outflow: c.outflow().iter().map(|(&k, &cost)| OutflowCost { cell: k + 1, cost }).collect(),
                },
            },
        };
        let inflow = t.inflow_cells().into_iter().map(|i| ((i + 1).to_string(), model.inflow()[i])).collect();
        Self {
            cells,
            adjacency: t.adjacency().iter().map(|&(i, j)| [i + 1, j + 1]).collect(),
            inflow_cells: t.inflow_cells().into_iter().map(|i| i + 1).collect(),
            outflow_cells: t.outflow_cells().into_iter().map(|i| i + 1).collect(),
            inflow,
            policy,
        }
    }
}

/// Reads and validates a network file.
pub fn load_model(path: &Path) -> Result<Model, NetfileError> {
    NetworkFile::load(path)?.to_model()
}

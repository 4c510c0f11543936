//! Network topology: cells, adjacency pairs, and the cells where mass may
//! enter from or leave to the external environment.
//!
//! Cells are dense `0..n` indices. The external environment is implicit and
//! never a cell.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("cell count must be positive")]
    Empty,
    #[error("index {index} out of range for {n} cells")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("self-loop on cell {0}")]
    SelfLoop(usize),
    #[error("duplicate adjacency pair ({0}, {1})")]
    DuplicateAdjacency(usize, usize),
    #[error("digraph has no links")]
    EmptyDigraph,
    #[error("duplicate link ({0}, {1})")]
    DuplicateLink(usize, usize),
}

/// The 4-tuple (cells, adjacency, inflow cells, outflow cells).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    adjacency: Vec<(usize, usize)>,
    out_neighbors: Vec<Vec<usize>>,
    in_neighbors: Vec<Vec<usize>>,
    inflow: Vec<bool>,
    outflow: Vec<bool>,
}

impl Topology {
    pub fn new(
        n: usize,
        adjacency: &[(usize, usize)],
        inflow_cells: &[usize],
        outflow_cells: &[usize],
    ) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        let check = |index: usize| {
            if index < n {
                Ok(())
            } else {
                Err(TopologyError::IndexOutOfRange { index, n })
            }
        };
        let mut seen = BTreeSet::new();
        let mut out_neighbors = vec![Vec::new(); n];
        let mut in_neighbors = vec![Vec::new(); n];
        for &(i, j) in adjacency {
            check(i)?;
            check(j)?;
            if i == j {
                return Err(TopologyError::SelfLoop(i));
            }
            if !seen.insert((i, j)) {
                return Err(TopologyError::DuplicateAdjacency(i, j));
            }
            out_neighbors[i].push(j);
            in_neighbors[j].push(i);
        }
        for list in out_neighbors.iter_mut().chain(in_neighbors.iter_mut()) {
            list.sort_unstable();
        }
        let mut inflow = vec![false; n];
        for &r in inflow_cells {
            check(r)?;
            inflow[r] = true;
        }
        let mut outflow = vec![false; n];
        for &s in outflow_cells {
            check(s)?;
            outflow[s] = true;
        }
        Ok(Self {
            n,
            adjacency: seen.into_iter().collect(),
            out_neighbors,
            in_neighbors,
            inflow,
            outflow,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Adjacency pairs in lexicographic order.
    pub fn adjacency(&self) -> &[(usize, usize)] {
        &self.adjacency
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.out_neighbors[i].binary_search(&j).is_ok()
    }

    /// Out-neighborhood of cell `i`, sorted.
    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out_neighbors[i]
    }

    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_neighbors[i]
    }

    pub fn is_inflow_cell(&self, i: usize) -> bool {
        self.inflow[i]
    }

    pub fn is_outflow_cell(&self, i: usize) -> bool {
        self.outflow[i]
    }

    pub fn inflow_cells(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.inflow[i]).collect()
    }

    pub fn outflow_cells(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.outflow[i]).collect()
    }

    pub fn outflow_connectivity(&self) -> Connectivity {
        Connectivity::from_cells(self.reach(&self.outflow, &self.in_neighbors, &vec![false; self.n]))
    }

    pub fn inflow_connectivity(&self) -> Connectivity {
        Connectivity::from_cells(self.reach(&self.inflow, &self.out_neighbors, &vec![false; self.n]))
    }

    /// Cells in `removed` together with every cell that can no longer reach
    /// an outflow cell once `removed` is deleted from the topology.
    pub fn trapped_set(&self, removed: &[usize]) -> BTreeSet<usize> {
        let mut mask = vec![false; self.n];
        for &j in removed {
            mask[j] = true;
        }
        let connected = self.reach(&self.outflow, &self.in_neighbors, &mask);
        (0..self.n).filter(|&i| mask[i] || !connected[i]).collect()
    }

    /// Bitmask form of [`Topology::trapped_set`] for `n <= 64`.
    pub fn trapped_mask(&self, removed: u64) -> u64 {
        debug_assert!(self.n <= 64);
        let mut connected: u64 = 0;
        let mut stack = Vec::with_capacity(self.n);
        for s in 0..self.n {
            if self.outflow[s] && removed & (1 << s) == 0 {
                connected |= 1 << s;
                stack.push(s);
            }
        }
        while let Some(k) = stack.pop() {
            for &h in &self.in_neighbors[k] {
                let bit = 1u64 << h;
                if removed & bit == 0 && connected & bit == 0 {
                    connected |= bit;
                    stack.push(h);
                }
            }
        }
        let all = if self.n == 64 { u64::MAX } else { (1u64 << self.n) - 1 };
        all & !connected
    }

    /// Breadth-first search from `seeds` along `edges`, skipping `removed`.
    fn reach(&self, seeds: &[bool], edges: &[Vec<usize>], removed: &[bool]) -> Vec<bool> {
        let mut hit = vec![false; self.n];
        let mut queue = VecDeque::new();
        for i in 0..self.n {
            if seeds[i] && !removed[i] {
                hit[i] = true;
                queue.push_back(i);
            }
        }
        while let Some(k) = queue.pop_front() {
            for &h in &edges[k] {
                if !removed[h] && !hit[h] {
                    hit[h] = true;
                    queue.push_back(h);
                }
            }
        }
        hit
    }

    /// True when the cell graph has a directed cycle.
    pub fn has_cycle(&self) -> bool {
        // Kahn's algorithm: a cycle remains iff some cell never reaches indegree 0.
        let mut indegree: Vec<usize> = self.in_neighbors.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..self.n).filter(|&i| indegree[i] == 0).collect();
        let mut visited = 0;
        while let Some(i) = queue.pop_front() {
            visited += 1;
            for &j in &self.out_neighbors[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    queue.push_back(j);
                }
            }
        }
        visited < self.n
    }

    /// Structural properties every line-digraph topology has: inflow cells are
    /// sources, outflow cells are sinks, and any two out-neighborhoods either
    /// coincide or are disjoint. Necessary but not sufficient.
    pub fn line_digraph_properties(&self) -> LineDigraphProperties {
        let sources = (0..self.n)
            .filter(|&r| self.inflow[r])
            .all(|r| self.in_neighbors[r].is_empty());
        let sinks = (0..self.n)
            .filter(|&s| self.outflow[s])
            .all(|s| self.out_neighbors[s].is_empty());
        let mut neighborhoods = true;
        'outer: for i in 0..self.n {
            for j in i + 1..self.n {
                let (a, b) = (&self.out_neighbors[i], &self.out_neighbors[j]);
                if a != b && a.iter().any(|k| b.binary_search(k).is_ok()) {
                    neighborhoods = false;
                    break 'outer;
                }
            }
        }
        LineDigraphProperties {
            inflow_cells_are_sources: sources,
            outflow_cells_are_sinks: sinks,
            neighborhoods_coincide_or_disjoint: neighborhoods,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LineDigraphProperties {
    pub inflow_cells_are_sources: bool,
    pub outflow_cells_are_sinks: bool,
    pub neighborhoods_coincide_or_disjoint: bool,
}

impl LineDigraphProperties {
    pub fn all(&self) -> bool {
        self.inflow_cells_are_sources
            && self.outflow_cells_are_sinks
            && self.neighborhoods_coincide_or_disjoint
    }
}

/// Per-cell reachability flags plus their conjunction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Connectivity {
    pub cells: Vec<bool>,
    pub all: bool,
}

impl Connectivity {
    fn from_cells(cells: Vec<bool>) -> Self {
        let all = cells.iter().all(|&c| c);
        Self { cells, all }
    }
}

/// Road-style digraph whose links are cells. Node 0 is the external
/// environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeLinkDigraph {
    pub node_count: usize,
    pub links: Vec<(usize, usize)>,
}

impl NodeLinkDigraph {
    pub fn new(node_count: usize, links: Vec<(usize, usize)>) -> Result<Self, TopologyError> {
        if links.is_empty() {
            return Err(TopologyError::EmptyDigraph);
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &links {
            for v in [a, b] {
                if v >= node_count {
                    return Err(TopologyError::IndexOutOfRange { index: v, n: node_count });
                }
            }
            if a == b {
                return Err(TopologyError::SelfLoop(a));
            }
            if !seen.insert((a, b)) {
                return Err(TopologyError::DuplicateLink(a, b));
            }
        }
        Ok(Self { node_count, links })
    }

    /// Line-digraph topology: cell `i` is link `i`; `(i, j)` is adjacent when
    /// link `i` ends at the junction where link `j` starts and that junction
    /// is not the environment.
    pub fn line_digraph(&self) -> Result<Topology, TopologyError> {
        if self.links.is_empty() {
            return Err(TopologyError::EmptyDigraph);
        }
        let mut adjacency = Vec::new();
        for (i, &(_, head)) in self.links.iter().enumerate() {
            if head == 0 {
                continue;
            }
            for (j, &(tail, _)) in self.links.iter().enumerate() {
                if tail == head && i != j {
                    adjacency.push((i, j));
                }
            }
        }
        let inflow: Vec<usize> = (0..self.links.len()).filter(|&i| self.links[i].0 == 0).collect();
        let outflow: Vec<usize> = (0..self.links.len()).filter(|&i| self.links[i].1 == 0).collect();
        Topology::new(self.links.len(), &adjacency, &inflow, &outflow)
    }
}

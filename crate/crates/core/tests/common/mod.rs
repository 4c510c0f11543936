#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flownet::flowfuncs::{Demand, Supply};
use flownet::policies::{ConvexCost, ConvexCostSet, LogitParams, Policy, RoutingMatrix};
use flownet::{load_model, Model, Topology};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn network(name: &str) -> Model {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../networks").join(format!("{name}.json"));
    load_model(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Cells reaching an outflow cell, by repeated relaxation rather than graph
/// search.
pub fn reaches_outflow(n: usize, links: &[(usize, usize)], outflow: &[bool], removed: &[bool]) -> Vec<bool> {
    let mut reach: Vec<bool> = (0..n).map(|i| outflow[i] && !removed[i]).collect();
    loop {
        let mut changed = false;
        for &(i, j) in links {
            if reach[j] && !reach[i] && !removed[i] {
                reach[i] = true;
                changed = true;
            }
        }
        if !changed {
            return reach;
        }
    }
}

/// A random topology where every cell without external outflow has an
/// out-neighbor and, when `connected`, every cell reaches an outflow cell.
pub struct RandomTopology {
    pub n: usize,
    pub links: Vec<(usize, usize)>,
    pub inflow: Vec<usize>,
    pub outflow: Vec<usize>,
}

impl RandomTopology {
    pub fn generate(rng: &mut ChaCha8Rng, n: usize, density: f64, connected: bool) -> Self {
        loop {
            let mut links = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i != j && rng.random_bool(density) {
                        links.push((i, j));
                    }
                }
            }
            let mut is_out: Vec<bool> = (0..n).map(|_| rng.random_bool(0.35)).collect();
            if !connected && n >= 3 {
                // Trap the last `k` cells: a ring with no way out.
                let k = rng.random_range(2..n);
                let first = n - k;
                links.retain(|&(a, _)| a < first);
                for i in first..n {
                    links.push((i, if i + 1 == n { first } else { i + 1 }));
                    is_out[i] = false;
                }
            }
            for i in 0..n {
                if !links.iter().any(|&(a, _)| a == i) {
                    is_out[i] = true;
                }
            }
            if !is_out.iter().any(|&b| b) {
                continue;
            }
            let reach = reaches_outflow(n, &links, &is_out, &vec![false; n]);
            if connected != reach.iter().all(|&r| r) {
                continue;
            }
            let mut inflow: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.4)).collect();
            if inflow.is_empty() {
                inflow.push(rng.random_range(0..n));
            }
            let outflow = (0..n).filter(|&i| is_out[i]).collect();
            return Self { n, links, inflow, outflow };
        }
    }

    pub fn topology(&self) -> Topology {
        Topology::new(self.n, &self.links, &self.inflow, &self.outflow).unwrap()
    }

    /// Routing matrix on the links; outflow cells keep a deficit of at least
    /// `min_deficit`, the others route everything.
    pub fn routing(&self, rng: &mut ChaCha8Rng, min_deficit: f64) -> DMatrix<f64> {
        let mut r = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let outs: Vec<usize> = self.links.iter().filter(|&&(a, _)| a == i).map(|&(_, b)| b).collect();
            if outs.is_empty() {
                continue;
            }
            let weights: Vec<f64> = outs.iter().map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = weights.iter().sum();
            let keep = if self.outflow.contains(&i) { rng.random_range(0.0..1.0 - min_deficit) } else { 1.0 };
            for (&j, w) in outs.iter().zip(&weights) {
                r[(i, j)] = keep * w / total;
            }
            if !self.outflow.contains(&i) {
                // Exact unit row sum.
                let sum: f64 = r.row(i).sum();
                let last = *outs.last().unwrap();
                r[(i, last)] += 1.0 - sum;
            }
        }
        r
    }

    pub fn inflow_vector(&self, rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
        let mut u = vec![0.0; self.n];
        for &i in &self.inflow {
            u[i] = rng.random_range(0.1..1.0) * scale;
        }
        u
    }
}

pub fn random_n(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub fn random_affine(rng: &mut ChaCha8Rng, max_n: usize) -> Model {
    let n = random_n(rng, 1, max_n);
    let t = RandomTopology::generate(rng, n, 0.3, true);
    let r = t.routing(rng, 0.05);
    let topology = t.topology();
    let demands = (0..n).map(|_| Demand::linear(rng.random_range(0.2..3.0)).unwrap()).collect();
    let routing = RoutingMatrix::new(&topology, r).unwrap();
    let u = t.inflow_vector(rng, 2.0);
    Model::new(topology, demands, None, Policy::Constant(routing), u).unwrap()
}

pub fn random_bounded_demand(rng: &mut ChaCha8Rng, capacity: f64) -> Demand {
    if rng.random_bool(0.5) {
        Demand::saturating_exp(capacity, rng.random_range(0.5..2.0)).unwrap()
    } else {
        Demand::piecewise_linear_cap(rng.random_range(0.5..2.0), capacity).unwrap()
    }
}

pub fn random_logit(rng: &mut ChaCha8Rng, max_n: usize, control: bool) -> Model {
    let n = random_n(rng, 1, max_n);
    let t = RandomTopology::generate(rng, n, 0.3, true);
    let topology = t.topology();
    let demands = (0..n)
        .map(|_| {
            let capacity = rng.random_range(0.5..4.0);
            random_bounded_demand(rng, capacity)
        })
        .collect();
    let alpha = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let beta = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
    let params = LogitParams::new(alpha, beta).unwrap();
    let policy = if control { Policy::LogitControl(params) } else { Policy::Logit(params) };
    let u = t.inflow_vector(rng, 1.5);
    Model::new(topology, demands, None, policy, u).unwrap()
}

pub fn random_ctm(rng: &mut ChaCha8Rng, max_n: usize, fifo: bool) -> Model {
    let n = random_n(rng, 1, max_n);
    let t = RandomTopology::generate(rng, n, 0.3, true);
    let r = t.routing(rng, 0.05);
    let topology = t.topology();
    let demands = (0..n)
        .map(|_| {
            let capacity = rng.random_range(0.5..4.0);
            random_bounded_demand(rng, capacity)
        })
        .collect();
    let supplies = (0..n)
        .map(|_| Supply::affine_decreasing(rng.random_range(2.0..6.0), rng.random_range(0.3..1.5)).unwrap())
        .collect();
    let routing = RoutingMatrix::new(&topology, r).unwrap();
    let policy = if fifo { Policy::Fifo(routing) } else { Policy::NonFifo(routing) };
    let u = t.inflow_vector(rng, 1.0);
    Model::new(topology, demands, Some(supplies), policy, u).unwrap()
}

/// A topology that is both inflow- and outflow-connected.
pub fn random_two_way_connected(rng: &mut ChaCha8Rng, max_n: usize) -> Topology {
    loop {
        let n = random_n(rng, 1, max_n);
        let t = RandomTopology::generate(rng, n, 0.35, true).topology();
        if t.inflow_connectivity().all {
            return t;
        }
    }
}

pub fn random_costs(rng: &mut ChaCha8Rng, t: &Topology) -> ConvexCostSet {
    let links = t.adjacency().iter().map(|&e| (e, ConvexCost::quadratic(rng.random_range(0.5..2.0)).unwrap())).collect();
    let outflow =
        t.outflow_cells().into_iter().map(|k| (k, ConvexCost::quadratic(rng.random_range(0.5..2.0)).unwrap())).collect();
    ConvexCostSet::new(t, links, outflow).unwrap()
}

pub fn random_dual_ascent(rng: &mut ChaCha8Rng, max_n: usize) -> Model {
    let t = random_two_way_connected(rng, max_n);
    let costs = random_costs(rng, &t);
    let mut u = vec![0.0; t.n()];
    for i in t.inflow_cells() {
        u[i] = rng.random_range(0.1..2.0);
    }
    Model::new(t, Vec::new(), None, Policy::DualAscent(costs), u).unwrap()
}

pub fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;

use common::*;
use flownet::analysis::{
    check_monotone, dual_ascent_solve, equilibrium_closed_form, equilibrium_from_zero, from_zero_max_decrease,
    is_hurwitz, l1_audit, order_audit, solve_convex_flow_oracle, FromZero, MonotoneConfig, OracleConfig,
};
use flownet::dynamics::{DetectorConfig, Stepper};
use flownet::policies::{Policy, RoutingMatrix};
use flownet::resilience::{
    empirical_margin, margin_fixed_routing, margin_locally_responsive, min_cut_residual_capacity,
    upper_bound_min_cut, EmpiricalConfig,
};
use flownet::{Model, Topology};

const DT: f64 = 1e-2;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn with_failures(summary: String, failures: &[String]) -> Outcome {
    if failures.is_empty() {
        outcome(true, summary)
    } else {
        outcome(false, format!("{summary}; {}", failures.join("; ")))
    }
}

fn random_state(rng: &mut rand_chacha::ChaCha8Rng, n: usize, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..hi)).collect()
}

fn l1_nonexpansive() -> Outcome {
    let mut rng = rng(1);
    let mut models: Vec<Model> = (0..50).map(|_| random_affine(&mut rng, 8)).collect();
    for k in 0..20 {
        models.push(random_logit(&mut rng, 8, k % 2 == 1));
    }
    let mut worst_ratio = f64::NEG_INFINITY;
    let mut failures = 0;
    for m in &models {
        for _ in 0..20 {
            let x0 = random_state(&mut rng, m.n(), 5.0);
            let y0 = random_state(&mut rng, m.n(), 5.0);
            let report = l1_audit(m, &x0, &y0, 10.0, DT).unwrap();
            worst_ratio = worst_ratio.max(report.max_increase / report.bound);
            if !report.passed {
                failures += 1;
            }
        }
    }
    outcome(
        failures == 0,
        format!("{} models x 20 pairs, {failures} failures, worst increase/bound {worst_ratio:.3e}", models.len()),
    )
}

/// `z = u + Rᵀz` by fixed-point iteration.
fn outflow_by_iteration(r: &DMatrix<f64>, u: &[f64]) -> Vec<f64> {
    let n = u.len();
    let mut z = u.to_vec();
    for _ in 0..100_000 {
        let next: Vec<f64> = (0..n).map(|j| u[j] + (0..n).map(|i| r[(i, j)] * z[i]).sum::<f64>()).collect();
        let done = sup_diff(&next, &z) < 1e-15 * (1.0 + z.iter().cloned().fold(0.0, f64::max));
        z = next;
        if done {
            break;
        }
    }
    z
}

fn equilibrium_agreement() -> Outcome {
    let mut rng = rng(2);
    let detector = DetectorConfig { horizon: 1e4, ..DetectorConfig::default() };
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for k in 0..30 {
        let n = random_n(&mut rng, 1, 10);
        let t = RandomTopology::generate(&mut rng, n, 0.3, true);
        let r = t.routing(&mut rng, 0.05);
        let u = t.inflow_vector(&mut rng, 2.0);
        let z = outflow_by_iteration(&r, &u);
        let topology = t.topology();
        let routing = RoutingMatrix::new(&topology, r).unwrap();
        let demands = z
            .iter()
            .map(|&zi| {
                let capacity = zi * rng.random_range(1.5..3.0) + 0.5;
                random_bounded_demand(&mut rng, capacity)
            })
            .collect();
        let m = Model::new(topology, demands, None, Policy::Constant(routing.clone()), u.clone()).unwrap();
        let closed = equilibrium_closed_form(&m).unwrap();
        match equilibrium_from_zero(&m, &detector) {
            Ok(FromZero::Equilibrium(e)) => {
                let d = sup_diff(&closed.x, &e.x);
                worst = worst.max(d);
                if d > 1e-5 {
                    failures.push(format!("model {k}: gap {d:.2e}"));
                }
            }
            other => failures.push(format!("model {k}: {other:?}")),
        }

        // Overload the busiest cell.
        let (busiest, &zmax) = z.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        let mut demands = m.demands().to_vec();
        demands[busiest] = random_bounded_demand(&mut rng, 0.7 * zmax);
        let overloaded = m.with_demands(demands).unwrap();
        match equilibrium_from_zero(&overloaded, &detector) {
            Ok(FromZero::Unbounded { .. }) => {}
            other => failures.push(format!("overloaded model {k}: {other:?}")),
        }
    }
    with_failures(format!("30 stable models (worst gap {worst:.2e}) + 30 overloaded models"), &failures)
}

fn monotonicity() -> Outcome {
    let mut rng = rng(3);
    let mut lines = Vec::new();
    let mut pass = true;
    let mut run = |label: &str, models: Vec<Model>, free_flow_only: bool| {
        let mut total = 0;
        let mut passed = 0;
        for m in &models {
            let cfg = MonotoneConfig { free_flow_only, ..MonotoneConfig::default() };
            let report = check_monotone(m, &cfg).unwrap();
            total += report.samples;
            passed += report.passed;
            if report.pass_rate != 1.0 || report.samples == 0 {
                pass = false;
            }
            if !free_flow_only && report.samples != 200 {
                pass = false;
            }
        }
        lines.push(format!("{label} {passed}/{total}"));
    };
    run("affine", (0..5).map(|_| random_affine(&mut rng, 6)).collect(), false);
    let mut logit: Vec<Model> = (0..5).map(|_| random_logit(&mut rng, 6, false)).collect();
    logit.extend(["line_logit", "chain_logit", "diverge_logit"].map(network));
    run("logit", logit, false);
    let mut control: Vec<Model> = (0..5).map(|_| random_logit(&mut rng, 6, true)).collect();
    control.push(network("diverge_logit_control"));
    run("logit+control", control, false);
    let mut nonfifo: Vec<Model> = (0..5).map(|_| random_ctm(&mut rng, 6, false)).collect();
    nonfifo.push(network("ctm_diverge_nonfifo"));
    run("non-FIFO", nonfifo, false);
    let mut dual: Vec<Model> = (0..5).map(|_| random_dual_ascent(&mut rng, 6)).collect();
    dual.push(network("dual_ascent_triangle"));
    run("dual-ascent", dual, false);
    let mut fifo: Vec<Model> = (0..5).map(|_| random_ctm(&mut rng, 6, true)).collect();
    fifo.push(network("ctm_diverge_fifo"));
    run("FIFO (free-flow)", fifo, true);
    outcome(pass, lines.join(", "))
}

const MONOTONE_NETWORKS: [&str; 11] = [
    "line_fixed",
    "line_logit",
    "chain_fixed",
    "chain_logit",
    "diverge_fixed",
    "diverge_logit",
    "diverge_logit_control",
    "ctm_diverge_nonfifo",
    "two_cell_saturating",
    "two_cell_mincut",
    "dual_ascent_triangle",
];

fn order_preservation() -> Outcome {
    let mut rng = rng(4);
    let mut worst_order = f64::NEG_INFINITY;
    let mut worst_decrease = 0.0f64;
    for name in MONOTONE_NETWORKS {
        let m = network(name);
        let n = m.n();
        for _ in 0..5 {
            let x0 = random_state(&mut rng, n, 3.0);
            let upper: Vec<f64> = x0.iter().map(|x| x + rng.random_range(0.0..1.0)).collect();
            let mut upper_inflow = m.inflow().to_vec();
            for i in m.topology().inflow_cells() {
                upper_inflow[i] += rng.random_range(0.0..0.5);
            }
            let report = order_audit(&m, &x0, &upper, &upper_inflow, 50.0, DT).unwrap();
            worst_order = worst_order.max(report.max_violation);
        }
        worst_decrease = worst_decrease.max(from_zero_max_decrease(&m, 200.0, DT).unwrap());
    }
    outcome(
        worst_order <= 1e-6 && worst_decrease <= 1e-9,
        format!(
            "{} networks: worst order violation {worst_order:.2e}, worst decrease from zero {worst_decrease:.2e}",
            MONOTONE_NETWORKS.len()
        ),
    )
}

fn dual_ascent_vs_oracle() -> Outcome {
    let mut rng = rng(5);
    let mut worst_flow = 0.0f64;
    let mut worst_mass = 0.0f64;
    let mut failures = Vec::new();
    for k in 0..20 {
        let t = random_two_way_connected(&mut rng, 8);
        let costs = random_costs(&mut rng, &t);
        let mut u = vec![0.0; t.n()];
        for i in t.inflow_cells() {
            u[i] = rng.random_range(0.1..2.0);
        }
        let dual = match dual_ascent_solve(&t, &costs, &u, 1e5, DT, 1e-9) {
            Ok(d) => d,
            Err(e) => {
                failures.push(format!("model {k}: dual ascent {e}"));
                continue;
            }
        };
        let oracle = match solve_convex_flow_oracle(&t, &costs, &u, &OracleConfig::default()) {
            Ok(o) => o,
            Err(e) => {
                failures.push(format!("model {k}: oracle {e}"));
                continue;
            }
        };
        let gap = (&dual.flows.f - &oracle.flows.f).amax().max(sup_diff(&dual.flows.w, &oracle.flows.w));
        let mass = sup_diff(&dual.flows.balance(&u), &vec![0.0; t.n()]);
        worst_flow = worst_flow.max(gap);
        worst_mass = worst_mass.max(mass);
    }
    let summary = format!("20 networks: worst flow gap {worst_flow:.2e}, worst mass residual {worst_mass:.2e}");
    let o = with_failures(summary, &failures);
    outcome(o.pass && worst_flow <= 1e-4 && worst_mass <= 1e-6, o.detail)
}

/// Brute force: each nonempty subset, trapped set by relaxation.
fn brute_force_min_cut(n: usize, links: &[(usize, usize)], outflow: &[usize], c: &[f64], u: &[f64]) -> f64 {
    let is_out: Vec<bool> = (0..n).map(|i| outflow.contains(&i)).collect();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << n) {
        let removed: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
        let reach = reaches_outflow(n, links, &is_out, &removed);
        let cut: f64 = (0..n).filter(|&i| removed[i]).map(|i| c[i]).sum();
        let trapped: f64 = (0..n).filter(|&i| removed[i] || !reach[i]).map(|i| u[i]).sum();
        best = best.min((cut - trapped).max(0.0));
    }
    best
}

fn all_small_topologies(n: usize) -> Vec<(Vec<(usize, usize)>, Vec<usize>, Vec<usize>)> {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    let mut out = Vec::new();
    for link_mask in 0u32..(1 << pairs.len()) {
        let links: Vec<_> = pairs.iter().enumerate().filter(|(k, _)| link_mask & (1 << k) != 0).map(|(_, &p)| p).collect();
        for in_mask in 0u32..(1 << n) {
            for out_mask in 1u32..(1 << n) {
                let inflow = (0..n).filter(|&i| in_mask & (1 << i) != 0).collect();
                let outflow = (0..n).filter(|&i| out_mask & (1 << i) != 0).collect();
                out.push((links.clone(), inflow, outflow));
            }
        }
    }
    out
}

fn min_cut_and_margins() -> (Outcome, Outcome, Outcome, Outcome) {
    // (a) enumeration against brute force.
    let mut rng = rng(6);
    let mut cases = Vec::new();
    for n in 1..=3 {
        cases.extend(all_small_topologies(n).into_iter().map(|c| (n, c)));
    }
    for _ in 0..300 {
        let n = random_n(&mut rng, 4, 10);
        let density = rng.random_range(0.1..0.5);
        let connected = rng.random_bool(0.7);
        let t = RandomTopology::generate(&mut rng, n, density, connected);
        cases.push((n, (t.links, t.inflow, t.outflow)));
    }
    let mut mismatches = 0;
    for (n, (links, inflow, outflow)) in &cases {
        let t = Topology::new(*n, links, inflow, outflow).unwrap();
        let c: Vec<f64> = (0..*n).map(|_| rng.random_range(0.1..5.0)).collect();
        let mut u = vec![0.0; *n];
        for &i in inflow {
            u[i] = rng.random_range(0.0..3.0);
        }
        let fast = min_cut_residual_capacity(&t, &c, &u).unwrap().value;
        let slow = brute_force_min_cut(*n, links, outflow, &c, &u);
        if (fast - slow).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    let a = outcome(mismatches == 0, format!("{} topologies (all with n <= 3, random up to 10), {mismatches} mismatches", cases.len()));

    // (b) and (c): formula margins inside empirical brackets and below the cut bound.
    // The logit formula reads z* off a simulated equilibrium; a tight
    // residual keeps that error far below the comparison slack.
    let detector = DetectorConfig { eps_eq: 1e-11, ..DetectorConfig::default() };
    let config = EmpiricalConfig { tol: 1e-2, ..EmpiricalConfig::default() };
    let mut b_pass = true;
    let mut c_pass = true;
    let mut b_lines = Vec::new();
    let mut c_lines = Vec::new();
    for base in ["line", "chain", "diverge"] {
        for variant in ["fixed", "logit"] {
            let name = format!("{base}_{variant}");
            let m = network(&name);
            let formula = if variant == "fixed" {
                margin_fixed_routing(&m).unwrap().value
            } else {
                margin_locally_responsive(&m, &detector).unwrap().value
            };
            let bound = upper_bound_min_cut(&m).unwrap().value;
            match empirical_margin(&m, &config) {
                Ok(report) => {
                    let [lo, hi] = report.bracket;
                    let ok = hi - lo <= 1e-2 && lo - 1e-6 <= formula && formula <= hi + 1e-6;
                    b_pass &= ok;
                    b_lines.push(format!("{name} {formula:.4} in [{lo:.4}, {hi:.4}]"));
                }
                Err(e) => {
                    b_pass = false;
                    b_lines.push(format!("{name}: {e}"));
                }
            }
            c_pass &= formula <= bound + 1e-9;
            c_lines.push(format!("{name} {formula:.10} <= {bound:.10}"));
        }
    }

    // (d) logit with flow control reaches the min-cut bound. Saturated
    // downstream cells relax slowly here, so the detector gets a longer
    // horizon.
    let m = network("diverge_logit_control");
    let bound = upper_bound_min_cut(&m).unwrap().value;
    let config = EmpiricalConfig {
        tol: 1e-2,
        detector: DetectorConfig { horizon: 5e3, ..DetectorConfig::default() },
        family: None,
    };
    let d = match empirical_margin(&m, &config) {
        Ok(report) => {
            let [lo, hi] = report.bracket;
            c_pass &= report.theoretical.value <= bound + 1e-9;
            outcome(
                hi - lo <= 1e-2 && lo - 1e-2 <= bound && bound <= hi + 1e-2,
                format!("min-cut {bound:.4}, bracket [{lo:.4}, {hi:.4}]"),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    };
    (a, outcome(b_pass, b_lines.join(", ")), outcome(c_pass, c_lines.join(", ")), d)
}

fn free_flow_equivalence() -> Outcome {
    let mut rng = rng(7);
    let mut worst = 0.0f64;
    let mut left_free_flow = false;
    for name in ["ctm_diverge_fifo", "ctm_diverge_nonfifo"] {
        let ctm = network(name);
        let (Policy::Fifo(r) | Policy::NonFifo(r)) = ctm.policy() else { unreachable!() };
        let fixed =
            Model::new(ctm.topology().clone(), ctm.demands().to_vec(), None, Policy::Constant(r.clone()), ctm.inflow().to_vec())
                .unwrap();
        let mut starts = vec![vec![0.0; ctm.n()]];
        starts.extend((0..3).map(|_| random_state(&mut rng, ctm.n(), 3.0)));
        for x0 in starts {
            let mut a = Stepper::new(&ctm, &x0, DT).unwrap();
            let mut b = Stepper::new(&fixed, &x0, DT).unwrap();
            for _ in 0..10_000 {
                left_free_flow |= !ctm.free_flow_check(a.state()).unwrap();
                a.step().unwrap();
                b.step().unwrap();
                worst = worst.max(sup_diff(a.state(), b.state()));
            }
        }
    }
    outcome(
        !left_free_flow && worst <= 1e-6,
        format!("2 networks x 4 starts over t <= 100: max gap {worst:.2e}, stayed in free flow: {}", !left_free_flow),
    )
}

fn hurwitz_iff_outflow_connected() -> Outcome {
    let mut rng = rng(8);
    let mut mismatches = 0;
    let mut connected_count = 0;
    for k in 0..50 {
        let want_connected = k % 2 == 0;
        // Fewer than three cells cannot trap a cycle away from an outflow cell.
        let n = random_n(&mut rng, if want_connected { 1 } else { 3 }, 8);
        let t = RandomTopology::generate(&mut rng, n, 0.3, want_connected);
        let r = t.routing(&mut rng, 0.05);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
        let l = DMatrix::from_fn(n, n, |i, j| d[i] * (if i == j { 1.0 } else { 0.0 } - r[(i, j)]));
        let connected = t.topology().outflow_connectivity().all;
        connected_count += connected as usize;
        if is_hurwitz(&(-l.transpose()), 1e-9).unwrap() != connected {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("50 matrices ({connected_count} outflow-connected), {mismatches} mismatches"))
}

fn print_outcome(label: &str, o: &Outcome, seconds: f64) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {label}: {verdict} ({seconds:.1}s) {}", o.detail);
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, f64) {
    let start = Instant::now();
    let o = f();
    (o, start.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome, f64)> = Vec::new();
    let runs: [(&str, fn() -> Outcome); 5] = [
        ("1 l1 non-expansiveness", l1_nonexpansive),
        ("2 equilibrium agreement", equilibrium_agreement),
        ("3 monotonicity certificates", monotonicity),
        ("4 order preservation", order_preservation),
        ("5 dual ascent vs oracle", dual_ascent_vs_oracle),
    ];
    for (label, f) in runs {
        let (o, t) = timed(f);
        print_outcome(label, &o, t);
        results.push((label, o, t));
    }
    let start = Instant::now();
    let (a, b, c, d) = min_cut_and_margins();
    let t = start.elapsed().as_secs_f64();
    for (label, o) in [
        ("6a min-cut enumeration", a),
        ("6b margins in brackets", b),
        ("6c margins below min-cut", c),
        ("6d logit+control reaches min-cut", d),
    ] {
        print_outcome(label, &o, t);
        results.push((label, o, t));
    }
    for (label, f) in [("7 free-flow equivalence", free_flow_equivalence as fn() -> Outcome), ("8 Hurwitz iff outflow-connected", hurwitz_iff_outflow_connected)] {
        let (o, t) = timed(f);
        print_outcome(label, &o, t);
        results.push((label, o, t));
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}

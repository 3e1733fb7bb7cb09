//! Acceptance suite. Runs without the libtest harness: one PASS/FAIL line per
//! criterion, non-zero exit if any fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rkconsensus::baselines::{default_dual_step, dual_nag_run};
use rkconsensus::config::{BaselineConfig, H0Choice, Method};
use rkconsensus::dynamics::{kernel_sums, stack_states, MonolithicField};
use rkconsensus::experiment::{robust_fit, run_method, Instance, MethodParams, MethodRun, RunOptions, Scale};
use rkconsensus::graph::{build_graph, LaplacianGraph, Topology};
use rkconsensus::harness::{
    fit_log_log, read_metrics_csv, verified_reference, FitWindow, Metric, CSV_COLUMNS, REFERENCE_TOL,
};
use rkconsensus::integrator::{certify_order_on_growth, empirical_order, rk_step, tableau, FnField, TableauKind};
use rkconsensus::objectives::{kl_instance, regression_instance, DualFriendly, LocalObjective, ObjectiveSet};
use rkconsensus::oracle::{dual_gradient, dual_gradient_fd, gradient_difference_ratio, SqrtLaplacian};
use rkconsensus::simulator::{Simulation, KERNEL_SUM_TOL};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

const ORDERS: [u32; 3] = [1, 2, 4];

fn kind(s: u32) -> TableauKind {
    TableauKind::for_order(s).expect("supported order")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_topology(rng: &mut ChaCha8Rng, n: usize) -> Topology {
    match rng.gen_range(0..3) {
        0 => Topology::star(n),
        1 if n >= 3 => Topology::cycle(n),
        _ => Topology::erdos_renyi(n, 0.5, rng.gen()),
    }
}

fn random_objectives(rng: &mut ChaCha8Rng, n: usize, p: usize, kl: bool) -> ObjectiveSet {
    if kl {
        kl_instance(n, p, rng.gen()).unwrap()
    } else {
        regression_instance(n, p, p + 2, 0.05, rng.gen()).unwrap()
    }
}

/// Shared desk-scale runs, reused by criteria 3, 5 and 6.
struct DeskRuns {
    regression: Instance,
    heavy_ball: Vec<(u32, MethodRun)>,
    elapsed: Duration,
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let sizes = Scale::Desk.params();
        let graph = build_graph(&sizes.topologies()[2]).unwrap();
        let regression = Instance::new(graph, sizes.regression().unwrap()).unwrap();
        let heavy_ball = ORDERS
            .iter()
            .map(|&s| {
                let params = MethodParams {
                    method: Method::HeavyBallRk,
                    tableau: tableau(kind(s)),
                    iterations: sizes.order_sweep_iterations,
                    h0: H0Choice::Sweep,
                    baseline: BaselineConfig::default(),
                    opts: RunOptions::default(),
                };
                (s, run_method(&regression, &params).unwrap())
            })
            .collect();
        DeskRuns {
            regression,
            heavy_ball,
            elapsed: start.elapsed(),
        }
    })
}

/// Distributed simulator equals the monolithic RK step at every iteration.
fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0_f64;
    for case in 0..10 {
        let n = rng.gen_range(2..=16);
        let p = rng.gen_range(1..=4);
        let kl = case % 2 == 1;
        let s = ORDERS[case % 3];
        let graph = build_graph(&random_topology(&mut rng, n)).unwrap();
        let objs = random_objectives(&mut rng, n, p, kl);
        let iterations = 40;
        let h0 = objs.strong_convexity() / graph.lambda_max();
        let tab = tableau(kind(s));
        let mut sim = Simulation::new(&graph, &objs, tab.clone(), iterations, h0).unwrap();
        let field = MonolithicField::new(&graph, &objs);
        let mut mono = stack_states(sim.states()).unwrap();
        for k in 1..=iterations {
            sim.step().map_err(|e| format!("case {case}: {e}"))?;
            mono = rk_step(&tab, &field, &mono, sim.step_size()).map_err(|e| e.to_string())?;
            let dist = stack_states(sim.states()).unwrap();
            for (a, b) in dist.iter().zip(&mono) {
                let scale = a.abs().max(b.abs());
                if scale > 0.0 {
                    let rel = (a - b).abs() / scale;
                    worst = worst.max(rel);
                    ensure(rel <= 1e-12, || {
                        format!("case {case} (n={n}, p={p}, s={s}) iteration {k}: rel error {rel:e}")
                    })?;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "10 configs, max rel error {worst:e}, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

/// Conjugate oracle against hand gradients and, for KL with p = 2, a grid search.
fn criterion_2() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0_f64;
    for kl in [false, true] {
        for draw in 0..100 {
            let p = rng.gen_range(1..=6);
            let objs = random_objectives(&mut rng, 1, p, kl);
            let z: Vec<f64> = (0..p).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let f = objs.get(0);
            let mut x = vec![0.0; p];
            f.conjugate_argmax(&z, &mut x);
            let mut r: Vec<f64> = match f {
                LocalObjective::Quadratic(q) => {
                    let xv = nalgebra::DVector::from_column_slice(&x);
                    let g = q.h().transpose() * (q.h() * &xv - q.b()) * q.scale() + xv * q.ridge();
                    g.iter().zip(&z).map(|(gi, zi)| gi - zi).collect()
                }
                LocalObjective::Kl(k) => x
                    .iter()
                    .zip(k.q())
                    .zip(&z)
                    .map(|((xj, qj), zj)| (xj / qj).ln() + 1.0 - zj)
                    .collect(),
            };
            if kl {
                let mean = r.iter().sum::<f64>() / p as f64;
                r.iter_mut().for_each(|v| *v -= mean);
                let total: f64 = x.iter().sum();
                ensure((total - 1.0).abs() < 1e-12 && x.iter().all(|&v| v > 0.0), || {
                    format!("KL draw {draw}: x*(z) off the simplex")
                })?;
            }
            let res = norm(&r);
            let bound = 1e-8 * (1.0 + norm(&z));
            worst = worst.max(res / bound);
            ensure(res <= bound, || {
                format!(
                    "{} draw {draw}: residual {res:e} > {bound:e}",
                    if kl { "KL" } else { "quadratic" }
                )
            })?;
        }
    }
    let mut grid_worst = 0.0_f64;
    for draw in 0..20 {
        let objs = kl_instance(1, 2, 900 + draw).unwrap();
        let f = objs.get(0);
        let z = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let mut x = [0.0; 2];
        f.conjugate_argmax(&z, &mut x);
        let points = 10_000;
        let best = (0..points)
            .map(|j| j as f64 / (points - 1) as f64)
            .map(|t| (t, z[0] * t + z[1] * (1.0 - t) - f.evaluate(&[t, 1.0 - t])))
            .fold((0.0, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
        let err = (best.0 - x[0]).abs();
        grid_worst = grid_worst.max(err);
        ensure(err <= 1e-4, || format!("grid draw {draw}: |Δx| = {err:e}"))?;
    }
    ensure(start.elapsed() < Duration::from_secs(5), || {
        format!("took {:?}", start.elapsed())
    })?;
    Ok(format!(
        "200 KKT draws, worst residual/bound {worst:.2e}; KL grid max |Δx| {grid_worst:.1e}"
    ))
}

/// `Σ_i v̂_i` and `Σ_i ŷ_i` stay at rounding level in every run.
fn criterion_3() -> Check {
    let mut runs = 0;
    let mut worst = 0.0_f64;
    let graphs = [Topology::star(8), Topology::cycle(8), Topology::erdos_renyi(10, 0.4, 3)];
    for kl in [false, true] {
        for topo in &graphs {
            let graph = build_graph(topo).unwrap();
            let objs = if kl {
                kl_instance(graph.node_count(), 4, 5).unwrap()
            } else {
                regression_instance(graph.node_count(), 4, 6, 1e-2, 5).unwrap()
            };
            for s in ORDERS {
                for h0 in [objs.strong_convexity() / graph.lambda_max(), 1.0] {
                    let mut sim = Simulation::new(&graph, &objs, tableau(kind(s)), 500, h0)
                        .unwrap()
                        .check_kernel_sums(false);
                    let mut bad = None;
                    sim.run(|snap| {
                        let k = snap.kernel;
                        worst = worst.max(k.v_hat.max(k.y_hat) / (1.0 + k.y_norm));
                        if bad.is_none() && !k.within(KERNEL_SUM_TOL) {
                            bad = Some(snap.iteration);
                        }
                        Ok(())
                    })
                    .map_err(|e| format!("{} s={s} h0={h0}: {e}", topo.label()))?;
                    ensure(bad.is_none(), || {
                        format!("{} s={s} h0={h0}: violated at iteration {bad:?}", topo.label())
                    })?;
                    ensure(kernel_sums(sim.states()).within(KERNEL_SUM_TOL), || {
                        "final state".into()
                    })?;
                    runs += 1;
                }
            }
        }
    }
    for (s, run) in &desk_runs().heavy_ball {
        let r = run.max_kernel_ratio.expect("heavy-ball run");
        worst = worst.max(r);
        ensure(r <= KERNEL_SUM_TOL, || format!("desk sweep winner s={s}: ratio {r:e}"))?;
        runs += 1;
    }
    Ok(format!("{runs} runs, worst |sum|/(1+‖ŷ‖) = {worst:.2e}"))
}

/// One-step error ratios recover the nominal orders.
fn criterion_4() -> Check {
    // Harmonic oscillator, exact flow is a rotation.
    let osc = FnField::new(2, |z: &[f64], out: &mut [f64]| {
        out[0] = z[1];
        out[1] = -z[0];
    });
    let rotation = |z: &[f64], h: f64| vec![z[0] * h.cos() + z[1] * h.sin(), -z[0] * h.sin() + z[1] * h.cos()];
    let mut parts = Vec::new();
    for s in ORDERS {
        let tab = tableau(kind(s));
        let growth = certify_order_on_growth(&tab).map_err(|e| e.to_string())?;
        let rot = empirical_order(&tab, &osc, rotation, &[1.0, 0.0]).map_err(|e| e.to_string())?;
        for est in [growth, rot] {
            ensure((est - s as f64).abs() <= 0.2, || {
                format!("order {s}: estimate {est:.3}")
            })?;
        }
        parts.push(format!("s={s}: {growth:.3}/{rot:.3}"));
    }
    Ok(parts.join(", "))
}

/// Desk regression: consensus and suboptimality rates with a swept `h0`.
fn criterion_5() -> Check {
    let start = Instant::now();
    let desk = desk_runs();
    let runs = &desk.heavy_ball;
    let mut parts = Vec::new();
    let mut sub = std::collections::BTreeMap::new();
    for (s, run) in runs {
        let cq = robust_fit(&run.trace, Metric::ConsensusQuadratic).map_err(|e| e.to_string())?;
        let so = robust_fit(&run.trace, Metric::Suboptimality).map_err(|e| e.to_string())?;
        sub.insert(*s, so.slope);
        parts.push(format!(
            "s={s} h0={:.3} consensus {:.3} subopt {:.3}",
            run.h0.unwrap(),
            cq.slope,
            so.slope
        ));
        if *s >= 2 {
            let bound = -(2.0 * *s as f64) / (*s as f64 + 1.0) + 0.4;
            ensure(cq.slope <= bound, || {
                format!("s={s}: consensus slope {:.3} > {bound:.3}", cq.slope)
            })?;
        }
    }
    ensure(sub[&4] < sub[&1], || {
        format!("subopt slopes s=4 {:.3} not below s=1 {:.3}", sub[&4], sub[&1])
    })
    .map_err(|e| format!("{e}; {}", parts.join("; ")))?;
    // The sweeps may already have run for criterion 3; count them either way.
    let total = desk.elapsed + start.elapsed();
    ensure(total < Duration::from_secs(120), || format!("took {total:?}"))?;
    Ok(format!(
        "{} ({:.1}s with sweeps)",
        parts.join("; "),
        total.as_secs_f64()
    ))
}

/// Tail slope of a positive series, ignoring entries at or below `floor`.
fn series_slope(values: &[f64], floor: f64) -> std::result::Result<f64, String> {
    let end = values
        .iter()
        .position(|&v| v.is_nan() || v <= floor)
        .unwrap_or(values.len());
    let w = FitWindow::tail(end);
    let rounds: Vec<usize> = (w.start + 1..=w.end).collect();
    fit_log_log(&rounds, &values[w.start..w.end])
        .map(|(slope, _, _)| slope)
        .map_err(|e| e.to_string())
}

/// DualNAG beats dual GD on regression; heavy-ball RK4 beats DGD on KL at 5000 rounds.
fn criterion_6() -> Check {
    let start = Instant::now();
    let desk = desk_runs();
    let inst = &desk.regression;
    let h = default_dual_step(&inst.graph, &inst.objs);
    let eval = inst.evaluator(&RunOptions::default());
    let f_ref = inst.reference().value;
    let iterations = 2000;
    let nag = dual_nag_run(&inst.graph, &inst.objs, &eval, f_ref, h, iterations, true).map_err(|e| e.to_string())?;
    let gd = dual_nag_run(&inst.graph, &inst.objs, &eval, f_ref, h, iterations, false).map_err(|e| e.to_string())?;
    let floor = 1e-12 * (1.0 + f_ref.abs());
    let nag_slope = series_slope(&nag.dual_gaps, floor)?;
    let gd_slope = series_slope(&gd.dual_gaps, floor)?;
    let nag_last = *nag.dual_gaps.last().unwrap();
    let gd_last = *gd.dual_gaps.last().unwrap();
    ensure(nag_slope < gd_slope && nag_last < gd_last, || {
        format!("DualNAG slope {nag_slope:.3} final {nag_last:.2e} vs dual GD slope {gd_slope:.3} final {gd_last:.2e}")
    })?;

    let sizes = Scale::Desk.params();
    let kl =
        Instance::new(build_graph(&sizes.topologies()[2]).unwrap(), sizes.kl().unwrap()).map_err(|e| e.to_string())?;
    let budget = 5000;
    let params = |method, iterations, h0| MethodParams {
        method,
        tableau: tableau(TableauKind::ClassicalRk4),
        iterations,
        h0,
        baseline: BaselineConfig::default(),
        opts: RunOptions::default(),
    };
    let hb = run_method(&kl, &params(Method::HeavyBallRk, budget / 4, H0Choice::Sweep)).map_err(|e| e.to_string())?;
    let dgd = run_method(&kl, &params(Method::Dgd, budget, H0Choice::Default)).map_err(|e| e.to_string())?;
    let hb_last = hb.trace.last().unwrap();
    let dgd_last = dgd.trace.last().unwrap();
    ensure(hb_last.comm_rounds == budget && dgd_last.comm_rounds == budget, || {
        "round budgets differ".into()
    })?;
    ensure(hb_last.suboptimality < dgd_last.suboptimality, || {
        format!(
            "KL: RK4 {:.3e} vs DGD {:.3e}",
            hb_last.suboptimality, dgd_last.suboptimality
        )
    })?;
    ensure(start.elapsed() < Duration::from_secs(120), || {
        format!("took {:?}", start.elapsed())
    })?;
    Ok(format!(
        "dual gap slope NAG {nag_slope:.2} vs GD {gd_slope:.2}; KL at {budget} rounds RK4 {:.2e} vs DGD {:.2e}",
        hb_last.suboptimality, dgd_last.suboptimality
    ))
}

/// Finite-difference dual gradient and the dual smoothness bound.
fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst_fd = 0.0_f64;
    let mut worst_ratio = 0.0_f64;
    for point in 0..20 {
        let n = rng.gen_range(2..=8);
        let p = rng.gen_range(1..=4);
        let graph: LaplacianGraph = build_graph(&random_topology(&mut rng, n)).unwrap();
        let objs = random_objectives(&mut rng, n, p, point % 2 == 1);
        let sqrt_l = SqrtLaplacian::new(&graph).map_err(|e| e.to_string())?;
        let y: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = dual_gradient(&sqrt_l, &objs, &y).unwrap();
        let g_fd = dual_gradient_fd(&sqrt_l, &objs, &y, 1e-5).unwrap();
        let err = g.iter().zip(&g_fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_fd = worst_fd.max(err);
        ensure(err <= 1e-5, || format!("point {point}: FD error {err:e}"))?;
        let y2: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ratio = gradient_difference_ratio(&sqrt_l, &objs, &y, &y2).unwrap();
        let bound = graph.lambda_max() / objs.strong_convexity();
        worst_ratio = worst_ratio.max(ratio / bound);
        ensure(ratio <= bound * (1.0 + 1e-6), || {
            format!("point {point}: ratio {ratio} > {bound}")
        })?;
    }
    Ok(format!(
        "20 points, max FD error {worst_fd:.1e}, max ratio/bound {worst_ratio:.3}"
    ))
}

fn list_traces(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("fig1_") && n.ends_with(".csv"))
        .collect();
    names.sort();
    names
}

/// `reproduce fig1 --scale desk` is well formed, verified and deterministic.
fn criterion_8() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        let out = Command::new(env!("CARGO_BIN_EXE_rkconsensus"))
            .args(["reproduce", "fig1", "--scale", "desk", "--out"])
            .arg(d)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
        })?;
    }
    let names = list_traces(&dirs[0]);
    ensure(names.len() == 12, || format!("{} traces: {names:?}", names.len()))?;
    ensure(names == list_traces(&dirs[1]), || {
        "file sets differ between runs".into()
    })?;
    let header = CSV_COLUMNS.join(",");
    for name in &names {
        let a = std::fs::read(dirs[0].join(name)).unwrap();
        let b = std::fs::read(dirs[1].join(name)).unwrap();
        ensure(a == b, || format!("{name} differs between runs"))?;
        let text = String::from_utf8(a).map_err(|e| e.to_string())?;
        ensure(text.lines().next() == Some(header.as_str()), || {
            format!("{name}: bad header")
        })?;
        let rows = read_metrics_csv(&dirs[0].join(name)).map_err(|e| e.to_string())?;
        ensure(!rows.is_empty(), || format!("{name}: empty"))?;
        let finite = rows.iter().all(|r| {
            [
                r.suboptimality,
                r.consensus_l_norm,
                r.consensus_quadratic,
                r.dist_to_optimum_sq,
            ]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        });
        ensure(finite, || format!("{name}: non-finite or negative metric"))?;
        ensure(rows.windows(2).all(|w| w[1].comm_rounds > w[0].comm_rounds), || {
            format!("{name}: comm_rounds not increasing")
        })?;
    }
    let rates = dirs[0].join("rates_fig1.csv");
    ensure(
        std::fs::read(&rates).ok() == std::fs::read(dirs[1].join("rates_fig1.csv")).ok(),
        || "rate summaries differ".into(),
    )?;
    let sizes = Scale::Desk.params();
    let check = verified_reference(&sizes.regression().unwrap()).map_err(|e| e.to_string())?;
    ensure(check.max_abs_diff <= REFERENCE_TOL, || {
        format!("reference diff {:e}", check.max_abs_diff)
    })?;
    Ok(format!(
        "12 traces byte-identical across reruns, reference agreement {:.1e}",
        check.max_abs_diff
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("network equivalence", criterion_1),
        ("conjugate oracle", criterion_2),
        ("kernel invariant", criterion_3),
        ("integrator order", criterion_4),
        ("desk regression rates", criterion_5),
        ("baseline comparison", criterion_6),
        ("dual gradient and smoothness", criterion_7),
        ("figure reproduction", criterion_8),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} acceptance criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} acceptance criteria passed", criteria.len());
}

//! Command-line interface.
//!
//! Exit codes: 0 success, 1 failed verification, 2 configuration error,
//! 3 divergence, 4 I/O error.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::config::{ExperimentConfig, H0Choice, Method};
use crate::dynamics::{stack_states, MonolithicField};
use crate::experiment::{reproduce, robust_fit, run_method, Figure, Instance, MethodParams, Scale};
use crate::graph::{build_graph, LaplacianGraph, Topology};
use crate::harness::{write_metrics_csv, Metric};
use crate::integrator::{certify_order_on_growth, rk_step, tableau, TableauKind};
use crate::objectives::{kl_instance, regression_instance, ObjectiveSet};
use crate::simulator::{step_size, Simulation};
use crate::Error;

pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "rkconsensus",
    version,
    about = "Distributed optimization by Runge-Kutta discretization of a dual heavy-ball ODE"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment from a TOML config.
    Run {
        config: PathBuf,
        /// Validate the config and print the resolved step size without running.
        #[arg(long)]
        dry_run: bool,
        /// Override the experiment seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the trace bundle behind one figure.
    Reproduce {
        figure: FigureArg,
        #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
        scale: ScaleArg,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Run the fast invariant suite.
    Verify {
        /// Corrupt one component to confirm the suite catches it.
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FigureArg {
    Fig1,
    Fig2,
    Fig3,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Perturb the RK4 weights.
    Tableau,
    /// Drop one half of an edge from a Laplacian row.
    Laplacian,
}

/// Exit code for an error raised while running an experiment.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::NonFiniteState { .. } => EXIT_DIVERGENCE,
        Error::Io { .. } | Error::Csv { .. } => EXIT_IO,
        Error::InvalidParameter(_)
        | Error::InvalidTopology(_)
        | Error::ConnectivityFailure { .. }
        | Error::SingularSystem(_)
        | Error::InvalidTableau(_)
        | Error::UnsupportedFamily(_)
        | Error::DimensionMismatch { .. } => EXIT_CONFIG,
        _ => EXIT_VERIFY,
    }
}

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run {
            config,
            dry_run,
            seed,
            out,
        } => cmd_run(&config, dry_run, seed, out),
        Command::Reproduce { figure, scale, out } => {
            let figure = match figure {
                FigureArg::Fig1 => Figure::Fig1,
                FigureArg::Fig2 => Figure::Fig2,
                FigureArg::Fig3 => Figure::Fig3,
            };
            let scale = match scale {
                ScaleArg::Desk => Scale::Desk,
                ScaleArg::Paper => Scale::Paper,
            };
            cmd_reproduce(figure, scale, &out)
        }
        Command::Verify { inject_fault } => cmd_verify(inject_fault),
    }
}

fn fail(err: &Error) -> i32 {
    eprintln!("error: {err}");
    exit_code(err)
}

pub fn cmd_run(config: &Path, dry_run: bool, seed: Option<u64>, out: Option<PathBuf>) -> i32 {
    let mut cfg = match ExperimentConfig::load(config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let base_dir = config.parent().unwrap_or(Path::new("."));
    let params = match MethodParams::from_config(&cfg) {
        Ok(p) => p,
        Err(e) => return fail(&e),
    };
    let inst = match Instance::from_config(&cfg, base_dir) {
        Ok(inst) => inst,
        Err(e) => return fail(&e),
    };
    let s = params.tableau.order;
    if dry_run {
        println!(
            "config ok: {} on {} (n = {}, p = {}), method {}",
            label_experiment(&cfg),
            cfg.topology().map(|t| t.label()).unwrap_or("?"),
            inst.graph.node_count(),
            inst.objs.dimension(),
            cfg.method.label()
        );
        if cfg.method == Method::HeavyBallRk {
            match params.h0 {
                H0Choice::Fixed(h0) => print_step(h0, cfg.iterations, s),
                H0Choice::Default => print_step(inst.default_h0(), cfg.iterations, s),
                H0Choice::Sweep => println!(
                    "h0 swept over 10^(k/4), k = -8..=12; h = h0 * N^(-{s}/{}) with N = {}",
                    s + 1,
                    cfg.iterations
                ),
            }
        }
        return 0;
    }
    let run = match run_method(&inst, &params) {
        Ok(run) => run,
        Err(e) => return fail(&e),
    };
    let out = out.or_else(|| cfg.output.clone().map(|p| base_dir.join(p)));
    if let Some(path) = &out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            if let Err(source) = std::fs::create_dir_all(dir) {
                return fail(&Error::Io {
                    path: dir.display().to_string(),
                    source,
                });
            }
        }
        if let Err(e) = write_metrics_csv(path, &run.trace) {
            return fail(&e);
        }
        println!("wrote {} rows to {}", run.trace.len(), path.display());
    }
    if let Some(h0) = run.h0 {
        println!("h0 = {h0}, h = {}", run.step);
    } else {
        println!("step = {}", run.step);
    }
    if let Some(last) = run.trace.last() {
        println!(
            "final: iteration {} comm_rounds {} suboptimality {:e} (signed {:e}) consensus_L_norm {:e} consensus_quadratic {:e} dist_to_optimum_sq {:e}",
            last.iteration,
            last.comm_rounds,
            last.suboptimality,
            last.signed_gap,
            last.consensus_l_norm,
            last.consensus_quadratic,
            last.dist_to_optimum_sq
        );
    }
    for metric in Metric::ALL {
        match robust_fit(&run.trace, metric) {
            Ok(f) => println!(
                "rate {}: slope {:.4} over records [{}, {})",
                metric.name(),
                f.slope,
                f.window.start,
                f.window.end
            ),
            Err(e) => println!("rate {}: unavailable ({e})", metric.name()),
        }
    }
    if let Some(d) = &run.diagnostics {
        println!(
            "bounded-iterate ball: radius {:e}, farthest iterate {:e}, inside = {}",
            d.ball_radius, d.max_observed_distance, d.all_inside
        );
        if let Some(m) = d.min_simplex_entry {
            println!("smallest simplex coordinate over the run: {m:e}");
        }
    }
    0
}

fn label_experiment(cfg: &ExperimentConfig) -> &'static str {
    match cfg.experiment {
        crate::config::ExperimentKind::Regression => "regression",
        crate::config::ExperimentKind::KlBarycenter => "kl_barycenter",
        crate::config::ExperimentKind::Custom => "custom",
    }
}

fn print_step(h0: f64, iterations: usize, s: u32) {
    println!(
        "h0 = {h0}, h = h0 * N^(-{s}/{}) = {} with N = {iterations}",
        s + 1,
        step_size(h0, iterations, s)
    );
}

pub fn cmd_reproduce(figure: Figure, scale: Scale, out: &Path) -> i32 {
    let report = match reproduce(figure, scale, out) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    for (graph, diff) in &report.reference_checks {
        println!("reference optimum ({graph}): oracle agreement {diff:e}");
    }
    for t in &report.traces {
        let last = t.run.trace.last();
        print!("{} {} {}: {} rows", t.figure, t.graph, t.label, t.run.trace.len());
        if let Some(h0) = t.run.h0 {
            print!(", h0 = {h0}");
        }
        if let Some(r) = last {
            print!(
                ", final suboptimality {:e}, consensus_L_norm {:e}",
                r.suboptimality, r.consensus_l_norm
            );
        }
        println!();
        for (metric, fit) in &t.fits {
            if let Ok(f) = fit {
                println!("    slope {} = {:.3}", metric.name(), f.slope);
            }
        }
    }
    println!("rate summary: {}", report.rates_path.display());
    0
}

/// One named check of the verification suite.
struct Check {
    name: &'static str,
    outcome: Result<String, String>,
}

fn check_conjugate_kkt(objs: &ObjectiveSet, rng: &mut ChaCha20Rng, draws: usize) -> Result<String, String> {
    let p = objs.dimension();
    let mut worst = 0.0_f64;
    for _ in 0..draws {
        let i = rng.gen_range(0..objs.len());
        let z: Vec<f64> = (0..p).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = objs.get(i).kkt_residual(&z) / (1.0 + zn);
        worst = worst.max(r);
    }
    if worst <= 1e-8 {
        Ok(format!("worst scaled residual {worst:.2e}"))
    } else {
        Err(format!("conjugate KKT residual {worst:e} exceeds 1e-8"))
    }
}

fn check_equivalence(
    graph: &LaplacianGraph,
    objs: &ObjectiveSet,
    kind: TableauKind,
    h0: f64,
) -> Result<String, String> {
    let tab = tableau(kind);
    let n = 40;
    let mut sim = Simulation::new(graph, objs, tab.clone(), n, h0).map_err(|e| e.to_string())?;
    let field = MonolithicField::new(graph, objs);
    let h = sim.step_size();
    let mut mono = stack_states(sim.states()).map_err(|e| e.to_string())?;
    let mut worst = 0.0_f64;
    let mut kernel_worst = 0.0_f64;
    sim.run(|snap| {
        mono = rk_step(&tab, &field, &mono, h)?;
        let dist = stack_states(snap.states)?;
        for (a, b) in dist.iter().zip(&mono) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
        let k = snap.kernel;
        kernel_worst = kernel_worst.max(k.v_hat.max(k.y_hat) / (1.0 + k.y_norm));
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    if worst > 1e-12 {
        return Err(format!("distributed and monolithic trajectories differ by {worst:e}"));
    }
    if kernel_worst > 1e-9 {
        return Err(format!("kernel-sum invariant violated: {kernel_worst:e}"));
    }
    Ok(format!("max relative gap {worst:.1e}, kernel sums {kernel_worst:.1e}"))
}

pub fn cmd_verify(fault: Option<Fault>) -> i32 {
    let started = Instant::now();
    let mut checks = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(2024);

    for kind in [TableauKind::Euler1, TableauKind::Midpoint2, TableauKind::ClassicalRk4] {
        let mut tab = tableau(kind);
        if fault == Some(Fault::Tableau) && kind == TableauKind::ClassicalRk4 {
            tab = tab.with_weights_unchecked(vec![0.2, 0.3, 1.0 / 3.0, 1.0 / 6.0]);
        }
        let outcome = match certify_order_on_growth(&tab) {
            Ok(order) if (order - tab.order as f64).abs() <= 0.2 => {
                Ok(format!("{}: empirical order {order:.3}", tab.name))
            }
            Ok(order) => Err(format!(
                "order certification failed for {}: empirical order {order:.3}, declared {}",
                tab.name, tab.order
            )),
            Err(e) => Err(format!("order certification failed for {}: {e}", tab.name)),
        };
        checks.push(Check {
            name: "integrator order certification",
            outcome,
        });
    }

    let topologies = [Topology::star(6), Topology::cycle(7), Topology::erdos_renyi(8, 0.4, 5)];
    let mut graphs = Vec::new();
    for topo in &topologies {
        match build_graph(topo) {
            Ok(g) => graphs.push(g),
            Err(e) => checks.push(Check {
                name: "Laplacian invariants",
                outcome: Err(e.to_string()),
            }),
        }
    }
    if fault == Some(Fault::Laplacian) {
        if let Some(g) = graphs.first() {
            let mut rows: Vec<Vec<usize>> = (0..g.node_count()).map(|i| g.neighbors(i).to_vec()).collect();
            rows[1].clear();
            graphs[0] = LaplacianGraph::from_raw_parts_unchecked(rows);
        }
    }
    for g in &graphs {
        checks.push(Check {
            name: "Laplacian invariants",
            outcome: g
                .check_invariants()
                .map(|_| format!("n = {}, λ_max = {:.4}", g.node_count(), g.lambda_max()))
                .map_err(|e| e.to_string()),
        });
    }

    let quad = regression_instance(8, 3, 4, 1e-2, 3);
    let kl = kl_instance(8, 4, 4);
    match (&quad, &kl) {
        (Ok(quad), Ok(kl)) => {
            checks.push(Check {
                name: "conjugate KKT (quadratic)",
                outcome: check_conjugate_kkt(quad, &mut rng, 100),
            });
            checks.push(Check {
                name: "conjugate KKT (KL)",
                outcome: check_conjugate_kkt(kl, &mut rng, 100),
            });
            if graphs.iter().all(|g| g.check_invariants().is_ok()) {
                if let Some(er) = graphs.get(2) {
                    for (objs, h0) in [(quad, 0.05), (kl, 1.0)] {
                        for kind in [TableauKind::Euler1, TableauKind::Midpoint2, TableauKind::ClassicalRk4] {
                            checks.push(Check {
                                name: "distributed/monolithic equivalence and kernel sums",
                                outcome: check_equivalence(er, objs, kind, h0),
                            });
                        }
                    }
                }
            }
        }
        _ => checks.push(Check {
            name: "instance construction",
            outcome: Err("could not build verification instances".into()),
        }),
    }

    let mut failed = 0;
    for c in &checks {
        match &c.outcome {
            Ok(msg) => println!("ok   {}: {msg}", c.name),
            Err(msg) => {
                failed += 1;
                println!("FAIL {}: {msg}", c.name);
            }
        }
    }
    println!(
        "{} checks, {failed} failed, {:.2} s",
        checks.len(),
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        0
    } else {
        EXIT_VERIFY
    }
}

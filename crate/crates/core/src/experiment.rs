//! Experiment runner shared by the CLI and the test suites: instance construction,
//! method dispatch, `h0` sweeps and the figure reproduction matrix.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::baselines::{
    cgd_run, default_cgd_step, default_dgd_step, default_dual_step, dgd_run, dual_nag_run, DgdParams,
};
use crate::config::{BaselineConfig, ExperimentConfig, H0Choice, Method};
use crate::graph::{build_graph, LaplacianGraph, Topology};
use crate::harness::{
    fit_rate, fit_rate_in, h0_grid, pre_floor_window, sweep_h0, theory_diagnostics, verified_reference,
    write_metrics_csv, Metric, MetricsEvaluator, MetricsRecord, RateFit, ReferenceCheck, ReferenceOptimum, ReportStyle,
    TheoryDiagnostics,
};
use crate::integrator::{tableau, ButcherTableau, TableauKind};
use crate::objectives::{kl_instance, regression_instance, Family, ObjectiveSet};
use crate::simulator::Simulation;
use crate::{Error, Result};

/// Metric minimized by the `h0` sweep.
pub const SWEEP_METRIC: Metric = Metric::ConsensusQuadratic;

/// Graph, objectives and a verified reference optimum.
pub struct Instance {
    pub graph: LaplacianGraph,
    pub objs: ObjectiveSet,
    pub check: ReferenceCheck,
}

impl Instance {
    /// Fails unless the closed-form optimum agrees with the iterative oracle.
    pub fn new(graph: LaplacianGraph, objs: ObjectiveSet) -> Result<Self> {
        if graph.node_count() != objs.len() {
            return Err(Error::DimensionMismatch {
                expected: graph.node_count(),
                got: objs.len(),
            });
        }
        let check = verified_reference(&objs)?;
        Ok(Instance { graph, objs, check })
    }

    pub fn from_config(cfg: &ExperimentConfig, base_dir: &Path) -> Result<Self> {
        let graph = build_graph(&cfg.topology()?)?;
        Instance::new(graph, cfg.objectives(base_dir)?)
    }

    pub fn reference(&self) -> &ReferenceOptimum {
        &self.check.reference
    }

    pub fn evaluator(&self, opts: &RunOptions) -> MetricsEvaluator<'_> {
        MetricsEvaluator::new(&self.graph, &self.objs, self.reference())
            .style(opts.style)
            .wall_clock(opts.wall_clock)
    }

    /// `μ / (4·λ_max(L))`, the inverse of four times the dual smoothness constant.
    pub fn default_h0(&self) -> f64 {
        self.objs.strong_convexity() / (4.0 * self.graph.lambda_max())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub style: ReportStyle,
    pub wall_clock: bool,
    pub parallel: bool,
}

#[derive(Debug, Clone)]
pub struct HeavyBallRun {
    pub trace: Vec<MetricsRecord>,
    pub h0: f64,
    pub h: f64,
    pub diagnostics: TheoryDiagnostics,
    /// Largest `max(|Σv̂|, |Σŷ|) / (1 + ‖ŷ‖)` seen at an iteration boundary.
    pub max_kernel_ratio: f64,
}

/// Runs the distributed RK scheme for `iterations` steps from `h0`.
pub fn heavy_ball_run(
    inst: &Instance,
    tab: &ButcherTableau,
    iterations: usize,
    h0: f64,
    opts: &RunOptions,
) -> Result<HeavyBallRun> {
    let eval = inst.evaluator(opts);
    let mut sim = Simulation::new(&inst.graph, &inst.objs, tab.clone(), iterations, h0)?.parallel(opts.parallel);
    let mut trace = Vec::with_capacity(iterations);
    let mut farthest: (f64, Vec<f64>) = (-1.0, Vec::new());
    let mut max_kernel_ratio = 0.0_f64;
    let mut min_entry = f64::INFINITY;
    let x_ref = inst.reference().replicated(inst.graph.node_count());
    sim.run(|snap| {
        trace.push(eval.evaluate(snap.iteration, snap.comm_rounds, snap.x_stack)?);
        let d: f64 = snap.x_stack.iter().zip(&x_ref).map(|(a, b)| (a - b) * (a - b)).sum();
        if d > farthest.0 {
            farthest = (d, snap.x_stack.to_vec());
        }
        min_entry = snap.x_stack.iter().fold(min_entry, |m, &v| m.min(v));
        let k = snap.kernel;
        max_kernel_ratio = max_kernel_ratio.max(k.v_hat.max(k.y_hat) / (1.0 + k.y_norm));
        Ok(())
    })?;
    let observed: Vec<&[f64]> = if farthest.1.is_empty() {
        vec![]
    } else {
        vec![&farthest.1]
    };
    let mut diagnostics = theory_diagnostics(&inst.graph, &inst.objs, inst.reference(), observed)?;
    if inst.objs.family() == Some(Family::Kl) && min_entry.is_finite() {
        diagnostics.min_simplex_entry = Some(min_entry);
    }
    Ok(HeavyBallRun {
        trace,
        h0,
        h: sim.step_size(),
        diagnostics,
        max_kernel_ratio,
    })
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub trace: Vec<MetricsRecord>,
    /// Chosen `h0` (main method only).
    pub h0: Option<f64>,
    /// Step size actually used: `h` for the RK and dual methods, `α` for CGD/DGD.
    pub step: f64,
    pub dual_gaps: Vec<f64>,
    /// Sweep candidates and their final scores, when `h0` was swept.
    pub sweep: Vec<(f64, Option<f64>)>,
    pub diagnostics: Option<TheoryDiagnostics>,
    pub max_kernel_ratio: Option<f64>,
}

/// Everything a method needs beyond the instance.
#[derive(Debug, Clone)]
pub struct MethodParams {
    pub method: Method,
    pub tableau: ButcherTableau,
    pub iterations: usize,
    pub h0: H0Choice,
    pub baseline: BaselineConfig,
    pub opts: RunOptions,
}

impl MethodParams {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let tab = match cfg.method {
            Method::HeavyBallRk => cfg.tableau()?,
            _ => tableau(TableauKind::ClassicalRk4),
        };
        Ok(MethodParams {
            method: cfg.method,
            tableau: tab,
            iterations: cfg.iterations,
            h0: cfg.h0_choice()?,
            baseline: cfg.baseline.clone(),
            opts: RunOptions {
                style: cfg.report_style,
                wall_clock: cfg.record_wall_time,
                parallel: cfg.parallel,
            },
        })
    }
}

pub fn run_method(inst: &Instance, params: &MethodParams) -> Result<MethodRun> {
    let eval = inst.evaluator(&params.opts);
    let n_iter = params.iterations;
    let b = &params.baseline;
    let plain = |method, trace, step, dual_gaps| MethodRun {
        method,
        trace,
        h0: None,
        step,
        dual_gaps,
        sweep: Vec::new(),
        diagnostics: None,
        max_kernel_ratio: None,
    };
    match params.method {
        Method::HeavyBallRk => {
            let (run, sweep) = match params.h0 {
                H0Choice::Fixed(h0) => (heavy_ball_run(inst, &params.tableau, n_iter, h0, &params.opts)?, vec![]),
                H0Choice::Default => (
                    heavy_ball_run(inst, &params.tableau, n_iter, inst.default_h0(), &params.opts)?,
                    vec![],
                ),
                H0Choice::Sweep => {
                    let mut runs = Vec::new();
                    let outcome = sweep_h0(&h0_grid(), SWEEP_METRIC, |h0| {
                        let run = heavy_ball_run(inst, &params.tableau, n_iter, h0, &params.opts)?;
                        let trace = run.trace.clone();
                        runs.push(run);
                        Ok(trace)
                    })?;
                    let best = runs.into_iter().find(|r| r.h0 == outcome.h0).expect("winner was run");
                    (best, outcome.tried)
                }
            };
            Ok(MethodRun {
                method: Method::HeavyBallRk,
                h0: Some(run.h0),
                step: run.h,
                trace: run.trace,
                dual_gaps: Vec::new(),
                sweep,
                diagnostics: Some(run.diagnostics),
                max_kernel_ratio: Some(run.max_kernel_ratio),
            })
        }
        Method::Cgd => {
            let alpha = b.alpha.unwrap_or_else(|| default_cgd_step(&inst.objs));
            let run = cgd_run(&inst.objs, &eval, alpha, n_iter, None)?;
            Ok(plain(Method::Cgd, run.trace, alpha, run.dual_gaps))
        }
        Method::Dgd => {
            let kl = inst.objs.family() == Some(Family::Kl);
            let p = DgdParams {
                alpha: b.alpha.unwrap_or_else(|| default_dgd_step(&inst.objs)),
                beta: b.beta.unwrap_or(1.0 / inst.graph.lambda_max()),
                decay: b.decay.unwrap_or(kl),
            };
            let run = dgd_run(&inst.graph, &inst.objs, &eval, p, n_iter, None)?;
            Ok(plain(Method::Dgd, run.trace, p.alpha, run.dual_gaps))
        }
        Method::DualNag | Method::DualGd => {
            let h = b.step.unwrap_or_else(|| default_dual_step(&inst.graph, &inst.objs));
            let momentum = params.method == Method::DualNag;
            let run = dual_nag_run(
                &inst.graph,
                &inst.objs,
                &eval,
                inst.reference().value,
                h,
                n_iter,
                momentum,
            )?;
            Ok(plain(params.method, run.trace, h, run.dual_gaps))
        }
    }
}

/// Fit on the tail window, falling back to the pre-floor window when the metric
/// reaches zero.
pub fn robust_fit(trace: &[MetricsRecord], metric: Metric) -> Result<RateFit> {
    match fit_rate(trace, metric) {
        Err(Error::NonPositiveMetric { .. }) => fit_rate_in(trace, metric, pre_floor_window(trace, metric, 0.0)),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    Fig1,
    Fig2,
    Fig3,
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Figure::Fig1 => "fig1",
            Figure::Fig2 => "fig2",
            Figure::Fig3 => "fig3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

/// Problem sizes and budgets for one reproduction scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleParams {
    pub nodes: usize,
    pub dim: usize,
    pub samples: usize,
    pub ridge: f64,
    pub edge_probability: f64,
    /// Communication rounds per trace in fig1 and fig2.
    pub round_budget: usize,
    /// Iterations per order in fig3.
    pub order_sweep_iterations: usize,
    pub data_seed: u64,
    pub graph_seed: u64,
}

impl Scale {
    pub fn params(self) -> ScaleParams {
        match self {
            Scale::Desk => ScaleParams {
                nodes: 20,
                dim: 10,
                samples: 10,
                ridge: 1e-3,
                edge_probability: 0.3,
                round_budget: 8000,
                order_sweep_iterations: 2000,
                data_seed: 7,
                graph_seed: 11,
            },
            Scale::Paper => ScaleParams {
                nodes: 100,
                dim: 100,
                samples: 100,
                ridge: 1e-3,
                edge_probability: 0.1,
                round_budget: 10_000,
                order_sweep_iterations: 2500,
                data_seed: 7,
                graph_seed: 11,
            },
        }
    }
}

impl ScaleParams {
    pub fn topologies(&self) -> [Topology; 3] {
        [
            Topology::star(self.nodes),
            Topology::cycle(self.nodes),
            Topology::erdos_renyi(self.nodes, self.edge_probability, self.graph_seed),
        ]
    }

    pub fn regression(&self) -> Result<ObjectiveSet> {
        regression_instance(self.nodes, self.dim, self.samples, self.ridge, self.data_seed)
    }

    pub fn kl(&self) -> Result<ObjectiveSet> {
        kl_instance(self.nodes, self.dim, self.data_seed)
    }
}

#[derive(Debug, Clone)]
pub struct TraceSummary {
    pub figure: Figure,
    pub graph: &'static str,
    pub label: String,
    pub order: Option<u32>,
    pub path: PathBuf,
    pub run: MethodRun,
    pub fits: Vec<(Metric, Result<RateFit, String>)>,
}

#[derive(Debug, Clone)]
pub struct ReproduceReport {
    pub traces: Vec<TraceSummary>,
    pub rates_path: PathBuf,
    /// `(graph label, max |x_closed − x_oracle|)` for every instance used.
    pub reference_checks: Vec<(&'static str, f64)>,
}

fn methods_for(figure: Figure) -> &'static [Method] {
    match figure {
        Figure::Fig1 => &[Method::HeavyBallRk, Method::Cgd, Method::Dgd, Method::DualNag],
        Figure::Fig2 => &[Method::HeavyBallRk, Method::Dgd, Method::DualNag],
        Figure::Fig3 => &[Method::HeavyBallRk],
    }
}

fn summarize(
    figure: Figure,
    graph: &'static str,
    label: String,
    order: Option<u32>,
    path: PathBuf,
    run: MethodRun,
) -> TraceSummary {
    let fits = Metric::ALL
        .into_iter()
        .map(|m| (m, robust_fit(&run.trace, m).map_err(|e| e.to_string())))
        .collect();
    TraceSummary {
        figure,
        graph,
        label,
        order,
        path,
        run,
        fits,
    }
}

/// Runs the method matrix of one figure and writes one CSV per trace plus
/// `rates_<fig>.csv` into `out_dir`.
pub fn reproduce(figure: Figure, scale: Scale, out_dir: &Path) -> Result<ReproduceReport> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let sizes = scale.params();
    let opts = RunOptions::default();
    let mut traces = Vec::new();
    let mut reference_checks = Vec::new();
    let topologies = sizes.topologies();
    let graphs: &[Topology] = match figure {
        Figure::Fig3 => &topologies[2..],
        _ => &topologies,
    };
    for topo in graphs {
        let objs = match figure {
            Figure::Fig1 => sizes.regression()?,
            _ => sizes.kl()?,
        };
        let inst = Instance::new(build_graph(topo)?, objs)?;
        reference_checks.push((topo.label(), inst.check.max_abs_diff));
        match figure {
            Figure::Fig3 => {
                for kind in [TableauKind::Euler1, TableauKind::Midpoint2, TableauKind::ClassicalRk4] {
                    let tab = tableau(kind);
                    let s = tab.order;
                    let params = MethodParams {
                        method: Method::HeavyBallRk,
                        tableau: tab,
                        iterations: sizes.order_sweep_iterations,
                        h0: H0Choice::Sweep,
                        baseline: BaselineConfig::default(),
                        opts,
                    };
                    let run = run_method(&inst, &params)?;
                    let path = out_dir.join(format!("{figure}_{}_s{s}.csv", topo.label()));
                    write_metrics_csv(&path, &run.trace)?;
                    traces.push(summarize(figure, topo.label(), format!("s{s}"), Some(s), path, run));
                }
            }
            _ => {
                for &method in methods_for(figure) {
                    let tab = tableau(TableauKind::ClassicalRk4);
                    let iterations = match method {
                        Method::HeavyBallRk => sizes.round_budget / tab.stages(),
                        _ => sizes.round_budget,
                    };
                    let params = MethodParams {
                        method,
                        tableau: tab,
                        iterations,
                        h0: H0Choice::Sweep,
                        baseline: BaselineConfig::default(),
                        opts,
                    };
                    let run = run_method(&inst, &params)?;
                    let path = out_dir.join(format!("{figure}_{}_{}.csv", topo.label(), method.label()));
                    write_metrics_csv(&path, &run.trace)?;
                    let order = (method == Method::HeavyBallRk).then_some(4);
                    traces.push(summarize(figure, topo.label(), method.label().into(), order, path, run));
                }
            }
        }
    }
    let rates_path = out_dir.join(format!("rates_{figure}.csv"));
    write_rates(&rates_path, &traces)?;
    Ok(ReproduceReport {
        traces,
        rates_path,
        reference_checks,
    })
}

fn write_rates(path: &Path, traces: &[TraceSummary]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "figure",
        "graph",
        "method",
        "metric",
        "slope",
        "theory",
        "window_start",
        "window_end",
        "residual",
        "h0",
        "note",
    ])
    .map_err(csv_err)?;
    for t in traces {
        for (metric, fit) in &t.fits {
            let theory = t
                .order
                .map(|s| metric.theoretical_slope(s).to_string())
                .unwrap_or_default();
            let h0 = t.run.h0.map(|h| h.to_string()).unwrap_or_default();
            let row = match fit {
                Ok(f) => [
                    t.figure.to_string(),
                    t.graph.to_string(),
                    t.label.clone(),
                    metric.name().to_string(),
                    f.slope.to_string(),
                    theory,
                    f.window.start.to_string(),
                    f.window.end.to_string(),
                    f.residual.to_string(),
                    h0,
                    String::new(),
                ],
                Err(e) => [
                    t.figure.to_string(),
                    t.graph.to_string(),
                    t.label.clone(),
                    metric.name().to_string(),
                    String::new(),
                    theory,
                    String::new(),
                    String::new(),
                    String::new(),
                    h0,
                    e.clone(),
                ],
            };
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

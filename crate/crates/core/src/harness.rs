//! Reference optima, metric evaluation, rate fitting and theory diagnostics.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::graph::LaplacianGraph;
use crate::objectives::{center, dot, norm, project_simplex, DualFriendly, Family, LocalObjective, ObjectiveSet};
use crate::{Error, Result};

/// Agreement required between the closed-form optimum and the iterative oracle.
pub const REFERENCE_TOL: f64 = 1e-9;
/// Fraction of rounds discarded as transient before fitting a slope.
pub const TAIL_START_FRACTION: f64 = 0.2;
pub const MIN_FIT_POINTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStyle {
    /// Raw aggregate quantities, as on the figure axes.
    #[default]
    Figure,
    /// Suboptimality and distance divided by `n`.
    PerAgent,
}

/// One row of a metric trace. Serialized with the fixed CSV column schema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub comm_rounds: usize,
    /// `|F(x_k) − F*|`
    pub suboptimality: f64,
    #[serde(rename = "consensus_L_norm")]
    pub consensus_l_norm: f64,
    pub consensus_quadratic: f64,
    pub dist_to_optimum_sq: f64,
    pub wall_time_ms: u64,
    /// `F(x_k) − F*` with its sign. Not part of the CSV schema.
    #[serde(skip)]
    pub signed_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Suboptimality,
    #[serde(rename = "consensus_L_norm")]
    ConsensusLNorm,
    ConsensusQuadratic,
    DistToOptimumSq,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Suboptimality,
        Metric::ConsensusLNorm,
        Metric::ConsensusQuadratic,
        Metric::DistToOptimumSq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Suboptimality => "suboptimality",
            Metric::ConsensusLNorm => "consensus_L_norm",
            Metric::ConsensusQuadratic => "consensus_quadratic",
            Metric::DistToOptimumSq => "dist_to_optimum_sq",
        }
    }

    pub fn of(self, r: &MetricsRecord) -> f64 {
        match self {
            Metric::Suboptimality => r.suboptimality,
            Metric::ConsensusLNorm => r.consensus_l_norm,
            Metric::ConsensusQuadratic => r.consensus_quadratic,
            Metric::DistToOptimumSq => r.dist_to_optimum_sq,
        }
    }

    /// Slope of the accelerated rate bound for an order-`s` run.
    pub fn theoretical_slope(self, s: u32) -> f64 {
        let s = s as f64;
        match self {
            Metric::Suboptimality => -s / (s + 1.0),
            _ => -2.0 * s / (s + 1.0),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown metric {s:?}")))
    }
}

/// Consensus solution `x*` (one block) and `F* = F(1 ⊗ x*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceOptimum {
    pub x: Vec<f64>,
    pub value: f64,
}

impl ReferenceOptimum {
    pub fn replicated(&self, n: usize) -> Vec<f64> {
        self.x.repeat(n)
    }
}

fn quadratic_parts(objs: &ObjectiveSet) -> Result<Vec<&crate::objectives::QuadraticLocal>> {
    objs.iter()
        .map(|o| match o {
            LocalObjective::Quadratic(q) => Ok(q),
            LocalObjective::Kl(_) => Err(Error::UnsupportedFamily("mixed objective families".into())),
        })
        .collect()
}

/// Closed-form consensus optimum: aggregated normal equations for quadratics,
/// normalized geometric mean of the `q_i` for KL.
pub fn reference_optimum(objs: &ObjectiveSet) -> Result<ReferenceOptimum> {
    let p = objs.dimension();
    let x = match objs.family() {
        Some(Family::Quadratic) => {
            let mut a = DMatrix::zeros(p, p);
            let mut rhs = DVector::zeros(p);
            for q in quadratic_parts(objs)? {
                a += q.hessian();
                rhs += q.linear_term();
            }
            let chol = a
                .cholesky()
                .ok_or_else(|| Error::SingularSystem("aggregated normal equations are not positive definite".into()))?;
            chol.solve(&rhs).as_slice().to_vec()
        }
        Some(Family::Kl) => {
            let n = objs.len() as f64;
            let mut log_mean = vec![0.0; p];
            for o in objs.iter() {
                let LocalObjective::Kl(k) = o else { unreachable!() };
                for (m, lq) in log_mean.iter_mut().zip(k.log_q()) {
                    *m += lq / n;
                }
            }
            let top = log_mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut x: Vec<f64> = log_mean.iter().map(|m| (m - top).exp()).collect();
            let total: f64 = x.iter().sum();
            x.iter_mut().for_each(|v| *v /= total);
            x
        }
        None => return Err(Error::UnsupportedFamily("mixed objective families".into())),
    };
    let value = consensus_value(objs, &x);
    Ok(ReferenceOptimum { x, value })
}

/// `F(1 ⊗ x)`
pub fn consensus_value(objs: &ObjectiveSet, x: &[f64]) -> f64 {
    objs.iter().map(|f| f.evaluate(x)).sum()
}

fn consensus_gradient(objs: &ObjectiveSet, x: &[f64], out: &mut [f64]) {
    let mut g = vec![0.0; x.len()];
    out.iter_mut().for_each(|v| *v = 0.0);
    for f in objs.iter() {
        f.gradient(x, &mut g);
        for (o, gi) in out.iter_mut().zip(&g) {
            *o += gi;
        }
    }
}

/// Accelerated projected gradient with backtracking and adaptive restart on
/// `min_x Σ_i f_i(x)`, projected onto the simplex for KL. Independent of the
/// closed forms in [`reference_optimum`].
pub fn projected_gradient_optimum(objs: &ObjectiveSet, max_iter: usize) -> Result<ReferenceOptimum> {
    let p = objs.dimension();
    let kl = match objs.family() {
        Some(Family::Kl) => true,
        Some(Family::Quadratic) => false,
        None => return Err(Error::UnsupportedFamily("mixed objective families".into())),
    };
    let project = |x: &mut [f64]| {
        if kl {
            project_simplex(x, 1e-300);
        }
    };
    let mut x = vec![1.0 / p as f64; p];
    let mut y = x.clone();
    let mut x_prev = x.clone();
    let mut momentum = 1.0_f64;
    let mut step = 1.0_f64;
    let mut gy = vec![0.0; p];
    let mut gc = vec![0.0; p];
    let mut cand = vec![0.0; p];
    for _ in 0..max_iter {
        consensus_gradient(objs, &y, &mut gy);
        // backtrack on the curvature along the step, which stays accurate near the optimum
        // where function-value tests drown in rounding
        loop {
            for c in 0..p {
                cand[c] = y[c] - step * gy[c];
            }
            project(&mut cand);
            consensus_gradient(objs, &cand, &mut gc);
            let d: Vec<f64> = cand.iter().zip(&y).map(|(a, b)| a - b).collect();
            let dd = dot(&d, &d);
            let curv: f64 = gc.iter().zip(&gy).zip(&d).map(|((a, b), di)| (a - b) * di).sum();
            if dd == 0.0 || curv <= dd / step || step < 1e-30 {
                break;
            }
            step *= 0.5;
        }
        x_prev.copy_from_slice(&x);
        x.copy_from_slice(&cand);
        let mut tangent = gc.clone();
        if kl {
            center(&mut tangent);
        }
        if norm(&tangent) < 1e-13 {
            break;
        }
        // gradient-based adaptive restart
        let uphill: f64 = y
            .iter()
            .zip(&x)
            .zip(&x_prev)
            .map(|((yc, xc), pc)| (yc - xc) * (xc - pc))
            .sum();
        if uphill > 0.0 {
            momentum = 1.0;
            y.copy_from_slice(&x);
        } else {
            let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = (momentum - 1.0) / next;
            momentum = next;
            for c in 0..p {
                y[c] = x[c] + beta * (x[c] - x_prev[c]);
            }
            project(&mut y);
        }
    }
    let value = consensus_value(objs, &x);
    Ok(ReferenceOptimum { x, value })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCheck {
    pub reference: ReferenceOptimum,
    pub max_abs_diff: f64,
    pub value_diff: f64,
}

/// [`reference_optimum`] cross-checked against [`projected_gradient_optimum`].
pub fn verified_reference(objs: &ObjectiveSet) -> Result<ReferenceCheck> {
    let reference = reference_optimum(objs)?;
    let oracle = projected_gradient_optimum(objs, 200_000)?;
    let max_abs_diff = reference
        .x
        .iter()
        .zip(&oracle.x)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let value_diff = (reference.value - oracle.value).abs();
    if !(max_abs_diff <= REFERENCE_TOL) {
        return Err(Error::InvariantViolation(format!(
            "reference optimum disagrees with projected-gradient oracle by {max_abs_diff:e}"
        )));
    }
    Ok(ReferenceCheck {
        reference,
        max_abs_diff,
        value_diff,
    })
}

/// Turns stacked primal iterates into [`MetricsRecord`]s.
pub struct MetricsEvaluator<'a> {
    graph: &'a LaplacianGraph,
    objs: &'a ObjectiveSet,
    x_ref: Vec<f64>,
    f_ref: f64,
    style: ReportStyle,
    clock: Option<Instant>,
}

impl<'a> MetricsEvaluator<'a> {
    pub fn new(graph: &'a LaplacianGraph, objs: &'a ObjectiveSet, reference: &ReferenceOptimum) -> Self {
        MetricsEvaluator {
            graph,
            objs,
            x_ref: reference.replicated(graph.node_count()),
            f_ref: reference.value,
            style: ReportStyle::Figure,
            clock: None,
        }
    }

    pub fn style(mut self, style: ReportStyle) -> Self {
        self.style = style;
        self
    }

    /// Records elapsed milliseconds from now on. Off by default so traces are reproducible.
    pub fn wall_clock(mut self, on: bool) -> Self {
        self.clock = on.then(Instant::now);
        self
    }

    pub fn evaluate(&self, iteration: usize, comm_rounds: usize, x_stack: &[f64]) -> Result<MetricsRecord> {
        let p = self.objs.dimension();
        let f = self.objs.aggregate_value(x_stack)?;
        let lx = self.graph.laplacian_apply(x_stack, p)?;
        let consensus_quadratic = self.graph.quadratic_form(x_stack, p)?;
        let dist: f64 = x_stack.iter().zip(&self.x_ref).map(|(a, b)| (a - b) * (a - b)).sum();
        let per = match self.style {
            ReportStyle::Figure => 1.0,
            ReportStyle::PerAgent => 1.0 / self.graph.node_count() as f64,
        };
        let gap = (f - self.f_ref) * per;
        Ok(MetricsRecord {
            iteration,
            comm_rounds,
            suboptimality: gap.abs(),
            consensus_l_norm: norm(&lx),
            consensus_quadratic,
            dist_to_optimum_sq: dist * per,
            wall_time_ms: self.clock.map_or(0, |c| c.elapsed().as_millis() as u64),
            signed_gap: gap,
        })
    }
}

/// Range of record indices used by a fit: `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitWindow {
    pub start: usize,
    pub end: usize,
}

impl FitWindow {
    /// Drops the first 20% of the trace.
    pub fn tail(len: usize) -> Self {
        FitWindow {
            start: (len as f64 * TAIL_START_FRACTION).ceil() as usize,
            end: len,
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub metric: Metric,
    pub slope: f64,
    pub intercept: f64,
    pub window: FitWindow,
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
}

/// Least-squares slope of `log(metric)` against `log(comm_rounds)` over the tail window.
pub fn fit_rate(trace: &[MetricsRecord], metric: Metric) -> Result<RateFit> {
    fit_rate_in(trace, metric, FitWindow::tail(trace.len()))
}

pub fn fit_rate_in(trace: &[MetricsRecord], metric: Metric, window: FitWindow) -> Result<RateFit> {
    let window = FitWindow {
        start: window.start,
        end: window.end.min(trace.len()),
    };
    if window.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientData {
            needed: MIN_FIT_POINTS,
            got: window.len(),
        });
    }
    let mut rounds = Vec::with_capacity(window.len());
    let mut values = Vec::with_capacity(window.len());
    for r in &trace[window.start..window.end] {
        rounds.push(r.comm_rounds);
        values.push(metric.of(r));
    }
    let (slope, intercept, residual) = fit_log_log(&rounds, &values).map_err(|e| match e {
        Error::NonPositiveMetric { index } => Error::NonPositiveMetric {
            index: index + window.start,
        },
        other => other,
    })?;
    Ok(RateFit {
        metric,
        slope,
        intercept,
        window,
        residual,
    })
}

/// Least-squares fit `log(value) ≈ intercept + slope·log(round)`; returns
/// `(slope, intercept, rms residual)`.
pub fn fit_log_log(rounds: &[usize], values: &[f64]) -> Result<(f64, f64, f64)> {
    if rounds.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: rounds.len(),
            got: values.len(),
        });
    }
    if rounds.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: rounds.len(),
        });
    }
    let mut xs = Vec::with_capacity(rounds.len());
    let mut ys = Vec::with_capacity(rounds.len());
    for (idx, (&k, &v)) in rounds.iter().zip(values).enumerate() {
        if !(v > 0.0) || !v.is_finite() || k == 0 {
            return Err(Error::NonPositiveMetric { index: idx });
        }
        xs.push((k as f64).ln());
        ys.push(v.ln());
    }
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / m)
        .sqrt();
    Ok((slope, intercept, residual))
}

/// Tail window that stops before the metric first drops to `floor` or below.
pub fn pre_floor_window(trace: &[MetricsRecord], metric: Metric, floor: f64) -> FitWindow {
    let mut w = FitWindow::tail(trace.len());
    if let Some(pos) = trace.iter().position(|r| !(metric.of(r) > floor)) {
        w.end = w.end.min(pos);
        w.start = w.start.min((pos as f64 * TAIL_START_FRACTION).ceil() as usize);
    }
    w
}

/// Theory constants governing the bounded-iterate argument of the convergence proof.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryDiagnostics {
    pub mu: f64,
    pub lambda_max: f64,
    pub lambda_min_pos: f64,
    pub gradient_norm_sq: f64,
    /// `min_{Lx=0} F − min_x F`
    pub consensus_gap: f64,
    pub energy: f64,
    pub ball_radius: f64,
    pub max_observed_distance: f64,
    pub all_inside: bool,
    /// Smallest coordinate of any KL primal iterate seen; filled in by the runner.
    pub min_simplex_entry: Option<f64>,
}

/// `𝓔 = e·[‖∇F(x*)‖²/λ_min⁺ + (min_{Lx=0}F − min F)] + 1`, radius `√(2𝓔·λ_max)/μ`.
/// For KL the gradient is taken modulo the simplex normal. `iterates` are stacked primal vectors.
pub fn theory_diagnostics<'i, I>(
    graph: &LaplacianGraph,
    objs: &ObjectiveSet,
    reference: &ReferenceOptimum,
    iterates: I,
) -> Result<TheoryDiagnostics>
where
    I: IntoIterator<Item = &'i [f64]>,
{
    let p = objs.dimension();
    let mut gradient_norm_sq = 0.0;
    let mut g = vec![0.0; p];
    for f in objs.iter() {
        f.tangent_gradient(&reference.x, &mut g);
        gradient_norm_sq += dot(&g, &g);
    }
    let consensus_gap = reference.value - objs.unconstrained_minimum();
    let lambda_min_pos = graph.lambda_min_pos();
    let lambda_max = graph.lambda_max();
    let mu = objs.strong_convexity();
    let energy = std::f64::consts::E * (gradient_norm_sq / lambda_min_pos + consensus_gap) + 1.0;
    let ball_radius = (2.0 * energy * lambda_max).sqrt() / mu;
    let x_ref = reference.replicated(graph.node_count());
    let mut max_observed_distance = 0.0_f64;
    for x in iterates {
        if x.len() != x_ref.len() {
            return Err(Error::DimensionMismatch {
                expected: x_ref.len(),
                got: x.len(),
            });
        }
        let d: f64 = x.iter().zip(&x_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        max_observed_distance = max_observed_distance.max(d);
    }
    Ok(TheoryDiagnostics {
        mu,
        lambda_max,
        lambda_min_pos,
        gradient_norm_sq,
        consensus_gap,
        energy,
        ball_radius,
        max_observed_distance,
        all_inside: max_observed_distance <= ball_radius,
        min_simplex_entry: None,
    })
}

/// Default `h0` sweep grid: `10^{k/4}` for `k = −8..=12` (0.01 to 1000).
pub fn h0_grid() -> Vec<f64> {
    (-8..=12).map(|k| 10f64.powf(k as f64 / 4.0)).collect()
}

#[derive(Debug, Clone)]
pub struct SweepOutcome<T> {
    pub h0: f64,
    pub output: T,
    /// Every candidate with its final score, `None` when the run failed.
    pub tried: Vec<(f64, Option<f64>)>,
}

/// Runs one candidate per `h0` and keeps the one with the smallest finite final `metric`.
/// Divergent candidates are skipped; if all fail, the last error is returned.
pub fn sweep_h0<F>(grid: &[f64], metric: Metric, mut run: F) -> Result<SweepOutcome<Vec<MetricsRecord>>>
where
    F: FnMut(f64) -> Result<Vec<MetricsRecord>>,
{
    let mut best: Option<(f64, f64, Vec<MetricsRecord>)> = None;
    let mut tried = Vec::with_capacity(grid.len());
    let mut last_err = None;
    for &h0 in grid {
        match run(h0) {
            Ok(trace) => {
                let score = trace.last().map_or(f64::INFINITY, |r| metric.of(r));
                if !score.is_finite() {
                    tried.push((h0, None));
                    continue;
                }
                tried.push((h0, Some(score)));
                if best.as_ref().is_none_or(|(_, s, _)| score < *s) {
                    best = Some((h0, score, trace));
                }
            }
            Err(e) => {
                tried.push((h0, None));
                last_err = Some(e);
            }
        }
    }
    match best {
        Some((h0, _, output)) => Ok(SweepOutcome { h0, output, tried }),
        None => Err(last_err.unwrap_or_else(|| Error::InvalidParameter("empty h0 grid".into()))),
    }
}

pub fn write_metrics_csv(path: &Path, trace: &[MetricsRecord]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    write_records(&mut w, trace).map_err(csv_err)?;
    w.flush().map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn metrics_csv_string(trace: &[MetricsRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    write_records(&mut w, trace).expect("in-memory CSV");
    String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("CSV is UTF-8")
}

pub const CSV_COLUMNS: [&str; 7] = [
    "iteration",
    "comm_rounds",
    "suboptimality",
    "consensus_L_norm",
    "consensus_quadratic",
    "dist_to_optimum_sq",
    "wall_time_ms",
];

fn write_records<W: std::io::Write>(w: &mut csv::Writer<W>, trace: &[MetricsRecord]) -> csv::Result<()> {
    if trace.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for r in trace {
        w.serialize(r)?;
    }
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let csv_err = |source| Error::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::InvalidParameter(format!(
            "{}: unexpected CSV header {:?}",
            path.display(),
            headers
        )));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

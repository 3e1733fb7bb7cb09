//! Comparison methods: centralized gradient descent, distributed gradient descent,
//! and Nesterov's method on the transformed dual.
//!
//! All three report through [`MetricsEvaluator`], so their traces share the CSV schema
//! of the main method.

use serde::{Deserialize, Serialize};

use crate::graph::LaplacianGraph;
use crate::harness::{MetricsEvaluator, MetricsRecord};
use crate::objectives::{DualFriendly, Family, LocalObjective, ObjectiveSet, SIMPLEX_FLOOR};
use crate::simulator::KERNEL_SUM_TOL;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineMethod {
    #[serde(rename = "cgd")]
    Cgd,
    #[serde(rename = "dgd")]
    Dgd,
    #[serde(rename = "dual_nag")]
    DualNag,
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub trace: Vec<MetricsRecord>,
    /// `φ(ŷ_k) − φ*` per iteration; empty for primal methods.
    pub dual_gaps: Vec<f64>,
    /// Final stacked primal iterate.
    pub x_final: Vec<f64>,
}

fn check_finite(v: &[f64], iteration: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { iteration })
    }
}

fn check_step(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "step size must be positive, got {alpha}"
        )));
    }
    Ok(())
}

fn is_kl(objs: &ObjectiveSet) -> bool {
    objs.family() == Some(Family::Kl)
}

/// `1/λ_max(Σ_i ∇²f_i)` for quadratics, `1/(n·p)` for KL.
pub fn default_cgd_step(objs: &ObjectiveSet) -> f64 {
    let p = objs.dimension();
    match objs.family() {
        Some(Family::Quadratic) => {
            let mut a = nalgebra::DMatrix::zeros(p, p);
            for o in objs.iter() {
                if let LocalObjective::Quadratic(q) = o {
                    a += q.hessian();
                }
            }
            1.0 / nalgebra::SymmetricEigen::new(a).eigenvalues.max()
        }
        _ => 1.0 / (objs.len() * p) as f64,
    }
}

/// `1/max_i L_i`. KL curvature is unbounded at the boundary, so its value `p` at the
/// uniform point stands in.
pub fn default_dgd_step(objs: &ObjectiveSet) -> f64 {
    let top = objs
        .iter()
        .map(|o| match o {
            LocalObjective::Quadratic(q) => q.curvature_max(),
            LocalObjective::Kl(_) => objs.dimension() as f64,
        })
        .fold(0.0, f64::max);
    1.0 / top
}

/// `μ/λ_max(L)`, the inverse smoothness constant of the dual.
pub fn default_dual_step(graph: &LaplacianGraph, objs: &ObjectiveSet) -> f64 {
    objs.strong_convexity() / graph.lambda_max()
}

/// Gradient descent on the shared variable, `x_{k+1} = x_k − α·Σ_i ∇f_i(x_k)`,
/// projected onto the simplex for KL. Metrics use the consensus-replicated stack.
/// Starts from `start`, or from the average of the local minimizers.
pub fn cgd_run(
    objs: &ObjectiveSet,
    eval: &MetricsEvaluator<'_>,
    alpha: f64,
    iterations: usize,
    start: Option<&[f64]>,
) -> Result<BaselineRun> {
    check_step(alpha)?;
    let p = objs.dimension();
    let n = objs.len();
    let mut x = match start {
        Some(s) => s.to_vec(),
        None => {
            let local = objs.stacked_conjugate(&vec![0.0; n * p])?;
            (0..p)
                .map(|c| (0..n).map(|i| local[i * p + c]).sum::<f64>() / n as f64)
                .collect()
        }
    };
    let kl = is_kl(objs);
    let mut g = vec![0.0; p];
    let mut total = vec![0.0; p];
    let mut trace = Vec::with_capacity(iterations);
    for k in 1..=iterations {
        total.iter_mut().for_each(|v| *v = 0.0);
        for f in objs.iter() {
            f.gradient(&x, &mut g);
            for (t, gi) in total.iter_mut().zip(&g) {
                *t += gi;
            }
        }
        for (xc, tc) in x.iter_mut().zip(&total) {
            *xc -= alpha * tc;
        }
        if kl {
            crate::objectives::project_simplex(&mut x, SIMPLEX_FLOOR);
        }
        check_finite(&x, k)?;
        trace.push(eval.evaluate(k, k, &x.repeat(n))?);
    }
    Ok(BaselineRun {
        trace,
        dual_gaps: Vec::new(),
        x_final: x.repeat(n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgdParams {
    pub alpha: f64,
    /// Mixing weight in `W = I − βL`; must lie in `[0, 2/λ_max)`.
    pub beta: f64,
    /// `α_k = α/√k` when set, constant `α` otherwise.
    pub decay: bool,
}

/// DGD one-step map without projection, `(W⊗I)x − α_k·∇F(x)`.
pub fn dgd_step(graph: &LaplacianGraph, objs: &ObjectiveSet, x: &[f64], beta: f64, alpha_k: f64) -> Result<Vec<f64>> {
    let lx = graph.laplacian_apply(x, objs.dimension())?;
    let grad = objs.aggregate_gradient(x)?;
    Ok(x.iter()
        .zip(&lx)
        .zip(&grad)
        .map(|((xi, li), gi)| xi - beta * li - alpha_k * gi)
        .collect())
}

/// Distributed gradient descent with mixing `W = I − βL`, one communication round per
/// iteration. Starts from `start`, or from the local minimizers `x*(0)`. KL blocks are
/// projected back onto the floored simplex after every step.
pub fn dgd_run(
    graph: &LaplacianGraph,
    objs: &ObjectiveSet,
    eval: &MetricsEvaluator<'_>,
    params: DgdParams,
    iterations: usize,
    start: Option<&[f64]>,
) -> Result<BaselineRun> {
    if params.alpha < 0.0 || !params.alpha.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "DGD step must be non-negative, got {}",
            params.alpha
        )));
    }
    if !(params.beta >= 0.0 && params.beta < 2.0 / graph.lambda_max()) {
        return Err(Error::InvalidParameter(format!(
            "mixing weight β = {} outside [0, 2/λ_max = {})",
            params.beta,
            2.0 / graph.lambda_max()
        )));
    }
    let p = objs.dimension();
    let n = objs.len();
    let mut x = match start {
        Some(s) => s.to_vec(),
        None => objs.stacked_conjugate(&vec![0.0; n * p])?,
    };
    let kl = is_kl(objs);
    let mut trace = Vec::with_capacity(iterations);
    for k in 1..=iterations {
        let alpha_k = if params.decay {
            params.alpha / (k as f64).sqrt()
        } else {
            params.alpha
        };
        x = dgd_step(graph, objs, &x, params.beta, alpha_k)?;
        if kl {
            for (i, block) in x.chunks_mut(p).enumerate() {
                objs.get(i).project(block);
            }
        }
        check_finite(&x, k)?;
        trace.push(eval.evaluate(k, k, &x)?);
    }
    Ok(BaselineRun {
        trace,
        dual_gaps: Vec::new(),
        x_final: x,
    })
}

/// Nesterov's method on the dual in transformed coordinates:
/// `ŷ_k = ẑ_{k−1} − h·L·x*(ẑ_{k−1})`, `ẑ_k = ŷ_k + (k−1)/(k+2)·(ŷ_k − ŷ_{k−1})`.
/// With `momentum = false` this is plain dual gradient descent. One broadcast round per
/// iteration; metrics on `x*(ŷ_k)`. `f_ref` is `F*`, giving `φ* = −F*`.
pub fn dual_nag_run(
    graph: &LaplacianGraph,
    objs: &ObjectiveSet,
    eval: &MetricsEvaluator<'_>,
    f_ref: f64,
    h: f64,
    iterations: usize,
    momentum: bool,
) -> Result<BaselineRun> {
    check_step(h)?;
    let p = objs.dimension();
    let n = objs.len();
    let mut y = vec![0.0; n * p];
    let mut y_prev = y.clone();
    let mut z = y.clone();
    let mut trace = Vec::with_capacity(iterations);
    let mut dual_gaps = Vec::with_capacity(iterations);
    let mut x = objs.stacked_conjugate(&y)?;
    for k in 1..=iterations {
        let xz = objs.stacked_conjugate(&z)?;
        let lx = graph.laplacian_apply(&xz, p)?;
        y_prev.copy_from_slice(&y);
        for c in 0..y.len() {
            y[c] = z[c] - h * lx[c];
        }
        let coeff = if momentum {
            (k as f64 - 1.0) / (k as f64 + 2.0)
        } else {
            0.0
        };
        for c in 0..z.len() {
            z[c] = y[c] + coeff * (y[c] - y_prev[c]);
        }
        check_finite(&z, k)?;
        check_kernel(&y, n, p, k)?;
        x = objs.stacked_conjugate(&y)?;
        check_finite(&x, k)?;
        trace.push(eval.evaluate(k, k, &x)?);
        dual_gaps.push(objs.conjugate_value(&y)? + f_ref);
    }
    Ok(BaselineRun {
        trace,
        dual_gaps,
        x_final: x,
    })
}

fn check_kernel(y: &[f64], n: usize, p: usize, k: usize) -> Result<()> {
    let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    for c in 0..p {
        let s: f64 = (0..n).map(|i| y[i * p + c]).sum();
        if s.abs() > KERNEL_SUM_TOL * (1.0 + y_norm) {
            return Err(Error::InvariantViolation(format!(
                "dual iterate leaves the kernel complement at iteration {k}: coordinate {c} sums to {s:e}"
            )));
        }
    }
    Ok(())
}

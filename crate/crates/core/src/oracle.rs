//! Dense reference computations used only for verification.
//!
//! Everything here materializes `√L` through an eigendecomposition, which the runtime
//! path never does. Sizes are meant to stay small.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::graph::LaplacianGraph;
use crate::objectives::{dot, ObjectiveSet};
use crate::{Error, Result};

/// Materialized `√L` (n×n) with helpers for the block-Kronecker product `√L ⊗ I_p`.
#[derive(Debug, Clone)]
pub struct SqrtLaplacian {
    pub matrix: DMatrix<f64>,
}

impl SqrtLaplacian {
    pub fn new(graph: &LaplacianGraph) -> Result<Self> {
        let l = graph.dense_laplacian();
        let eig = SymmetricEigen::try_new(l, f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Eigensolver("symmetric eigendecomposition did not converge".into()))?;
        let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let q = &eig.eigenvectors;
        let matrix = q * DMatrix::from_diagonal(&roots) * q.transpose();
        Ok(SqrtLaplacian { matrix })
    }

    pub fn node_count(&self) -> usize {
        self.matrix.nrows()
    }

    /// `(√L ⊗ I_p) x` for a stacked vector.
    pub fn apply(&self, x: &[f64], p: usize) -> Vec<f64> {
        kron_apply(&self.matrix, x, p)
    }
}

/// `(M ⊗ I_p) x`
pub fn kron_apply(m: &DMatrix<f64>, x: &[f64], p: usize) -> Vec<f64> {
    let n = m.nrows();
    assert_eq!(x.len(), n * p, "stacked length");
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..n {
            let a = m[(i, j)];
            if a != 0.0 {
                for c in 0..p {
                    out[i * p + c] += a * x[j * p + c];
                }
            }
        }
    }
    out
}

/// `φ(y) = ⟨√L y, x*⟩ − F(x*)` with `x* = x*(√L y)`.
pub fn dual_value(sqrt_l: &SqrtLaplacian, objs: &ObjectiveSet, y: &[f64]) -> Result<f64> {
    let z = sqrt_l.apply(y, objs.dimension());
    let x = objs.stacked_conjugate(&z)?;
    Ok(dot(&z, &x) - objs.aggregate_value(&x)?)
}

/// Closed-form dual gradient `√L · x*(√L y)`.
pub fn dual_gradient(sqrt_l: &SqrtLaplacian, objs: &ObjectiveSet, y: &[f64]) -> Result<Vec<f64>> {
    let p = objs.dimension();
    let x = objs.stacked_conjugate(&sqrt_l.apply(y, p))?;
    Ok(sqrt_l.apply(&x, p))
}

/// Central finite differences of [`dual_value`].
pub fn dual_gradient_fd(sqrt_l: &SqrtLaplacian, objs: &ObjectiveSet, y: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut probe = y.to_vec();
    let mut out = vec![0.0; y.len()];
    for c in 0..y.len() {
        probe[c] = y[c] + step;
        let up = dual_value(sqrt_l, objs, &probe)?;
        probe[c] = y[c] - step;
        let down = dual_value(sqrt_l, objs, &probe)?;
        probe[c] = y[c];
        out[c] = (up - down) / (2.0 * step);
    }
    Ok(out)
}

/// Original-coordinate field on `[v (np); y (np); t]`:
/// `[−(5/t)v − 4√L·x*(√L y); v; 1]`.
pub fn untransformed_field(state: &[f64], sqrt_l: &SqrtLaplacian, objs: &ObjectiveSet) -> Result<Vec<f64>> {
    let p = objs.dimension();
    let np = sqrt_l.node_count() * p;
    if state.len() != 2 * np + 1 {
        return Err(Error::DimensionMismatch {
            expected: 2 * np + 1,
            got: state.len(),
        });
    }
    let t = state[2 * np];
    if !(t > 0.0) {
        return Err(Error::NonPositiveTime(t));
    }
    let g = dual_gradient(sqrt_l, objs, &state[np..2 * np])?;
    let mut out = vec![0.0; 2 * np + 1];
    for c in 0..np {
        out[c] = -(5.0 / t) * state[c] - 4.0 * g[c];
    }
    out[np..2 * np].copy_from_slice(&state[..np]);
    out[2 * np] = 1.0;
    Ok(out)
}

/// Applies `√L` to the `(v, y)` components of a whole-network state, leaving `t`.
pub fn transform_state(state: &[f64], sqrt_l: &SqrtLaplacian, p: usize) -> Vec<f64> {
    let np = sqrt_l.node_count() * p;
    let mut out = sqrt_l.apply(&state[..np], p);
    out.extend(sqrt_l.apply(&state[np..2 * np], p));
    out.push(state[2 * np]);
    out
}

/// Dense `(L ⊗ I_p)` product, kept separate from the sparse runtime routine.
pub fn dense_laplacian_apply(graph: &LaplacianGraph, x: &[f64], p: usize) -> Vec<f64> {
    kron_apply(&graph.dense_laplacian(), x, p)
}

/// `‖∇φ(y₁) − ∇φ(y₂)‖ / ‖y₁ − y₂‖`
pub fn gradient_difference_ratio(sqrt_l: &SqrtLaplacian, objs: &ObjectiveSet, y1: &[f64], y2: &[f64]) -> Result<f64> {
    let g1 = dual_gradient(sqrt_l, objs, y1)?;
    let g2 = dual_gradient(sqrt_l, objs, y2)?;
    let num: f64 = g1.iter().zip(&g2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = y1.iter().zip(y2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, Topology};
    use crate::objectives::kl_instance;

    #[test]
    fn sqrt_squares_to_laplacian() {
        let g = build_graph(&Topology::erdos_renyi(7, 0.5, 2)).unwrap();
        let s = SqrtLaplacian::new(&g).unwrap();
        let diff = &s.matrix * &s.matrix - g.dense_laplacian();
        assert!(diff.amax() < 1e-12);
        // 1ᵀ√L = 0
        for j in 0..7 {
            assert!(s.matrix.column(j).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn initial_untransformed_field() {
        let g = build_graph(&Topology::cycle(4)).unwrap();
        let objs = kl_instance(4, 3, 1).unwrap();
        let s = SqrtLaplacian::new(&g).unwrap();
        let mut state = vec![0.0; 25];
        state[24] = 1.0;
        let f = untransformed_field(&state, &s, &objs).unwrap();
        let x0 = objs.stacked_conjugate(&[0.0; 12]).unwrap();
        let g0 = s.apply(&x0, 3);
        for c in 0..12 {
            assert!((f[c] + 4.0 * g0[c]).abs() < 1e-15);
            assert_eq!(f[12 + c], 0.0);
        }
        assert_eq!(f[24], 1.0);
    }
}

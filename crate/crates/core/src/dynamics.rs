//! The transformed heavy-ball vector field.
//!
//! In coordinates `ξ = [v̂; ŷ; t]` with `v̂ = √L·v`, `ŷ = √L·y`, the field reads
//!
//! ```text
//! v̂' = −(5/t)·v̂ − 4·(L ⊗ I_p)·x*(ŷ)
//! ŷ' = v̂
//! t' = 1
//! ```
//!
//! and only needs the Laplacian, so agent `i` can evaluate its block from its own
//! conjugate solution and those broadcast by its neighbors.

use crate::graph::LaplacianGraph;
use crate::integrator::VectorField;
use crate::objectives::ObjectiveSet;
use crate::{Error, Result};

/// Per-agent ODE state `[v̂_i; ŷ_i; t_i]`, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    data: Vec<f64>,
}

impl AgentState {
    /// `(0, 0, 1)`
    pub fn initial(p: usize) -> Self {
        let mut data = vec![0.0; 2 * p + 1];
        data[2 * p] = 1.0;
        AgentState { data }
    }

    pub fn from_parts(v_hat: &[f64], y_hat: &[f64], t: f64) -> Result<Self> {
        if v_hat.len() != y_hat.len() {
            return Err(Error::DimensionMismatch {
                expected: v_hat.len(),
                got: y_hat.len(),
            });
        }
        let mut data = Vec::with_capacity(2 * v_hat.len() + 1);
        data.extend_from_slice(v_hat);
        data.extend_from_slice(y_hat);
        data.push(t);
        Ok(AgentState { data })
    }

    pub fn from_flat(data: Vec<f64>) -> Result<Self> {
        if data.len() % 2 != 1 {
            return Err(Error::DimensionMismatch {
                expected: data.len() + 1,
                got: data.len(),
            });
        }
        Ok(AgentState { data })
    }

    pub fn dim(&self) -> usize {
        (self.data.len() - 1) / 2
    }

    pub fn v_hat(&self) -> &[f64] {
        &self.data[..self.dim()]
    }

    pub fn y_hat(&self) -> &[f64] {
        let p = self.dim();
        &self.data[p..2 * p]
    }

    pub fn t(&self) -> f64 {
        self.data[2 * self.dim()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// A conjugate solution sent by one agent to its neighbors during a stage round.
#[derive(Debug, Clone, PartialEq)]
pub struct StageBroadcast {
    pub agent_id: usize,
    pub stage_index: usize,
    pub x_star: Vec<f64>,
}

/// Writes `[−(5/t)·v̂ − 4·lx; v̂; 1]` into `out`, where `lx` is the agent's
/// Laplacian row applied to the broadcasts.
#[inline]
pub(crate) fn write_field(v_hat: &[f64], t: f64, lx: &[f64], out: &mut [f64]) {
    let p = v_hat.len();
    let damping = 5.0 / t;
    for c in 0..p {
        out[c] = -damping * v_hat[c] - 4.0 * lx[c];
    }
    out[p..2 * p].copy_from_slice(v_hat);
    out[2 * p] = 1.0;
}

/// Field evaluation for agent `agent_id` using only its own conjugate solution and
/// the broadcasts it received. `neighbor_x_stars` must list exactly the agent's graph
/// neighbors (in any order).
pub fn agent_field(
    agent_id: usize,
    state: &AgentState,
    neighbor_x_stars: &[(usize, &[f64])],
    own_x_star: &[f64],
    graph: &LaplacianGraph,
) -> Result<AgentState> {
    let p = state.dim();
    let t = state.t();
    if !(t > 0.0) {
        return Err(Error::NonPositiveTime(t));
    }
    if own_x_star.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: own_x_star.len(),
        });
    }
    let row = graph.neighbors(agent_id);
    let mut inbox: Vec<(usize, &[f64])> = neighbor_x_stars.to_vec();
    inbox.sort_by_key(|(j, _)| *j);
    if inbox.len() != row.len() || inbox.iter().zip(row).any(|((j, x), r)| j != r || x.len() != p) {
        return Err(Error::NeighborMismatch { agent: agent_id });
    }
    let mut lx = vec![0.0; p];
    let mut next = inbox.iter();
    graph.apply_row(
        agent_id,
        own_x_star,
        |_| next.next().expect("row length checked").1,
        &mut lx,
    );
    let mut out = vec![0.0; 2 * p + 1];
    write_field(state.v_hat(), t, &lx, &mut out);
    Ok(AgentState { data: out })
}

/// Whole-network field on the stacked state `[v̂ (np); ŷ (np); t]`.
pub fn monolithic_field(state: &[f64], graph: &LaplacianGraph, objs: &ObjectiveSet) -> Result<Vec<f64>> {
    let mut out = vec![0.0; state.len()];
    MonolithicField::new(graph, objs).eval(state, &mut out)?;
    Ok(out)
}

/// [`monolithic_field`] as a [`VectorField`] for [`crate::integrator::rk_step`].
pub struct MonolithicField<'a> {
    graph: &'a LaplacianGraph,
    objs: &'a ObjectiveSet,
}

impl<'a> MonolithicField<'a> {
    pub fn new(graph: &'a LaplacianGraph, objs: &'a ObjectiveSet) -> Self {
        MonolithicField { graph, objs }
    }
}

impl VectorField for MonolithicField<'_> {
    fn dim(&self) -> usize {
        2 * self.graph.node_count() * self.objs.dimension() + 1
    }

    fn eval(&self, state: &[f64], out: &mut [f64]) -> Result<()> {
        let np = self.graph.node_count() * self.objs.dimension();
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
        let p = self.objs.dimension();
        let v_hat = &state[..np];
        let x_star = self.objs.stacked_conjugate(&state[np..2 * np])?;
        let lx = self.graph.laplacian_apply(&x_star, p)?;
        let damping = 5.0 / t;
        for c in 0..np {
            out[c] = -damping * v_hat[c] - 4.0 * lx[c];
        }
        out[np..2 * np].copy_from_slice(v_hat);
        out[2 * np] = 1.0;
        Ok(())
    }
}

/// Stacks agent states into the whole-network layout. All agents must share `t`.
pub fn stack_states(states: &[AgentState]) -> Result<Vec<f64>> {
    let p = states.first().map_or(0, AgentState::dim);
    let n = states.len();
    let t = states.first().map_or(1.0, AgentState::t);
    let mut out = vec![0.0; 2 * n * p + 1];
    for (i, s) in states.iter().enumerate() {
        if s.dim() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: s.dim(),
            });
        }
        if s.t() != t {
            return Err(Error::InvariantViolation(format!(
                "agent {i} has time {} but agent 0 has {t}",
                s.t()
            )));
        }
        out[i * p..(i + 1) * p].copy_from_slice(s.v_hat());
        out[n * p + i * p..n * p + (i + 1) * p].copy_from_slice(s.y_hat());
    }
    out[2 * n * p] = t;
    Ok(out)
}

/// Splits a whole-network state into per-agent states.
pub fn unstack_state(state: &[f64], n: usize, p: usize) -> Result<Vec<AgentState>> {
    if state.len() != 2 * n * p + 1 {
        return Err(Error::DimensionMismatch {
            expected: 2 * n * p + 1,
            got: state.len(),
        });
    }
    let t = state[2 * n * p];
    (0..n)
        .map(|i| {
            AgentState::from_parts(
                &state[i * p..(i + 1) * p],
                &state[n * p + i * p..n * p + (i + 1) * p],
                t,
            )
        })
        .collect()
}

/// Largest absolute per-coordinate sums `max_j |Σ_i v̂^i_j|`, `max_j |Σ_i ŷ^i_j|`,
/// and `‖ŷ‖`. In exact arithmetic the sums vanish (ŷ, v̂ ⊥ ker L).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSums {
    pub v_hat: f64,
    pub y_hat: f64,
    pub y_norm: f64,
    pub v_norm: f64,
}

impl KernelSums {
    /// Both sums within `rel_tol·(1 + ‖ŷ‖)`.
    pub fn within(&self, rel_tol: f64) -> bool {
        let bound = rel_tol * (1.0 + self.y_norm);
        self.v_hat <= bound && self.y_hat <= bound
    }

    /// Each sum relative to its own vector's norm. Looser than [`KernelSums::within`]
    /// when `v̂` dominates, as it does while a run blows up.
    pub fn within_own_scale(&self, rel_tol: f64) -> bool {
        self.v_hat <= rel_tol * (1.0 + self.v_norm.max(self.y_norm)) && self.y_hat <= rel_tol * (1.0 + self.y_norm)
    }
}

pub fn kernel_sums(states: &[AgentState]) -> KernelSums {
    let p = states.first().map_or(0, AgentState::dim);
    let mut sv = vec![0.0; p];
    let mut sy = vec![0.0; p];
    let mut y_sq = 0.0;
    let mut v_sq = 0.0;
    for s in states {
        for c in 0..p {
            sv[c] += s.v_hat()[c];
            sy[c] += s.y_hat()[c];
            y_sq += s.y_hat()[c] * s.y_hat()[c];
            v_sq += s.v_hat()[c] * s.v_hat()[c];
        }
    }
    let max_abs = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    KernelSums {
        v_hat: max_abs(&sv),
        y_hat: max_abs(&sy),
        y_norm: y_sq.sqrt(),
        v_norm: v_sq.sqrt(),
    }
}

//! Synchronous-round network simulator for the distributed RK scheme.
//!
//! Each iteration runs `S` stage rounds. In round `l` every agent
//!
//! 1. forms its stage point `ξ_k + h·Σ_{j<l} a_{lj}·k_j` from its stored stage derivatives,
//! 2. solves its conjugate problem at the stage `ŷ` and broadcasts `x*` to its neighbors,
//! 3. after the barrier, evaluates its block of the transformed field from the broadcasts.
//!
//! After the last stage every agent applies `ξ_{k+1} = ξ_k + h·Σ_j b_j·k_j`. Agents only
//! read the previous phase's snapshot, so parallel and sequential execution agree bitwise.

use rayon::prelude::*;

use crate::dynamics::{kernel_sums, write_field, AgentState, KernelSums};
use crate::graph::LaplacianGraph;
use crate::integrator::{combine, ButcherTableau};
use crate::objectives::{DualFriendly, ObjectiveSet};
use crate::{Error, Result};

/// Relative tolerance for the per-coordinate kernel-sum invariant.
pub const KERNEL_SUM_TOL: f64 = 1e-9;

/// `h = h0 · N^{−s/(s+1)}`
pub fn step_size(h0: f64, iterations: usize, order: u32) -> f64 {
    let s = order as f64;
    h0 * (iterations.max(1) as f64).powf(-s / (s + 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageRecord {
    pub round: usize,
    pub sender: usize,
    pub receiver: usize,
    pub payload_dim: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MessageLog {
    pub records: Vec<MessageRecord>,
}

impl MessageLog {
    /// Checks that every message rides an edge and each agent broadcasts once per round.
    pub fn validate(&self, graph: &LaplacianGraph) -> Result<()> {
        let mut by_round: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for m in &self.records {
            if graph.neighbors(m.sender).binary_search(&m.receiver).is_err() {
                return Err(Error::InvariantViolation(format!(
                    "message {} -> {} in round {} does not follow an edge",
                    m.sender, m.receiver, m.round
                )));
            }
            by_round.entry(m.round).or_default().push(m.sender);
        }
        for (round, senders) in by_round {
            for i in 0..graph.node_count() {
                let sent = senders.iter().filter(|&&s| s == i).count();
                if sent != graph.degree(i) {
                    return Err(Error::InvariantViolation(format!(
                        "agent {i} sent {sent} messages in round {round}, expected {}",
                        graph.degree(i)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// State handed to the per-iteration sink.
pub struct IterationSnapshot<'a> {
    pub iteration: usize,
    pub comm_rounds: usize,
    pub step_size: f64,
    pub states: &'a [AgentState],
    /// Stacked primal iterate `x*(ŷ_k)`.
    pub x_stack: &'a [f64],
    pub kernel: KernelSums,
}

struct AgentScratch {
    point: Vec<f64>,
    derivs: Vec<Vec<f64>>,
}

pub struct Simulation<'a> {
    graph: &'a LaplacianGraph,
    objs: &'a ObjectiveSet,
    tableau: ButcherTableau,
    iterations: usize,
    h: f64,
    states: Vec<AgentState>,
    scratch: Vec<AgentScratch>,
    board: Vec<f64>,
    iteration: usize,
    round_counter: usize,
    parallel: bool,
    check_kernel: bool,
    log: Option<MessageLog>,
}

impl<'a> Simulation<'a> {
    pub fn new(
        graph: &'a LaplacianGraph,
        objs: &'a ObjectiveSet,
        tableau: ButcherTableau,
        iterations: usize,
        h0: f64,
    ) -> Result<Self> {
        if objs.len() != graph.node_count() {
            return Err(Error::DimensionMismatch {
                expected: graph.node_count(),
                got: objs.len(),
            });
        }
        if !(h0 > 0.0) || !h0.is_finite() {
            return Err(Error::InvalidParameter(format!("h0 must be positive, got {h0}")));
        }
        let n = graph.node_count();
        let p = objs.dimension();
        let stages = tableau.stages();
        let h = step_size(h0, iterations, tableau.order);
        Ok(Simulation {
            graph,
            objs,
            iterations,
            h,
            states: vec![AgentState::initial(p); n],
            scratch: (0..n)
                .map(|_| AgentScratch {
                    point: vec![0.0; 2 * p + 1],
                    derivs: vec![vec![0.0; 2 * p + 1]; stages],
                })
                .collect(),
            board: vec![0.0; n * p],
            iteration: 0,
            round_counter: 0,
            parallel: false,
            check_kernel: true,
            log: None,
            tableau,
        })
    }

    /// Evaluates agents of one phase on the rayon pool.
    pub fn parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }

    pub fn record_messages(mut self, on: bool) -> Self {
        self.log = on.then(MessageLog::default);
        self
    }

    pub fn check_kernel_sums(mut self, on: bool) -> Self {
        self.check_kernel = on;
        self
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn round_counter(&self) -> usize {
        self.round_counter
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    pub fn messages(&self) -> Option<&MessageLog> {
        self.log.as_ref()
    }

    pub fn tableau(&self) -> &ButcherTableau {
        &self.tableau
    }

    pub fn primal_extract(&self) -> Vec<f64> {
        primal_extract(&self.states, self.objs)
    }

    /// Executes one full iteration (S stage rounds plus the combination step).
    pub fn step(&mut self) -> Result<()> {
        let k = self.iteration + 1;
        let h = self.h;
        let p = self.objs.dimension();
        let graph = self.graph;
        let objs = self.objs;
        let non_finite = |v: &[f64]| v.iter().any(|x| !x.is_finite());

        for l in 0..self.tableau.stages() {
            let coeffs = self.tableau.stage_coefficients(l);

            // stage point and conjugate solution, written to the broadcast board
            let prepare = |(i, ((state, scratch), x_out)): (usize, ((&AgentState, &mut AgentScratch), &mut [f64]))| {
                combine(state.as_slice(), h, coeffs, &scratch.derivs[..l], &mut scratch.point);
                objs.get(i).conjugate_argmax(&scratch.point[p..2 * p], x_out);
                !(non_finite(&scratch.point) || non_finite(x_out))
            };
            let ok = if self.parallel {
                self.states
                    .par_iter()
                    .zip(self.scratch.par_iter_mut())
                    .zip(self.board.par_chunks_mut(p))
                    .enumerate()
                    .map(prepare)
                    .reduce(|| true, |a, b| a && b)
            } else {
                self.states
                    .iter()
                    .zip(self.scratch.iter_mut())
                    .zip(self.board.chunks_mut(p))
                    .enumerate()
                    .map(prepare)
                    // every agent must run, so no short-circuiting `all`
                    .filter(|ok| !ok)
                    .count()
                    == 0
            };
            if !ok {
                return Err(Error::NonFiniteState { iteration: k });
            }
            self.round_counter += 1;
            if let Some(log) = self.log.as_mut() {
                for i in 0..graph.node_count() {
                    for &j in graph.neighbors(i) {
                        log.records.push(MessageRecord {
                            round: self.round_counter,
                            sender: i,
                            receiver: j,
                            payload_dim: p,
                        });
                    }
                }
            }

            // barrier passed: every stage-l broadcast is visible
            let board = &self.board;
            let evaluate = |(i, scratch): (usize, &mut AgentScratch)| -> Result<()> {
                let t = scratch.point[2 * p];
                if !(t > 0.0) {
                    return Err(Error::NonPositiveTime(t).at_agent(i));
                }
                let mut lx = vec![0.0; p];
                graph.apply_row(i, &board[i * p..(i + 1) * p], |j| &board[j * p..(j + 1) * p], &mut lx);
                let (point, derivs) = (&scratch.point, &mut scratch.derivs);
                write_field(&point[..p], t, &lx, &mut derivs[l]);
                if non_finite(&derivs[l]) {
                    return Err(Error::NonFiniteState { iteration: k });
                }
                Ok(())
            };
            if self.parallel {
                self.scratch.par_iter_mut().enumerate().try_for_each(evaluate)?;
            } else {
                self.scratch.iter_mut().enumerate().try_for_each(evaluate)?;
            }
        }

        let weights = self.tableau.weights();
        let update = |(state, scratch): (&mut AgentState, &mut AgentScratch)| {
            combine(state.as_slice(), h, weights, &scratch.derivs, &mut scratch.point);
            state.as_mut_slice().copy_from_slice(&scratch.point);
            !non_finite(state.as_slice())
        };
        let ok = if self.parallel {
            self.states
                .par_iter_mut()
                .zip(self.scratch.par_iter_mut())
                .map(update)
                .reduce(|| true, |a, b| a && b)
        } else {
            self.states
                .iter_mut()
                .zip(self.scratch.iter_mut())
                .map(update)
                .filter(|ok| !ok)
                .count()
                == 0
        };
        if !ok {
            return Err(Error::NonFiniteState { iteration: k });
        }
        self.iteration = k;
        Ok(())
    }

    /// Runs all remaining iterations, calling `sink` at every iteration boundary.
    pub fn run<F>(&mut self, mut sink: F) -> Result<()>
    where
        F: FnMut(&IterationSnapshot<'_>) -> Result<()>,
    {
        while self.iteration < self.iterations {
            self.step()?;
            let kernel = kernel_sums(&self.states);
            if self.check_kernel && !kernel.within_own_scale(KERNEL_SUM_TOL) {
                return Err(Error::InvariantViolation(format!(
                    "kernel sums at iteration {}: |Σv̂| = {:e}, |Σŷ| = {:e}, ‖ŷ‖ = {:e}",
                    self.iteration, kernel.v_hat, kernel.y_hat, kernel.y_norm
                )));
            }
            let x_stack = self.primal_extract();
            if x_stack.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState {
                    iteration: self.iteration,
                });
            }
            sink(&IterationSnapshot {
                iteration: self.iteration,
                comm_rounds: self.round_counter,
                step_size: self.h,
                states: &self.states,
                x_stack: &x_stack,
                kernel,
            })?;
        }
        Ok(())
    }
}

/// Stacked conjugate solutions at each agent's current `ŷ`.
pub fn primal_extract(states: &[AgentState], objs: &ObjectiveSet) -> Vec<f64> {
    let p = objs.dimension();
    let mut out = vec![0.0; states.len() * p];
    for (i, s) in states.iter().enumerate() {
        objs.get(i).conjugate_argmax(s.y_hat(), &mut out[i * p..(i + 1) * p]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{stack_states, MonolithicField};
    use crate::graph::{build_graph, Topology};
    use crate::integrator::{rk_step, tableau, TableauKind};
    use crate::objectives::{kl_instance, regression_instance};

    #[test]
    fn step_size_examples() {
        assert_eq!(step_size(1.0, 1, 1), 1.0);
        assert_eq!(step_size(1.0, 1, 4), 1.0);
        assert!((step_size(1.0, 4, 1) - 0.5).abs() < 1e-15);
        assert!((step_size(2.0, 32, 4) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn zero_iterations() {
        let g = build_graph(&Topology::cycle(3)).unwrap();
        let objs = kl_instance(3, 2, 1).unwrap();
        let mut sim = Simulation::new(&g, &objs, tableau(TableauKind::Midpoint2), 0, 1.0).unwrap();
        let mut calls = 0;
        sim.run(|_| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 0);
        assert!(sim.states().iter().all(|s| *s == AgentState::initial(2)));
    }

    #[test]
    fn primal_extract_at_origin() {
        let objs = kl_instance(3, 4, 9).unwrap();
        let x = primal_extract(&vec![AgentState::initial(4); 3], &objs);
        for i in 0..3 {
            let crate::objectives::LocalObjective::Kl(k) = objs.get(i) else {
                unreachable!()
            };
            for (a, b) in x[i * 4..i * 4 + 4].iter().zip(k.q()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_monolithic_trajectory_bitwise() {
        let g = build_graph(&Topology::erdos_renyi(6, 0.5, 3)).unwrap();
        let objs = regression_instance(6, 2, 4, 0.01, 4).unwrap();
        for kind in [TableauKind::Euler1, TableauKind::Midpoint2, TableauKind::ClassicalRk4] {
            let t = tableau(kind);
            let mut sim = Simulation::new(&g, &objs, t.clone(), 30, 0.05).unwrap();
            let field = MonolithicField::new(&g, &objs);
            let mut mono = stack_states(sim.states()).unwrap();
            let h = sim.step_size();
            sim.run(|snap| {
                mono = rk_step(&t, &field, &mono, h)?;
                assert_eq!(stack_states(snap.states)?, mono, "{kind:?} k={}", snap.iteration);
                Ok(())
            })
            .unwrap();
        }
    }

    #[test]
    fn parallel_equals_sequential() {
        let g = build_graph(&Topology::cycle(9)).unwrap();
        let objs = kl_instance(9, 3, 5).unwrap();
        let run = |par: bool| {
            let mut sim = Simulation::new(&g, &objs, tableau(TableauKind::ClassicalRk4), 40, 2.0)
                .unwrap()
                .parallel(par);
            sim.run(|_| Ok(())).unwrap();
            sim.states().to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn round_and_message_accounting() {
        let g = build_graph(&Topology::star(5)).unwrap();
        let objs = kl_instance(5, 2, 5).unwrap();
        let t = tableau(TableauKind::ClassicalRk4);
        let mut sim = Simulation::new(&g, &objs, t, 7, 1.0).unwrap().record_messages(true);
        sim.run(|snap| {
            assert_eq!(snap.comm_rounds, snap.iteration * 4);
            Ok(())
        })
        .unwrap();
        let log = sim.messages().unwrap();
        let per_iter: usize = (0..5).map(|i| g.degree(i)).sum::<usize>() * 4;
        assert_eq!(log.records.len(), 7 * per_iter);
        log.validate(&g).unwrap();
    }

    #[test]
    fn time_coordinate_advances_exactly() {
        let g = build_graph(&Topology::cycle(4)).unwrap();
        let objs = kl_instance(4, 2, 2).unwrap();
        let mut sim = Simulation::new(&g, &objs, tableau(TableauKind::Euler1), 16, 1.0).unwrap();
        let h = sim.step_size();
        assert_eq!(h, 0.25);
        sim.run(|snap| {
            let expect = 1.0 + snap.iteration as f64 * h;
            assert!(snap.states.iter().all(|s| (s.t() - expect).abs() < 1e-12));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn divergence_reports_iteration() {
        let g = build_graph(&Topology::star(4)).unwrap();
        let objs = regression_instance(4, 3, 3, 0.0, 1).unwrap();
        let mut sim = Simulation::new(&g, &objs, tableau(TableauKind::Euler1), 2000, 1e4).unwrap();
        let err = sim.run(|_| Ok(())).unwrap_err();
        assert!(
            matches!(err.root(), Error::NonFiniteState { iteration } if *iteration > 0),
            "{err}"
        );
    }
}

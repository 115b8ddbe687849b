use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{
    apply_correction, build_pose_system, build_rotation_system, vec_to_rotation_matrix,
};
use crate::error::{Error, Result};
use crate::geometry::{project_to_so3_checked, Rotation};
use crate::graph::{Estimate, MultiRobotGraph, RobotId, VertexId};
use crate::runtime::ledger::{CommunicationLedger, Phase, SeparatorMessage};
use crate::solvers::{is_divergent, BlockSolver, IterationTrace, Scheme, SolverConfig};
use crate::system::BlockLinearSystem;

/// A robot in the simulated team. It only holds its own edges, its own
/// block of the estimate, and the latest values received for the neighbor
/// vertices its rows couple to.
#[derive(Debug, Clone)]
pub struct RobotAgent {
    pub id: RobotId,
    pub intra_edges: Vec<usize>,
    pub separator_edges: Vec<usize>,
    estimate: DVector<f64>,
    cache: BTreeMap<VertexId, DVector<f64>>,
    /// Own vertices (with their slot) each neighbor needs.
    outgoing: BTreeMap<usize, Vec<(VertexId, usize)>>,
    /// Neighbor vertices this robot's rows couple to.
    incoming: Vec<VertexId>,
    /// Neighbors heard from during the current solve.
    heard_from: BTreeSet<usize>,
}

impl RobotAgent {
    fn new(graph: &MultiRobotGraph, system: &BlockLinearSystem, robot: usize) -> Self {
        let partition = graph.partition_edges(RobotId(robot));
        let mut outgoing: BTreeMap<usize, Vec<(VertexId, usize)>> = BTreeMap::new();
        for nb in system.neighbors(robot) {
            let mut needed: Vec<(VertexId, usize)> = system
                .couplings(nb)
                .filter(|(col, _)| *col == robot)
                .flat_map(|(_, entries)| entries.iter().map(|e| (e.col_vertex, e.col)))
                .collect();
            needed.sort();
            needed.dedup();
            outgoing.insert(nb, needed);
        }
        let mut incoming: Vec<VertexId> = system
            .couplings(robot)
            .flat_map(|(_, entries)| entries.iter().map(|e| e.col_vertex))
            .collect();
        incoming.sort();
        incoming.dedup();
        RobotAgent {
            id: RobotId(robot),
            intra_edges: partition.intra,
            separator_edges: partition.separators,
            estimate: DVector::zeros(system.robot_range(robot).len()),
            cache: BTreeMap::new(),
            outgoing,
            incoming,
            heard_from: BTreeSet::new(),
        }
    }

    /// Number of own vertex blocks sent per iteration, summed over neighbors.
    pub fn separator_count(&self) -> usize {
        self.outgoing.values().map(Vec::len).sum()
    }

    pub fn neighbors(&self) -> impl Iterator<Item = RobotId> + '_ {
        self.outgoing.keys().map(|r| RobotId(*r))
    }

    pub fn estimate(&self) -> &DVector<f64> {
        &self.estimate
    }

    fn reset(&mut self, dim: usize, var_dim: usize, assume_zero_neighbors: bool) {
        self.estimate = DVector::zeros(dim);
        self.cache.clear();
        self.heard_from.clear();
        if assume_zero_neighbors {
            for v in &self.incoming {
                self.cache.insert(*v, DVector::zeros(var_dim));
            }
        }
    }

    /// Block solve against the cached neighbor values; neighbors never heard
    /// from are left out.
    fn target(&self, solver: &BlockSolver<'_>) -> DVector<f64> {
        solver.local_solve(self.id.0, |_, _, v| self.cache.get(v).cloned())
    }

    /// First-sweep solve that ignores measurements to neighbors not yet heard from.
    fn flagged_target(&self, solver: &BlockSolver<'_>) -> DVector<f64> {
        solver.flagged_solve(
            self.id.0,
            |nb| self.heard_from.contains(&nb),
            |_, _, v| self.cache.get(v).cloned(),
        )
    }

    fn apply(&mut self, gamma: f64, target: DVector<f64>) -> f64 {
        let block = BlockSolver::relax(gamma, &self.estimate, target);
        let change = (&block - &self.estimate).norm();
        self.estimate = block;
        change
    }

    fn outbox(&self, round: usize, phase: Phase, var_dim: usize) -> Vec<SeparatorMessage> {
        self.outgoing
            .iter()
            .map(|(nb, vertices)| SeparatorMessage {
                sender: self.id,
                receiver: RobotId(*nb),
                round,
                phase,
                payload: vertices
                    .iter()
                    .map(|(v, slot)| {
                        (
                            *v,
                            self.estimate
                                .rows(slot * var_dim, var_dim)
                                .iter()
                                .copied()
                                .collect(),
                        )
                    })
                    .collect(),
            })
            .collect()
    }

    fn receive(&mut self, msg: &SeparatorMessage) {
        self.heard_from.insert(msg.sender.0);
        for (v, value) in &msg.payload {
            debug_assert!(
                self.incoming.contains(v),
                "{} received non-separator {v}",
                self.id
            );
            self.cache.insert(*v, DVector::from_column_slice(value));
        }
    }
}

/// Message transport between agents; every delivery is ledgered.
fn broadcast(
    agents: &mut [RobotAgent],
    sender: usize,
    round: usize,
    phase: Phase,
    var_dim: usize,
    ledger: &mut CommunicationLedger,
) {
    for msg in agents[sender].outbox(round, phase, var_dim) {
        ledger.record(&msg);
        agents[msg.receiver.0].receive(&msg);
    }
}

fn assemble(system: &BlockLinearSystem, agents: &[RobotAgent]) -> DVector<f64> {
    let mut y = DVector::zeros(system.dim());
    for a in agents {
        let range = system.robot_range(a.id.0);
        y.rows_mut(range.start, range.len()).copy_from(&a.estimate);
    }
    y
}

/// One distributed linear solve. The referee only assembles the stacked
/// estimate to evaluate the stopping rule and the trace.
fn run_phase(
    system: &BlockLinearSystem,
    agents: &mut [RobotAgent],
    config: &SolverConfig,
    phase: Phase,
    ledger: &mut CommunicationLedger,
) -> Result<(DVector<f64>, IterationTrace)> {
    let solver = BlockSolver::new(system)?;
    let order = config.order(system.robot_count())?;
    let eta = config.eta_for(system);
    let d = system.var_dim();
    for a in agents.iter_mut() {
        a.reset(system.robot_range(a.id.0).len(), d, !config.flagged_init);
    }
    let mut trace = IterationTrace::default();
    let mut round = 0;

    if config.flagged_init {
        round += 1;
        let mut changes = vec![0.0; agents.len()];
        for &r in &order {
            let target = agents[r].flagged_target(&solver);
            changes[r] = agents[r].apply(1.0, target);
            broadcast(agents, r, round, phase, d, ledger);
        }
        let change = trace.record(system.objective(&assemble(system, agents)), changes);
        trace.flagged_init = true;
        if change <= eta {
            trace.converged = true;
        }
    }

    while !trace.converged && trace.iterations < config.max_iterations {
        round += 1;
        let mut changes = vec![0.0; agents.len()];
        match config.scheme {
            Scheme::Jacobi => {
                let targets: Vec<DVector<f64>> =
                    agents.par_iter().map(|a| a.target(&solver)).collect();
                for (r, target) in targets.into_iter().enumerate() {
                    changes[r] = agents[r].apply(config.gamma, target);
                }
                for r in 0..agents.len() {
                    broadcast(agents, r, round, phase, d, ledger);
                }
            }
            Scheme::GaussSeidel => {
                for &r in &order {
                    let target = agents[r].target(&solver);
                    changes[r] = agents[r].apply(config.gamma, target);
                    broadcast(agents, r, round, phase, d, ledger);
                }
            }
        }
        let change = trace.record(system.objective(&assemble(system, agents)), changes);
        if is_divergent(change) {
            trace.diverged = true;
            return Err(Error::Diverged {
                phase: format!("{phase:?}").to_lowercase(),
                iterations: trace.iterations,
                ledger: Box::new(ledger.clone()),
            });
        }
        if change <= eta {
            trace.converged = true;
        }
    }
    let y = assemble(system, agents);
    trace.residual_norm = (system.multiply(&y) - system.rhs()).norm();
    Ok((y, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributedResult {
    pub estimate: Estimate,
    pub cost: f64,
    pub rotation_trace: IterationTrace,
    pub pose_trace: IterationTrace,
    pub ledger: CommunicationLedger,
    /// Per robot, the number of vertex blocks it sends each iteration.
    pub separator_counts: Vec<usize>,
    pub rank_deficient_projections: usize,
}

/// Both stages of the chordal pipeline solved by the simulated team.
pub fn run_distributed_two_stage(
    graph: &MultiRobotGraph,
    config: &SolverConfig,
) -> Result<DistributedResult> {
    config.validate()?;
    let rot_sys = build_rotation_system(graph)?;
    let mut agents: Vec<RobotAgent> = (0..graph.robot_count())
        .map(|r| RobotAgent::new(graph, &rot_sys, r))
        .collect();
    let separator_counts = agents.iter().map(RobotAgent::separator_count).collect();
    let mut ledger = CommunicationLedger::new(graph.robot_count());

    let (_, rotation_trace) =
        run_phase(&rot_sys, &mut agents, config, Phase::Rotation, &mut ledger)?;

    // each robot projects its own rotation blocks; the anchor is the gauge
    let mut rotations = BTreeMap::from([(graph.anchor(), Rotation::identity())]);
    let mut deficient = 0;
    for a in &agents {
        for (slot, v) in rot_sys.blocks()[a.id.0].vertices.iter().enumerate() {
            let m = vec_to_rotation_matrix(a.estimate.rows(slot * 9, 9).as_slice());
            let p = project_to_so3_checked(&m);
            deficient += usize::from(p.rank_deficient);
            rotations.insert(*v, p.rotation);
        }
    }

    let pose_sys = build_pose_system(graph, &rotations)?;
    let (p, pose_trace) = run_phase(&pose_sys, &mut agents, config, Phase::Pose, &mut ledger)?;
    let estimate = apply_correction(&pose_sys, &rotations, &p)?;
    let cost = graph.cost(&estimate)?;
    Ok(DistributedResult {
        estimate,
        cost,
        rotation_trace,
        pose_trace,
        ledger,
        separator_counts,
        rank_deficient_projections: deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centralized::solve_two_stage;
    use crate::runtime::ledger::{dgs_comm_model, B_P, B_R};
    use crate::runtime::scenario::{generate_scenario, ScenarioSpec};
    use crate::solvers::{jor_solve, sor_solve};

    #[test]
    fn single_robot_sends_nothing_and_matches_centralized() {
        let (g, _) = generate_scenario(&ScenarioSpec::grid(4, 1)).unwrap();
        // keep only robot 0's subgraph
        let mut single = MultiRobotGraph::new(1);
        for v in g.robot_vertices(RobotId(0)) {
            single.add_vertex(*v, None).unwrap();
        }
        for e in g
            .edges()
            .iter()
            .filter(|e| e.from.robot.0 == 0 && e.to.robot.0 == 0)
        {
            single.add_edge(e.clone()).unwrap();
        }
        let res = run_distributed_two_stage(&single, &SolverConfig::dgs(1e-2)).unwrap();
        let central = solve_two_stage(&single).unwrap();
        assert_eq!(res.ledger.total_bytes(), 0);
        assert_eq!(res.estimate, central.estimate);
        assert_eq!(res.rotation_trace.iterations, 2);
    }

    #[test]
    fn agents_reproduce_solver_iterates_exactly() {
        let (g, _) = generate_scenario(&ScenarioSpec::grid(9, 2)).unwrap();
        let rot_sys = build_rotation_system(&g).unwrap();
        for (scheme, gamma, flagged) in [
            (Scheme::GaussSeidel, 1.0, true),
            (Scheme::Jacobi, 0.9, false),
            (Scheme::GaussSeidel, 1.3, false),
        ] {
            let config = SolverConfig {
                scheme,
                gamma,
                flagged_init: flagged,
                ..SolverConfig::dgs(1e-3)
            };
            let mut agents: Vec<RobotAgent> =
                (0..9).map(|r| RobotAgent::new(&g, &rot_sys, r)).collect();
            let mut ledger = CommunicationLedger::new(9);
            let (y, trace) =
                run_phase(&rot_sys, &mut agents, &config, Phase::Rotation, &mut ledger).unwrap();
            let (y_ref, trace_ref) = match scheme {
                Scheme::Jacobi => jor_solve(&rot_sys, &config, None).unwrap(),
                Scheme::GaussSeidel => sor_solve(&rot_sys, &config, None).unwrap(),
            };
            assert_eq!(y, y_ref);
            assert_eq!(trace, trace_ref);
        }
    }

    #[test]
    fn ledger_matches_closed_form_and_privacy_holds() {
        let (g, _) = generate_scenario(&ScenarioSpec::grid(9, 3)).unwrap();
        let res = run_distributed_two_stage(&g, &SolverConfig::dgs(1e-2)).unwrap();
        let k_r = res.rotation_trace.iterations;
        let k_p = res.pose_trace.iterations;
        for r in g.robots() {
            let s = res.separator_counts[r.0];
            let t = res.ledger.robot(r);
            assert_eq!(t.rotation.bytes, k_r * s * B_R);
            assert_eq!(t.pose.bytes, k_p * s * B_P);
            assert_eq!(t.rotation.bytes + t.pose.bytes, dgs_comm_model(s, k_r, k_p));
        }
        for (sender, receiver, v) in &res.ledger.transmitted {
            assert_eq!(v.robot, *sender);
            assert!(g
                .edges()
                .iter()
                .any(|e| (e.from == *v && e.to.robot == *receiver)
                    || (e.to == *v && e.from.robot == *receiver)));
        }
    }

    #[test]
    fn distributed_matches_centralized_at_tight_threshold() {
        let (g, _) = generate_scenario(&ScenarioSpec::grid(4, 4)).unwrap();
        let res = run_distributed_two_stage(&g, &SolverConfig::dgs(1e-8)).unwrap();
        let central = solve_two_stage(&g).unwrap();
        for (v, p) in &central.estimate {
            let q = &res.estimate[v];
            assert!((p.translation - q.translation).amax() < 1e-5, "{v}");
            assert!(
                (p.rotation.matrix() - q.rotation.matrix()).amax() < 1e-5,
                "{v}"
            );
        }
    }

    #[test]
    fn divergence_is_reported_with_partial_ledger() {
        let (g, _) = generate_scenario(&ScenarioSpec::grid(16, 5)).unwrap();
        let config = SolverConfig::dgs(1e-2).with_gamma(2.5);
        match run_distributed_two_stage(&g, &config) {
            Err(Error::Diverged { phase, ledger, .. }) => {
                assert_eq!(phase, "rotation");
                assert!(ledger.total_bytes() > 0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}

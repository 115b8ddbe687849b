//! Centralized baselines: the two-stage chordal method with direct solves
//! and a Gauss-Newton refiner on the chordal cost.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DVector, Matrix3, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::assembly::{
    apply_correction, build_pose_system, build_rotation_system, relaxed_rotations,
};
use crate::error::{Error, Result};
use crate::geometry::{exp_map, project_to_so3_checked, Pose, Rotation};
use crate::graph::{Estimate, MultiRobotGraph, VertexId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralizedResult {
    pub estimate: Estimate,
    pub cost: f64,
    /// Objective of the rotation relaxation at its minimizer (0 for GN).
    pub stage1_residual: f64,
    pub gn_iterations: usize,
    /// Set when a projection hit a rank-deficient block or GN stalled.
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussNewtonOptions {
    pub max_iterations: usize,
    /// Threshold on the norm of the stacked correction `(Δt, θ)`.
    pub tolerance: f64,
    pub max_halvings: usize,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        GaussNewtonOptions {
            max_iterations: 100,
            tolerance: 1e-8,
            max_halvings: 10,
        }
    }
}

/// Projects every relaxed rotation block; returns the rotations and how many
/// projections were rank deficient.
pub fn project_rotations(
    relaxed: &BTreeMap<VertexId, Matrix3<f64>>,
) -> (BTreeMap<VertexId, Rotation>, usize) {
    let mut deficient = 0;
    let rotations = relaxed
        .iter()
        .map(|(v, m)| {
            let p = project_to_so3_checked(m);
            if p.rank_deficient {
                deficient += 1;
            }
            (*v, p.rotation)
        })
        .collect();
    (rotations, deficient)
}

/// Stage 1 then a single Stage-2 linear solve, both with dense Cholesky.
pub fn solve_two_stage(graph: &MultiRobotGraph) -> Result<CentralizedResult> {
    let rot_sys = build_rotation_system(graph)?;
    let r = rot_sys.solve_dense()?;
    let stage1_residual = rot_sys.objective(&r).max(0.0);
    let (rotations, deficient) = project_rotations(&relaxed_rotations(graph, &rot_sys, &r)?);

    let pose_sys = build_pose_system(graph, &rotations)?;
    let p = pose_sys.solve_dense()?;
    let estimate = apply_correction(&pose_sys, &rotations, &p)?;
    let cost = graph.cost(&estimate)?;
    Ok(CentralizedResult {
        estimate,
        cost,
        stage1_residual,
        gn_iterations: 0,
        flagged: deficient > 0,
    })
}

fn retract(
    estimate: &Estimate,
    system_slots: &crate::system::BlockLinearSystem,
    step: &DVector<f64>,
    scale: f64,
) -> Estimate {
    let mut out = estimate.clone();
    for (v, pose) in out.iter_mut() {
        if let Some(range) = system_slots.vertex_range(v) {
            let s = step.rows_range(range);
            let dt = Vector3::new(s[0], s[1], s[2]) * scale;
            let theta = Vector3::new(s[3], s[4], s[5]) * scale;
            *pose = Pose::new(
                pose.rotation.compose(&exp_map(&theta)),
                pose.translation + dt,
            );
        }
    }
    out
}

/// Gauss-Newton on the chordal cost, relinearizing the pose system at the
/// current rotations. The anchor keeps its initial pose.
pub fn solve_gauss_newton(
    graph: &MultiRobotGraph,
    initial: &Estimate,
    options: &GaussNewtonOptions,
) -> Result<CentralizedResult> {
    for v in graph.vertices() {
        if !initial.contains_key(v) {
            return Err(Error::MissingEstimate(*v));
        }
    }
    let mut estimate: Estimate = graph.vertices().map(|v| (*v, initial[v])).collect();
    let mut cost = graph.cost(&estimate)?;
    let mut iterations = 0;
    let mut flagged = false;

    while iterations < options.max_iterations {
        let rotations: BTreeMap<VertexId, Rotation> =
            estimate.iter().map(|(v, p)| (*v, p.rotation)).collect();
        let sys = build_pose_system(graph, &rotations)?;
        let solution = sys.solve_dense()?;
        // the system solves for absolute translations; turn them into a step
        let mut step = solution.clone();
        for (v, pose) in &estimate {
            if let Some(range) = sys.vertex_range(v) {
                let mut dt = step.rows_mut(range.start, 3);
                dt -= pose.translation;
            }
        }
        if step.norm() <= options.tolerance {
            break;
        }
        iterations += 1;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let candidate = retract(&estimate, &sys, &step, scale);
            let c = graph.cost(&candidate)?;
            if c <= cost {
                accepted = Some((candidate, c));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((candidate, c)) => {
                let improvement = cost - c;
                estimate = candidate;
                cost = c;
                if scale < 1.0 && improvement <= f64::EPSILON * cost.max(1.0) {
                    break;
                }
            }
            None => {
                flagged = true;
                break;
            }
        }
    }
    Ok(CentralizedResult {
        estimate,
        cost,
        stage1_residual: 0.0,
        gn_iterations: iterations,
        flagged,
    })
}

/// Two-stage estimate refined by Gauss-Newton.
pub fn solve_two_stage_then_gn(
    graph: &MultiRobotGraph,
    options: &GaussNewtonOptions,
) -> Result<CentralizedResult> {
    let init = solve_two_stage(graph)?;
    let mut gn = solve_gauss_newton(graph, &init.estimate, options)?;
    gn.stage1_residual = init.stage1_residual;
    Ok(gn)
}

/// Gradient of the chordal cost with respect to `(δt, δθ)` at every free
/// vertex, where the perturbed pose is `(R Exp(δθ), t + δt)`.
pub fn cost_gradient(
    graph: &MultiRobotGraph,
    estimate: &Estimate,
) -> Result<BTreeMap<VertexId, SVector<f64, 6>>> {
    let rotations: BTreeMap<VertexId, Rotation> = graph
        .vertices()
        .map(|v| {
            estimate
                .get(v)
                .map(|p| (*v, p.rotation))
                .ok_or(Error::MissingEstimate(*v))
        })
        .collect::<Result<_>>()?;
    let sys = build_pose_system(graph, &rotations)?;
    // the linearized model matches the cost to first order at θ = 0
    let mut y = DVector::zeros(sys.dim());
    for (v, pose) in estimate {
        if let Some(range) = sys.vertex_range(v) {
            y.rows_mut(range.start, 3).copy_from(&pose.translation);
        }
    }
    let grad = (sys.multiply(&y) - sys.rhs()) * 2.0;
    let mut out = BTreeMap::new();
    for v in graph.vertices() {
        if let Some(range) = sys.vertex_range(v) {
            out.insert(
                *v,
                SVector::<f64, 6>::from_iterator(grad.rows_range(range).iter().copied()),
            );
        }
    }
    Ok(out)
}

/// Chains measurements along a breadth-first spanning tree from the anchor,
/// preferring odometry edges. Serves as the naive initial guess.
pub fn spanning_tree_estimate(graph: &MultiRobotGraph) -> Result<Estimate> {
    graph.validate()?;
    let mut adjacency: BTreeMap<VertexId, Vec<(usize, bool)>> = BTreeMap::new();
    let mut order: Vec<usize> = (0..graph.edges().len()).collect();
    order.sort_by_key(|&i| graph.edges()[i].kind != crate::graph::EdgeKind::Odometry);
    for i in order {
        let e = &graph.edges()[i];
        adjacency.entry(e.from).or_default().push((i, true));
        adjacency.entry(e.to).or_default().push((i, false));
    }
    let mut estimate = Estimate::new();
    let anchor = graph.anchor();
    estimate.insert(anchor, Pose::identity());
    let mut queue = VecDeque::from([anchor]);
    while let Some(v) = queue.pop_front() {
        let here = estimate[&v];
        for &(i, forward) in adjacency.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            let e = &graph.edges()[i];
            let (other, pose) = if forward {
                (e.to, here.compose(&e.relative_pose()))
            } else {
                (e.from, here.compose(&e.relative_pose().inverse()))
            };
            if let std::collections::btree_map::Entry::Vacant(slot) = estimate.entry(other) {
                slot.insert(pose);
                queue.push_back(other);
            }
        }
    }
    Ok(estimate)
}

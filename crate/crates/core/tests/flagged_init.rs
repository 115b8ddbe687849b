use dpgo::assembly::{build_pose_system, build_rotation_system};
use dpgo::centralized::solve_two_stage;
use dpgo::runtime::{generate_scenario, ScenarioSpec};
use dpgo::solvers::{flagged_initialize, sor_solve, SolverConfig};
use dpgo::{MultiRobotGraph, RobotId};

fn robot_zero_subgraph(g: &MultiRobotGraph) -> MultiRobotGraph {
    let mut sub = MultiRobotGraph::new(1);
    for v in g.robot_vertices(RobotId(0)) {
        sub.add_vertex(*v, None).unwrap();
    }
    for e in g
        .edges()
        .iter()
        .filter(|e| e.from.robot.0 == 0 && e.to.robot.0 == 0)
    {
        sub.add_edge(e.clone()).unwrap();
    }
    sub
}

#[test]
fn first_robot_solves_its_own_subgraph() {
    let (g, _) = generate_scenario(&ScenarioSpec::grid(4, 11)).unwrap();
    let sub = robot_zero_subgraph(&g);

    let rot = build_rotation_system(&g).unwrap();
    let y = flagged_initialize(&rot, &[0, 1, 2, 3]).unwrap();
    let oracle = build_rotation_system(&sub).unwrap().solve_dense().unwrap();
    let r0 = rot.robot_range(0);
    assert!((y.rows(r0.start, r0.len()) - &oracle).amax() < 1e-10);

    // the pose stage, linearized at the subgraph's own rotations
    let central = solve_two_stage(&sub).unwrap();
    let rotations = central
        .estimate
        .iter()
        .map(|(v, p)| (*v, p.rotation))
        .collect();
    let mut full_rotations = solve_two_stage(&g)
        .unwrap()
        .estimate
        .iter()
        .map(|(v, p)| (*v, p.rotation))
        .collect::<std::collections::BTreeMap<_, _>>();
    full_rotations.extend(&rotations);
    let pose = build_pose_system(&g, &full_rotations).unwrap();
    let p = flagged_initialize(&pose, &[0, 1, 2, 3]).unwrap();
    let oracle = build_pose_system(&sub, &rotations)
        .unwrap()
        .solve_dense()
        .unwrap();
    let p0 = pose.robot_range(0);
    assert!((p.rows(p0.start, p0.len()) - &oracle).amax() < 1e-9);
}

#[test]
fn flagged_sweep_differs_from_a_sweep_from_zero() {
    let (g, _) = generate_scenario(&ScenarioSpec::grid(9, 3)).unwrap();
    let rot = build_rotation_system(&g).unwrap();
    let order: Vec<usize> = (0..9).collect();
    let flagged = flagged_initialize(&rot, &order).unwrap();
    let mut one_sweep = SolverConfig::dgs(1e-12);
    one_sweep.flagged_init = false;
    one_sweep.max_iterations = 1;
    let (zero, _) = sor_solve(&rot, &one_sweep, None).unwrap();
    assert!((flagged - zero).amax() > 1e-3);
}

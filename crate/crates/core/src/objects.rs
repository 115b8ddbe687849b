//! Object landmarks: object-pose factors, nearest-object data association,
//! rendezvous map sharing and a synthetic detection front-end.
//!
//! Landmarks of different robots are distinct variables; a shared object
//! is tied across robots by an object-object edge with zero relative pose.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix6, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centralized::solve_two_stage;
use crate::error::{Error, Result};
use crate::geometry::{exp_map, Pose, Rotation};
use crate::graph::{
    compose_measurement, sample_noise, Estimate, MultiRobotGraph, RelativeMeasurement, RobotId,
    VertexId, Weights, SIGMA_R_FLOOR, SIGMA_T_FLOOR,
};
use crate::runtime::{
    run_distributed_two_stage, CommunicationLedger, DistributedResult, B_P, LABEL_BYTES,
};
use crate::solvers::SolverConfig;

pub type ObjectLabel = u32;

/// Default association gate in meters.
pub const DEFAULT_GATE_DISTANCE: f64 = 0.5;
/// Gate of the synthetic scene: about two standard deviations of the
/// disagreement between two sightings at the default range and noise.
pub const SCENE_GATE_DISTANCE: f64 = 1.0;
/// Default per-axis information of object-object edges.
pub const DEFAULT_OBJECT_INFORMATION: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLandmark {
    pub id: VertexId,
    pub label: ObjectLabel,
    /// Pose in the owner's frame.
    pub pose: Pose,
}

impl ObjectLandmark {
    pub fn owner(&self) -> RobotId {
        self.id.robot
    }
}

/// A robot's object map, expressed in the frame of its first pose.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectMap {
    pub landmarks: Vec<ObjectLandmark>,
}

impl ObjectMap {
    pub fn get(&self, id: &VertexId) -> Option<&ObjectLandmark> {
        self.landmarks.iter().find(|l| l.id == *id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedObjectPair {
    pub a: VertexId,
    pub b: VertexId,
    pub label: ObjectLabel,
    /// Information of the zero-relative-pose constraint, ordered (t, θ).
    pub information: Matrix6<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub pose: VertexId,
    /// Index of the observed scene object; `None` for false positives.
    pub true_object: Option<usize>,
    pub label: ObjectLabel,
    pub measurement: Pose,
    pub false_positive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Association {
    Matched(VertexId),
    NewLandmark,
}

/// Isotropic weights from a 6×6 information matrix ordered (t, θ): each
/// weight is the mean diagonal entry of its 3×3 block.
pub fn weights_from_information(information: &Matrix6<f64>) -> Result<Weights> {
    if (information - information.transpose()).amax() > 1e-9 * information.amax().max(1.0) {
        return Err(Error::InvalidConfig(
            "information matrix is not symmetric".into(),
        ));
    }
    if information.cholesky().is_none() {
        return Err(Error::InvalidConfig(
            "information matrix is not positive definite".into(),
        ));
    }
    let t: Matrix3<f64> = information.fixed_view::<3, 3>(0, 0).into();
    let r: Matrix3<f64> = information.fixed_view::<3, 3>(3, 3).into();
    Ok(Weights::new(t.trace() / 3.0, r.trace() / 3.0))
}

/// Isotropic weights from a 6×6 covariance ordered (t, θ).
pub fn weights_from_covariance(covariance: &Matrix6<f64>) -> Result<Weights> {
    let chol = covariance
        .cholesky()
        .ok_or_else(|| Error::InvalidConfig("covariance is not positive definite".into()))?;
    weights_from_information(&chol.inverse())
}

/// Covariance `diag(σ_t² I₃, σ_R² I₃)`.
pub fn isotropic_covariance(sigma_r: f64, sigma_t: f64) -> Matrix6<f64> {
    let mut diag = nalgebra::Vector6::repeat(sigma_t * sigma_t);
    diag.fixed_rows_mut::<3>(3).fill(sigma_r * sigma_r);
    Matrix6::from_diagonal(&diag)
}

/// Appends the object-pose factor `z` between a robot pose and one of the
/// same robot's landmarks.
pub fn add_object_pose_factor(
    graph: &mut MultiRobotGraph,
    pose: VertexId,
    object: VertexId,
    z: &Pose,
    covariance: &Matrix6<f64>,
) -> Result<usize> {
    for v in [&pose, &object] {
        if !graph.contains(v) {
            return Err(Error::UnknownVertex(*v));
        }
    }
    let weights = weights_from_covariance(covariance)?;
    let edge =
        RelativeMeasurement::new(pose, object, *z, weights).ok_or_else(|| Error::InvalidEdge {
            index: graph.edges().len(),
            reason: format!("{pose} -> {object} is not an object-pose pair"),
        })?;
    graph.add_edge(edge)
}

/// Nearest same-label landmark within `gate_distance`; ties go to the
/// lowest landmark id.
pub fn associate_objects(
    label: ObjectLabel,
    position: &Vector3<f64>,
    map: &ObjectMap,
    gate_distance: f64,
) -> Association {
    let mut best: Option<(f64, VertexId)> = None;
    for l in map.landmarks.iter().filter(|l| l.label == label) {
        let d = (l.pose.translation - position).norm();
        if d > gate_distance {
            continue;
        }
        let better = match best {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && l.id < bid),
        };
        if better {
            best = Some((d, l.id));
        }
    }
    best.map_or(Association::NewLandmark, |(_, id)| Association::Matched(id))
}

/// Robot `a` sends its whole object map to `b`; `b` moves it into its own
/// frame with the known initial poses, associates each object against its
/// map and adds one object-object edge per pair. Each landmark of `b` is
/// paired at most once.
pub fn rendezvous_share(
    graph: &mut MultiRobotGraph,
    a: &ObjectMap,
    b: &ObjectMap,
    initial_poses: &BTreeMap<RobotId, Pose>,
    gate_distance: f64,
    information: &Matrix6<f64>,
    ledger: &mut CommunicationLedger,
) -> Result<Vec<SharedObjectPair>> {
    if !(gate_distance > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "gate distance must be positive, got {gate_distance}"
        )));
    }
    let weights = weights_from_information(information)?;
    let (Some(first_a), Some(first_b)) = (a.landmarks.first(), b.landmarks.first()) else {
        return Ok(Vec::new());
    };
    let (ra, rb) = (first_a.owner(), first_b.owner());
    let lookup = |r: RobotId| {
        initial_poses
            .get(&r)
            .ok_or_else(|| Error::InvalidConfig(format!("no initial pose for robot {r}")))
    };
    let a_to_b = lookup(rb)?.inverse().compose(lookup(ra)?);

    ledger.record_objects(ra, a.landmarks.len() * (LABEL_BYTES + B_P));
    ledger.record_rendezvous(ra, rb);

    let mut remaining = b.clone();
    let mut pairs = Vec::new();
    for obj in &a.landmarks {
        let position = a_to_b.transform_point(&obj.pose.translation);
        if let Association::Matched(id) =
            associate_objects(obj.label, &position, &remaining, gate_distance)
        {
            remaining.landmarks.retain(|l| l.id != id);
            let edge = RelativeMeasurement::new(obj.id, id, Pose::identity(), weights).ok_or_else(
                || Error::InvalidEdge {
                    index: graph.edges().len(),
                    reason: format!("{} -> {id} is not an object-object pair", obj.id),
                },
            )?;
            graph.add_edge(edge)?;
            pairs.push(SharedObjectPair {
                a: obj.id,
                b: id,
                label: obj.label,
                information: *information,
            });
        }
    }
    Ok(pairs)
}

/// Object landmarks ride in their owner's block, so the augmented graph goes
/// through the same two-stage distributed pipeline.
pub fn solve_object_slam_distributed(
    graph: &MultiRobotGraph,
    config: &SolverConfig,
) -> Result<DistributedResult> {
    run_distributed_two_stage(graph, config)
}

/// Per-robot storage and rendezvous traffic of an object map compared with
/// a dense point cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    /// `n_o`
    pub object_count: usize,
    /// `P`, mean points per object model.
    pub points_per_object: usize,
    /// `n_f`
    pub frame_count: usize,
    /// `K`
    pub points_per_frame: usize,
    /// `C`
    pub bytes_per_point: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub object_map_bytes: u128,
    pub point_cloud_bytes: u128,
    /// Point cloud over object map.
    pub ratio: f64,
}

impl MemoryModel {
    pub fn object_map_bytes(&self) -> u128 {
        self.object_count as u128 * self.points_per_object as u128 * self.bytes_per_point as u128
    }

    pub fn point_cloud_bytes(&self) -> u128 {
        self.frame_count as u128 * self.points_per_frame as u128 * self.bytes_per_point as u128
    }

    /// Upper bound on object-map traffic per rendezvous: `n_o L`.
    pub fn object_share_bytes(&self) -> u128 {
        self.object_count as u128 * (LABEL_BYTES + B_P) as u128
    }

    /// One dense frame per rendezvous: `n_c K C`.
    pub fn point_cloud_share_bytes(&self, rendezvous: usize) -> u128 {
        rendezvous as u128 * self.points_per_frame as u128 * self.bytes_per_point as u128
    }

    pub fn report(&self) -> MemoryReport {
        let object_map_bytes = self.object_map_bytes();
        let point_cloud_bytes = self.point_cloud_bytes();
        MemoryReport {
            object_map_bytes,
            point_cloud_bytes,
            ratio: point_cloud_bytes as f64 / object_map_bytes.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSceneSpec {
    pub robot_count: usize,
    pub poses_per_robot: usize,
    pub object_count: usize,
    /// Degrees.
    pub sigma_r: f64,
    /// Meters.
    pub sigma_t: f64,
    pub detection_range: f64,
    pub false_positive_rate: f64,
    pub gate_distance: f64,
    /// Per-axis information of object-object edges.
    pub object_information: f64,
    pub rng_seed: u64,
}

impl ObjectSceneSpec {
    pub fn new(seed: u64) -> Self {
        ObjectSceneSpec {
            robot_count: 2,
            poses_per_robot: 16,
            object_count: 5,
            sigma_r: 5.0,
            sigma_t: 0.1,
            detection_range: 3.0,
            false_positive_rate: 0.0,
            gate_distance: SCENE_GATE_DISTANCE,
            object_information: DEFAULT_OBJECT_INFORMATION,
            rng_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidScenario(m.into()));
        if self.robot_count < 1 || self.poses_per_robot < 2 {
            return bad("need at least one robot with two poses");
        }
        if self.object_count == 0 {
            return bad("need at least one object");
        }
        if !(self.sigma_r >= 0.0 && self.sigma_t >= 0.0) {
            return bad("noise must be nonnegative");
        }
        if !(self.detection_range > 0.0
            && self.gate_distance > 0.0
            && self.object_information > 0.0)
        {
            return bad("range, gate and object information must be positive");
        }
        if !(0.0..=1.0).contains(&self.false_positive_rate) {
            return bad("false positive rate must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn object_information_matrix(&self) -> Matrix6<f64> {
        Matrix6::identity() * self.object_information
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectScenario {
    pub graph: MultiRobotGraph,
    /// Ground truth in the anchor frame; false-positive landmarks have none.
    pub truth: Estimate,
    pub maps: Vec<ObjectMap>,
    pub detections: Vec<DetectionEvent>,
    pub initial_poses: BTreeMap<RobotId, Pose>,
    pub pairs: Vec<SharedObjectPair>,
    /// Traffic of the rendezvous object exchanges.
    pub ledger: CommunicationLedger,
}

impl ObjectScenario {
    pub fn pose_vertices(&self) -> Vec<VertexId> {
        self.graph
            .vertices()
            .filter(|v| v.is_pose())
            .copied()
            .collect()
    }

    pub fn landmark_vertices(&self) -> Vec<VertexId> {
        self.graph
            .vertices()
            .filter(|v| !v.is_pose())
            .copied()
            .collect()
    }
}

const LABELS: [ObjectLabel; 5] = [0, 1, 2, 0, 1];

fn scene_objects(count: usize, rng: &mut ChaCha8Rng) -> Vec<(ObjectLabel, Pose)> {
    (0..count)
        .map(|k| {
            let x = 0.6 + 1.3 * k as f64;
            let y = if k % 2 == 0 { 1.2 } else { 1.8 };
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            (
                LABELS[k % LABELS.len()],
                Pose::new(Rotation::about_z(yaw), Vector3::new(x, y, 0.3)),
            )
        })
        .collect()
}

/// Each robot drives one lap of an ellipse around the row of objects,
/// alternating direction and starting point.
fn robot_trajectory(robot: usize, poses: usize, span: f64) -> Vec<Pose> {
    let center = Vector3::new(span / 2.0, 1.5, 0.0);
    let (ax, ay) = (span / 2.0 + 1.0, 2.0);
    let dir = if robot % 2 == 0 { 1.0 } else { -1.0 };
    let phase = std::f64::consts::PI * robot as f64 / 2.0;
    (0..poses)
        .map(|i| {
            let s = phase + dir * std::f64::consts::TAU * i as f64 / poses as f64;
            let p = center + Vector3::new(ax * s.cos(), ay * s.sin(), 0.0);
            let heading = Vector3::new(-ax * s.sin(), ay * s.cos(), 0.0) * dir;
            Pose::new(Rotation::about_z(heading.y.atan2(heading.x)), p)
        })
        .collect()
}

fn noisy(rng: &mut ChaCha8Rng, a: &Pose, b: &Pose, sigma_r: f64, sigma_t: f64) -> Pose {
    let (nr, nt) = sample_noise(rng, sigma_r, sigma_t);
    let (r, t) = compose_measurement(a, b, &nr, &nt);
    Pose::new(r, t)
}

/// Re-estimates a robot's landmarks from its own odometry and detections,
/// in the frame of its first pose.
fn refine_local_map(graph: &MultiRobotGraph, robot: RobotId, map: &mut ObjectMap) -> Result<()> {
    let relabel = |v: &VertexId| VertexId {
        robot: RobotId(0),
        ..*v
    };
    let mut local = MultiRobotGraph::new(1);
    for v in graph.robot_vertices(robot) {
        local.add_vertex(relabel(v), None)?;
    }
    for e in graph
        .edges()
        .iter()
        .filter(|e| e.from.robot == robot && e.to.robot == robot)
    {
        let mut e = e.clone();
        e.from = relabel(&e.from);
        e.to = relabel(&e.to);
        local.add_edge(e)?;
    }
    let solved = solve_two_stage(&local)?;
    for l in &mut map.landmarks {
        l.pose = solved.estimate[&relabel(&l.id)];
    }
    Ok(())
}

/// Synthetic team: each robot builds its object map from noisy odometry and
/// detections, then every pair `a < b` meets once and `a` shares its map
/// with `b`.
pub fn generate_object_scenario(spec: &ObjectSceneSpec) -> Result<ObjectScenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let (sigma_r, sigma_t) = (spec.sigma_r.to_radians(), spec.sigma_t);
    let objects = scene_objects(spec.object_count, &mut rng);
    let span = 0.6 + 1.3 * (spec.object_count - 1) as f64;
    let covariance = isotropic_covariance(sigma_r.max(SIGMA_R_FLOOR), sigma_t.max(SIGMA_T_FLOOR));
    let odom_weights = Weights::from_sigmas(sigma_r, sigma_t);

    let mut graph = MultiRobotGraph::new(spec.robot_count);
    let mut truth = Estimate::new();
    let mut maps = Vec::new();
    let mut detections = Vec::new();
    let mut initial_poses = BTreeMap::new();

    for r in 0..spec.robot_count {
        let world = robot_trajectory(r, spec.poses_per_robot, span);
        let origin = world[0];
        initial_poses.insert(RobotId(r), origin);
        let mut map = ObjectMap::default();
        // dead-reckoned pose in the robot's own frame
        let mut odom = Pose::identity();
        for (i, x) in world.iter().enumerate() {
            let id = VertexId::pose(r, i);
            graph.add_vertex(id, None)?;
            truth.insert(id, *x);
            if i > 0 {
                let z = noisy(&mut rng, &world[i - 1], x, sigma_r, sigma_t);
                odom = odom.compose(&z);
                let edge = RelativeMeasurement::new(VertexId::pose(r, i - 1), id, z, odom_weights)
                    .expect("consecutive poses form an odometry edge");
                graph.add_edge(edge)?;
            }

            let mut seen: Vec<DetectionEvent> = objects
                .iter()
                .enumerate()
                .filter(|(_, (_, o))| {
                    (o.translation - x.translation).norm() <= spec.detection_range
                })
                .map(|(k, (label, o))| DetectionEvent {
                    pose: id,
                    true_object: Some(k),
                    label: *label,
                    measurement: noisy(&mut rng, x, o, sigma_r, sigma_t),
                    false_positive: false,
                })
                .collect();
            if rng.random::<f64>() < spec.false_positive_rate {
                let fake = Pose::new(
                    exp_map(&Vector3::new(0.0, 0.0, rng.random_range(-3.0..3.0))),
                    Vector3::new(rng.random_range(0.5..2.5), rng.random_range(-1.5..1.5), 0.3),
                );
                seen.push(DetectionEvent {
                    pose: id,
                    true_object: None,
                    label: LABELS[rng.random_range(0..LABELS.len())],
                    measurement: fake,
                    false_positive: true,
                });
            }

            for det in seen {
                let guess = odom.compose(&det.measurement);
                let landmark = match associate_objects(
                    det.label,
                    &guess.translation,
                    &map,
                    spec.gate_distance,
                ) {
                    Association::Matched(l) => {
                        // track the latest sighting so drift between sightings stays small
                        if let Some(m) = map.landmarks.iter_mut().find(|m| m.id == l) {
                            m.pose = guess;
                        }
                        l
                    }
                    Association::NewLandmark => {
                        let l = VertexId::object(r, map.landmarks.len());
                        graph.add_vertex(l, None)?;
                        if let Some(k) = det.true_object {
                            truth.insert(l, objects[k].1);
                        }
                        map.landmarks.push(ObjectLandmark {
                            id: l,
                            label: det.label,
                            pose: guess,
                        });
                        l
                    }
                };
                add_object_pose_factor(&mut graph, id, landmark, &det.measurement, &covariance)?;
                detections.push(det);
            }
        }
        refine_local_map(&graph, RobotId(r), &mut map)?;
        maps.push(map);
    }

    let information = spec.object_information_matrix();
    let mut ledger = CommunicationLedger::new(spec.robot_count);
    let mut pairs = Vec::new();
    for a in 0..spec.robot_count {
        for b in a + 1..spec.robot_count {
            pairs.extend(rendezvous_share(
                &mut graph,
                &maps[a],
                &maps[b],
                &initial_poses,
                spec.gate_distance,
                &information,
                &mut ledger,
            )?);
        }
    }

    // truth relative to the anchor, which the solvers fix at the identity
    let anchor_inv = truth[&graph.anchor()].inverse();
    for p in truth.values_mut() {
        *p = anchor_inv.compose(p);
    }
    Ok(ObjectScenario {
        graph,
        truth,
        maps,
        detections,
        initial_poses,
        pairs,
        ledger,
    })
}

//! Multi-robot measurement graph and the chordal cost.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{chordal_residual, exp_map, AxisAngle, Pose, Rotation};

/// Dense robot index, `0..robot_count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RobotId(pub usize);

impl fmt::Display for RobotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VertexKind {
    RobotPose,
    ObjectLandmark,
}

/// A pose variable. Ordering is (robot, kind, index), which is also the
/// variable order inside each robot's block of the linear systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VertexId {
    pub robot: RobotId,
    pub kind: VertexKind,
    pub index: usize,
}

impl VertexId {
    pub fn pose(robot: usize, index: usize) -> Self {
        VertexId {
            robot: RobotId(robot),
            kind: VertexKind::RobotPose,
            index,
        }
    }

    pub fn object(robot: usize, index: usize) -> Self {
        VertexId {
            robot: RobotId(robot),
            kind: VertexKind::ObjectLandmark,
            index,
        }
    }

    pub fn is_pose(&self) -> bool {
        self.kind == VertexKind::RobotPose
    }
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            VertexKind::RobotPose => "x",
            VertexKind::ObjectLandmark => "o",
        };
        write!(f, "{}{}_{}", tag, self.robot.0, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    Odometry,
    LoopClosure,
    InterRobot,
    ObjectPose,
    ObjectObject,
}

impl EdgeKind {
    /// Kind implied by the endpoints. Same-robot pose pairs with consecutive
    /// indices are odometry, other same-robot pose pairs loop closures.
    pub fn infer(from: &VertexId, to: &VertexId) -> Option<EdgeKind> {
        use VertexKind::*;
        match (from.kind, to.kind) {
            (RobotPose, RobotPose) if from.robot != to.robot => Some(EdgeKind::InterRobot),
            (RobotPose, RobotPose) if from.index.abs_diff(to.index) == 1 => {
                Some(EdgeKind::Odometry)
            }
            (RobotPose, RobotPose) if from.index != to.index => Some(EdgeKind::LoopClosure),
            (RobotPose, ObjectLandmark) | (ObjectLandmark, RobotPose) if from.robot == to.robot => {
                Some(EdgeKind::ObjectPose)
            }
            (ObjectLandmark, ObjectLandmark) if from.robot != to.robot => {
                Some(EdgeKind::ObjectObject)
            }
            _ => None,
        }
    }

    pub fn is_separator(&self) -> bool {
        matches!(self, EdgeKind::InterRobot | EdgeKind::ObjectObject)
    }
}

/// Isotropic measurement weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    /// Translation information, 1/m².
    pub omega_t_sq: f64,
    /// Rotation concentration.
    pub omega_r_sq: f64,
}

/// Standard deviations below these floors are clamped when turned into
/// weights, so noise-free simulations still get finite information.
pub const SIGMA_R_FLOOR: f64 = 1e-2;
pub const SIGMA_T_FLOOR: f64 = 1e-2;

impl Weights {
    pub fn new(omega_t_sq: f64, omega_r_sq: f64) -> Self {
        Weights {
            omega_t_sq,
            omega_r_sq,
        }
    }

    /// `ω_t² = 1/σ_t²`, `ω_R² = 1/σ_R²` with `sigma_r` in radians.
    pub fn from_sigmas(sigma_r: f64, sigma_t: f64) -> Self {
        let sr = sigma_r.max(SIGMA_R_FLOOR);
        let st = sigma_t.max(SIGMA_T_FLOOR);
        Weights::new(1.0 / (st * st), 1.0 / (sr * sr))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Weights::new(self.omega_t_sq * factor, self.omega_r_sq * factor)
    }
}

/// Relative pose measurement between two vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeMeasurement {
    pub from: VertexId,
    pub to: VertexId,
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
    pub weights: Weights,
    pub kind: EdgeKind,
}

impl RelativeMeasurement {
    /// Builds an edge whose kind is inferred from the endpoints.
    pub fn new(from: VertexId, to: VertexId, relative: Pose, weights: Weights) -> Option<Self> {
        EdgeKind::infer(&from, &to).map(|kind| RelativeMeasurement {
            from,
            to,
            rotation: relative.rotation,
            translation: relative.translation,
            weights,
            kind,
        })
    }

    pub fn relative_pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }

    pub fn touches(&self, robot: RobotId) -> bool {
        self.from.robot == robot || self.to.robot == robot
    }

    /// Summand of the chordal cost for this edge.
    pub fn cost(&self, x_from: &Pose, x_to: &Pose) -> f64 {
        let t_res =
            x_to.translation - x_from.translation - x_from.rotation.rotate(&self.translation);
        self.weights.omega_t_sq * t_res.norm_squared()
            + 0.5
                * self.weights.omega_r_sq
                * chordal_residual(&x_from.rotation, &x_to.rotation, &self.rotation)
    }
}

/// Per-vertex estimate.
pub type Estimate = BTreeMap<VertexId, Pose>;

/// Measurement graph shared by a team of robots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiRobotGraph {
    robot_count: usize,
    vertices: BTreeMap<VertexId, Option<Pose>>,
    edges: Vec<RelativeMeasurement>,
    anchor: VertexId,
}

impl MultiRobotGraph {
    /// Empty graph whose anchor is the first pose of robot 0.
    pub fn new(robot_count: usize) -> Self {
        MultiRobotGraph {
            robot_count,
            vertices: BTreeMap::new(),
            edges: Vec::new(),
            anchor: VertexId::pose(0, 0),
        }
    }

    pub fn robot_count(&self) -> usize {
        self.robot_count
    }

    pub fn robots(&self) -> impl Iterator<Item = RobotId> {
        (0..self.robot_count).map(RobotId)
    }

    pub fn anchor(&self) -> VertexId {
        self.anchor
    }

    pub fn set_anchor(&mut self, anchor: VertexId) -> Result<()> {
        if !anchor.is_pose() {
            return Err(Error::InvalidAnchor(format!(
                "{anchor} is not a robot pose"
            )));
        }
        self.anchor = anchor;
        Ok(())
    }

    pub fn add_vertex(&mut self, id: VertexId, initial: Option<Pose>) -> Result<()> {
        if id.robot.0 >= self.robot_count {
            return Err(Error::UnknownVertex(id));
        }
        self.vertices.insert(id, initial);
        Ok(())
    }

    pub fn contains(&self, id: &VertexId) -> bool {
        self.vertices.contains_key(id)
    }

    pub fn vertices(&self) -> impl Iterator<Item = &VertexId> {
        self.vertices.keys()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn initial_pose(&self, id: &VertexId) -> Option<Pose> {
        self.vertices.get(id).copied().flatten()
    }

    /// Vertices owned by `robot`, in variable order.
    pub fn robot_vertices(&self, robot: RobotId) -> impl Iterator<Item = &VertexId> {
        self.vertices.keys().filter(move |v| v.robot == robot)
    }

    pub fn edges(&self) -> &[RelativeMeasurement] {
        &self.edges
    }

    /// Appends an edge after checking its endpoints, weights and kind.
    pub fn add_edge(&mut self, edge: RelativeMeasurement) -> Result<usize> {
        let index = self.edges.len();
        let invalid = |reason: String| Error::InvalidEdge { index, reason };
        for v in [&edge.from, &edge.to] {
            if !self.contains(v) {
                return Err(Error::UnknownVertex(*v));
            }
        }
        let w = edge.weights;
        if !(w.omega_t_sq > 0.0
            && w.omega_r_sq > 0.0
            && w.omega_t_sq.is_finite()
            && w.omega_r_sq.is_finite())
        {
            return Err(invalid(format!("weights must be positive, got {w:?}")));
        }
        if !edge.translation.iter().all(|x| x.is_finite()) || !edge.rotation.is_valid(1e-6) {
            return Err(invalid("measurement is not a valid rigid transform".into()));
        }
        match EdgeKind::infer(&edge.from, &edge.to) {
            Some(k) if k == edge.kind => {}
            // loop closures between consecutive poses are still loop closures
            Some(EdgeKind::Odometry) if edge.kind == EdgeKind::LoopClosure => {}
            Some(k) => {
                return Err(invalid(format!(
                    "{:?} edge has {:?} endpoints",
                    edge.kind, k
                )))
            }
            None => {
                return Err(invalid(format!(
                    "endpoints {} and {} cannot be related",
                    edge.from, edge.to
                )))
            }
        }
        self.edges.push(edge);
        Ok(index)
    }

    /// Checks the global invariants: anchor, edges present, connectivity.
    pub fn validate(&self) -> Result<()> {
        if !self.anchor.is_pose() || !self.contains(&self.anchor) {
            return Err(Error::InvalidAnchor(format!(
                "{} is not a pose of the graph",
                self.anchor
            )));
        }
        if self.edges.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let unreachable = self.vertex_count() - self.reachable_from_anchor().len();
        if unreachable > 0 {
            return Err(Error::Disconnected { unreachable });
        }
        Ok(())
    }

    fn reachable_from_anchor(&self) -> BTreeSet<VertexId> {
        let mut adjacency: BTreeMap<VertexId, Vec<VertexId>> = BTreeMap::new();
        for e in &self.edges {
            adjacency.entry(e.from).or_default().push(e.to);
            adjacency.entry(e.to).or_default().push(e.from);
        }
        let mut seen = BTreeSet::from([self.anchor]);
        let mut stack = vec![self.anchor];
        while let Some(v) = stack.pop() {
            for n in adjacency.get(&v).into_iter().flatten() {
                if seen.insert(*n) {
                    stack.push(*n);
                }
            }
        }
        seen
    }

    /// Splits the edges touching `robot` into intra-robot and separator edges
    /// (indices into [`Self::edges`]).
    pub fn partition_edges(&self, robot: RobotId) -> EdgePartition {
        let mut partition = EdgePartition::default();
        for (i, e) in self.edges.iter().enumerate() {
            match (e.from.robot == robot, e.to.robot == robot) {
                (true, true) => partition.intra.push(i),
                (true, false) | (false, true) => partition.separators.push(i),
                (false, false) => {}
            }
        }
        partition
    }

    /// Own vertices of `robot` that must be sent to each neighbor: for every
    /// neighboring robot, the set of `robot`'s vertices joined to it by a
    /// separator edge.
    pub fn separator_vertices(&self, robot: RobotId) -> BTreeMap<RobotId, BTreeSet<VertexId>> {
        let mut out: BTreeMap<RobotId, BTreeSet<VertexId>> = BTreeMap::new();
        for e in &self.edges {
            if e.from.robot == e.to.robot {
                continue;
            }
            if e.from.robot == robot {
                out.entry(e.to.robot).or_default().insert(e.from);
            } else if e.to.robot == robot {
                out.entry(e.from.robot).or_default().insert(e.to);
            }
        }
        out
    }

    /// Number of separator values `robot` sends per iteration: one per own
    /// separator vertex per neighboring robot.
    pub fn separator_count(&self, robot: RobotId) -> usize {
        self.separator_vertices(robot)
            .values()
            .map(BTreeSet::len)
            .sum()
    }

    /// Sum of the per-edge chordal cost summands.
    pub fn cost(&self, estimate: &Estimate) -> Result<f64> {
        graph_cost(self, estimate)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgePartition {
    pub intra: Vec<usize>,
    pub separators: Vec<usize>,
}

/// Measurement model: relative pose of `x_b` seen from `x_a`, perturbed by
/// a right-multiplied rotation noise and additive translation noise.
pub fn compose_measurement(
    x_a: &Pose,
    x_b: &Pose,
    noise_rot: &AxisAngle,
    noise_trans: &Vector3<f64>,
) -> (Rotation, Vector3<f64>) {
    let rat = x_a.rotation.transpose();
    let rotation = rat.compose(&x_b.rotation).compose(&exp_map(noise_rot));
    let translation = rat.rotate(&(x_b.translation - x_a.translation)) + noise_trans;
    (rotation, translation)
}

/// Draws isotropic noise: rotation `η ~ N(0, σ_R² I₃)` (axis-angle) and
/// translation `N(0, σ_t² I₃)`.
pub fn sample_noise<R: Rng + ?Sized>(
    rng: &mut R,
    sigma_r: f64,
    sigma_t: f64,
) -> (AxisAngle, Vector3<f64>) {
    let mut draw = |sigma: f64| -> Vector3<f64> {
        if sigma <= 0.0 {
            return Vector3::zeros();
        }
        let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
        Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng))
    };
    let rot = draw(sigma_r);
    let trans = draw(sigma_t);
    (rot, trans)
}

/// `Σ ω_t²‖t_b − t_a − R_a t̄‖² + ω_R²/2 ‖R_b − R_a R̄‖_F²` over all edges.
pub fn graph_cost(graph: &MultiRobotGraph, estimate: &Estimate) -> Result<f64> {
    graph.edges.iter().try_fold(0.0, |acc, e| {
        let a = estimate
            .get(&e.from)
            .ok_or(Error::MissingEstimate(e.from))?;
        let b = estimate.get(&e.to).ok_or(Error::MissingEstimate(e.to))?;
        Ok(acc + e.cost(a, b))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_map;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(
        robot_count: usize,
        poses: usize,
        rng: &mut ChaCha8Rng,
        noisy: bool,
    ) -> (MultiRobotGraph, Estimate) {
        let mut g = MultiRobotGraph::new(robot_count);
        let mut truth = Estimate::new();
        for r in 0..robot_count {
            for i in 0..poses {
                let p = Pose::new(
                    exp_map(&Vector3::new(0.1 * i as f64, 0.2 * r as f64, -0.3)),
                    Vector3::new(i as f64, 2.0 * r as f64, 0.5),
                );
                let p = if r == 0 && i == 0 {
                    Pose::identity()
                } else {
                    p
                };
                g.add_vertex(VertexId::pose(r, i), None).unwrap();
                truth.insert(VertexId::pose(r, i), p);
            }
        }
        let mut add = |g: &mut MultiRobotGraph, a: VertexId, b: VertexId| {
            let (nr, nt) = if noisy {
                sample_noise(rng, 0.05, 0.1)
            } else {
                (Vector3::zeros(), Vector3::zeros())
            };
            let (rot, t) = compose_measurement(&truth[&a], &truth[&b], &nr, &nt);
            let e =
                RelativeMeasurement::new(a, b, Pose::new(rot, t), Weights::new(1.0, 2.0)).unwrap();
            g.add_edge(e).unwrap();
        };
        for r in 0..robot_count {
            for i in 1..poses {
                add(&mut g, VertexId::pose(r, i - 1), VertexId::pose(r, i));
            }
            if r > 0 {
                add(&mut g, VertexId::pose(r - 1, 1), VertexId::pose(r, 0));
            }
        }
        (g, truth)
    }

    #[test]
    fn compose_identity_and_origin_frame() {
        let (r, t) = compose_measurement(
            &Pose::identity(),
            &Pose::identity(),
            &Vector3::zeros(),
            &Vector3::zeros(),
        );
        assert_eq!(r, Rotation::identity());
        assert_eq!(t, Vector3::zeros());

        let xb = Pose::new(Rotation::about_z(0.5), Vector3::new(1.0, 2.0, 3.0));
        let (r, t) =
            compose_measurement(&Pose::identity(), &xb, &Vector3::zeros(), &Vector3::zeros());
        assert_relative_eq!(
            *r.matrix(),
            *Rotation::about_z(0.5).matrix(),
            epsilon = 1e-15
        );
        assert_relative_eq!(t, Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-15);
    }

    #[test]
    fn recomposition_reproduces_target() {
        let xa = Pose::new(
            exp_map(&Vector3::new(0.3, -0.1, 2.0)),
            Vector3::new(-1.0, 4.0, 0.2),
        );
        let xb = Pose::new(
            exp_map(&Vector3::new(-1.2, 0.4, 0.1)),
            Vector3::new(3.0, 0.0, -2.0),
        );
        let (r, t) = compose_measurement(&xa, &xb, &Vector3::zeros(), &Vector3::zeros());
        let back = xa.compose(&Pose::new(r, t));
        assert_relative_eq!(
            *back.rotation.matrix(),
            *xb.rotation.matrix(),
            epsilon = 1e-12
        );
        assert_relative_eq!(back.translation, xb.translation, epsilon = 1e-12);
    }

    #[test]
    fn single_edge_cost_by_hand() {
        let mut g = MultiRobotGraph::new(1);
        g.add_vertex(VertexId::pose(0, 0), None).unwrap();
        g.add_vertex(VertexId::pose(0, 1), None).unwrap();
        let z = Pose::new(
            Rotation::about_z(std::f64::consts::PI),
            Vector3::new(1.0, 0.0, 0.0),
        );
        let e = RelativeMeasurement::new(
            VertexId::pose(0, 0),
            VertexId::pose(0, 1),
            z,
            Weights::new(1.0, 1.0),
        )
        .unwrap();
        g.add_edge(e).unwrap();
        let est: Estimate = g.vertices().map(|v| (*v, Pose::identity())).collect();
        // 1·‖(-1,0,0)‖² + ½·‖I − Rz(π)‖² = 1 + 4
        assert_relative_eq!(graph_cost(&g, &est).unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn cost_scales_with_weights_and_vanishes_at_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, truth) = chain(2, 4, &mut rng, false);
        assert!(graph_cost(&g, &truth).unwrap() < 1e-20);

        let (g, truth) = chain(2, 4, &mut rng, true);
        let c = graph_cost(&g, &truth).unwrap();
        assert!(c > 0.0);
        let mut doubled = g.clone();
        for e in doubled.edges.iter_mut() {
            e.weights = e.weights.scaled(2.0);
        }
        assert_relative_eq!(
            graph_cost(&doubled, &truth).unwrap(),
            2.0 * c,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cost_reports_missing_vertex() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (g, mut truth) = chain(1, 3, &mut rng, true);
        truth.remove(&VertexId::pose(0, 2));
        assert!(
            matches!(graph_cost(&g, &truth), Err(Error::MissingEstimate(v)) if v == VertexId::pose(0, 2))
        );
    }

    #[test]
    fn cost_is_invariant_under_global_rigid_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (g, truth) = chain(3, 4, &mut rng, true);
        let c = graph_cost(&g, &truth).unwrap();
        let t = Pose::new(
            exp_map(&Vector3::new(0.7, -0.2, 1.9)),
            Vector3::new(10.0, -3.0, 2.0),
        );
        let moved: Estimate = truth.iter().map(|(k, p)| (*k, t.compose(p))).collect();
        assert_relative_eq!(graph_cost(&g, &moved).unwrap(), c, epsilon = 1e-9);
    }

    #[test]
    fn partition_single_robot_and_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (g, _) = chain(1, 5, &mut rng, true);
        let p = g.partition_edges(RobotId(0));
        assert_eq!(p.intra.len(), 4);
        assert!(p.separators.is_empty());

        let (g, _) = chain(2, 3, &mut rng, true);
        let inter = g
            .edges()
            .iter()
            .position(|e| e.kind == EdgeKind::InterRobot)
            .unwrap();
        assert_eq!(g.partition_edges(RobotId(0)).separators, vec![inter]);
        assert_eq!(g.partition_edges(RobotId(1)).separators, vec![inter]);
        assert_eq!(g.separator_count(RobotId(0)), 1);
    }

    #[test]
    fn add_edge_rejects_bad_input() {
        let mut g = MultiRobotGraph::new(2);
        g.add_vertex(VertexId::pose(0, 0), None).unwrap();
        g.add_vertex(VertexId::pose(1, 0), None).unwrap();
        let mut e = RelativeMeasurement::new(
            VertexId::pose(0, 0),
            VertexId::pose(1, 0),
            Pose::identity(),
            Weights::new(1.0, 1.0),
        )
        .unwrap();
        e.weights.omega_t_sq = 0.0;
        assert!(matches!(
            g.add_edge(e.clone()),
            Err(Error::InvalidEdge { .. })
        ));
        e.weights.omega_t_sq = 1.0;
        e.kind = EdgeKind::Odometry;
        assert!(matches!(
            g.add_edge(e.clone()),
            Err(Error::InvalidEdge { .. })
        ));
        e.to = VertexId::pose(1, 7);
        e.kind = EdgeKind::InterRobot;
        assert!(matches!(g.add_edge(e), Err(Error::UnknownVertex(_))));
    }

    #[test]
    fn validate_detects_disconnection() {
        let mut g = MultiRobotGraph::new(2);
        for v in [
            VertexId::pose(0, 0),
            VertexId::pose(0, 1),
            VertexId::pose(1, 0),
        ] {
            g.add_vertex(v, None).unwrap();
        }
        assert!(matches!(g.validate(), Err(Error::EmptyGraph)));
        let e = RelativeMeasurement::new(
            VertexId::pose(0, 0),
            VertexId::pose(0, 1),
            Pose::identity(),
            Weights::new(1.0, 1.0),
        )
        .unwrap();
        g.add_edge(e).unwrap();
        assert!(matches!(
            g.validate(),
            Err(Error::Disconnected { unreachable: 1 })
        ));
    }

    #[test]
    fn sampled_noise_has_requested_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let (mut sr, mut st) = (0.0, 0.0);
        for _ in 0..n {
            let (r, t) = sample_noise(&mut rng, 0.1, 0.3);
            sr += r.norm_squared();
            st += t.norm_squared();
        }
        assert_relative_eq!((sr / (3.0 * n as f64)).sqrt(), 0.1, max_relative = 0.02);
        assert_relative_eq!((st / (3.0 * n as f64)).sqrt(), 0.3, max_relative = 0.02);
        assert_eq!(
            sample_noise(&mut rng, 0.0, 0.0),
            (Vector3::zeros(), Vector3::zeros())
        );
    }
}

//! Synthetic multi-robot datasets.
//!
//! * `Grid3D`: robots on a `√n × √n` grid of unit cubes, each robot touring
//!   the corners of its own cube. Neighbouring cubes share a face, and every
//!   pair of poses of two neighbouring robots at the same corner is linked by
//!   an inter-robot measurement.
//! * `ParallelTracks`: two robots driving side by side; the last
//!   `link_count` time stamps are linked across robots.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_map, look_along, Pose};
use crate::graph::{
    compose_measurement, sample_noise, Estimate, MultiRobotGraph, RelativeMeasurement, VertexId,
    Weights,
};

pub const GRID_ROBOT_COUNTS: [usize; 6] = [4, 9, 16, 25, 36, 49];
pub const TRACK_LENGTH: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    Grid3D,
    ParallelTracks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub robot_count: usize,
    pub poses_per_robot: usize,
    /// Rotation noise standard deviation in degrees.
    pub sigma_r: f64,
    /// Translation noise standard deviation in meters.
    pub sigma_t: f64,
    pub rng_seed: u64,
    pub link_count: usize,
    /// Cube edge length (grid) or track spacing (tracks), meters.
    pub scale: f64,
}

impl ScenarioSpec {
    pub fn grid(robot_count: usize, seed: u64) -> Self {
        ScenarioSpec {
            kind: ScenarioKind::Grid3D,
            robot_count,
            poses_per_robot: 8,
            sigma_r: 5.0,
            sigma_t: 0.2,
            rng_seed: seed,
            link_count: 0,
            scale: 1.0,
        }
    }

    pub fn tracks(link_count: usize, seed: u64) -> Self {
        ScenarioSpec {
            kind: ScenarioKind::ParallelTracks,
            robot_count: 2,
            poses_per_robot: TRACK_LENGTH,
            sigma_r: 5.0,
            sigma_t: 0.2,
            rng_seed: seed,
            link_count,
            scale: 1.0,
        }
    }

    pub fn with_noise(mut self, sigma_r_deg: f64, sigma_t: f64) -> Self {
        self.sigma_r = sigma_r_deg;
        self.sigma_t = sigma_t;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    /// Short identifier, e.g. `grid16-s3` or `tracks5-s0`.
    pub fn label(&self) -> String {
        match self.kind {
            ScenarioKind::Grid3D => format!("grid{}-s{}", self.robot_count, self.rng_seed),
            ScenarioKind::ParallelTracks => format!("tracks{}-s{}", self.link_count, self.rng_seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        if !(self.sigma_r >= 0.0
            && self.sigma_r.is_finite()
            && self.sigma_t >= 0.0
            && self.sigma_t.is_finite())
        {
            return bad(format!(
                "noise must be finite and nonnegative, got σ_R={} σ_t={}",
                self.sigma_r, self.sigma_t
            ));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        match self.kind {
            ScenarioKind::Grid3D => {
                if !GRID_ROBOT_COUNTS.contains(&self.robot_count) {
                    return bad(format!(
                        "grid robot count must be one of {GRID_ROBOT_COUNTS:?}, got {}",
                        self.robot_count
                    ));
                }
                if self.poses_per_robot < 2 {
                    return bad(format!(
                        "need at least 2 poses per robot, got {}",
                        self.poses_per_robot
                    ));
                }
            }
            ScenarioKind::ParallelTracks => {
                if self.robot_count != 2 {
                    return bad(format!(
                        "parallel tracks use exactly 2 robots, got {}",
                        self.robot_count
                    ));
                }
                if !(1..=10).contains(&self.link_count) {
                    return bad(format!(
                        "link count must be in 1..=10, got {}",
                        self.link_count
                    ));
                }
                if self.poses_per_robot < self.link_count || self.poses_per_robot < 2 {
                    return bad(format!(
                        "{} poses cannot carry {} links",
                        self.poses_per_robot, self.link_count
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Corners of the unit cube in Gray-code order: consecutive corners (and the
/// last and first) differ in one coordinate.
const CUBE_TOUR: [[f64; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 0.0, 0.0],
];

/// Ground truth and measurement graph for `spec`, expressed in the frame of
/// the anchor (robot 0, pose 0).
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<(MultiRobotGraph, Estimate)> {
    spec.validate()?;
    let (truth, pairs) = match spec.kind {
        ScenarioKind::Grid3D => grid_layout(spec),
        ScenarioKind::ParallelTracks => track_layout(spec),
    };
    let to_anchor = truth[&VertexId::pose(0, 0)].inverse();
    let truth: Estimate = truth
        .into_iter()
        .map(|(v, p)| (v, to_anchor.compose(&p)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let sigma_r = spec.sigma_r.to_radians();
    let weights = Weights::from_sigmas(sigma_r, spec.sigma_t);
    let mut graph = MultiRobotGraph::new(spec.robot_count);
    for v in truth.keys() {
        graph.add_vertex(*v, None)?;
    }
    for (a, b) in pairs {
        let (nr, nt) = sample_noise(&mut rng, sigma_r, spec.sigma_t);
        let (rot, t) = compose_measurement(&truth[&a], &truth[&b], &nr, &nt);
        let edge = RelativeMeasurement::new(a, b, Pose::new(rot, t), weights)
            .ok_or_else(|| Error::InvalidScenario(format!("degenerate measurement {a} -> {b}")))?;
        graph.add_edge(edge)?;
    }
    graph.validate()?;
    Ok((graph, truth))
}

fn grid_layout(spec: &ScenarioSpec) -> (Estimate, Vec<(VertexId, VertexId)>) {
    let side = (spec.robot_count as f64).sqrt().round() as usize;
    let s = spec.scale;
    let corner = |r: usize, k: usize| -> Vector3<f64> {
        let c = CUBE_TOUR[k % 8];
        Vector3::new((r % side) as f64 + c[0], (r / side) as f64 + c[1], c[2]) * s
    };
    let mut truth = Estimate::new();
    let mut pairs = Vec::new();
    let n = spec.poses_per_robot;
    for r in 0..spec.robot_count {
        for k in 0..n {
            let heading = corner(r, k + 1) - corner(r, k);
            // small per-robot roll keeps the rotations of different robots distinct
            let tilt = exp_map(&(heading.normalize() * (0.1 * r as f64)));
            let rotation = tilt.compose(&look_along(&heading));
            truth.insert(VertexId::pose(r, k), Pose::new(rotation, corner(r, k)));
        }
        for k in 0..n - 1 {
            pairs.push((VertexId::pose(r, k), VertexId::pose(r, k + 1)));
        }
        // loop closures: revisits of the same corner, and the closing edge of the tour
        for k in 8..n {
            pairs.push((VertexId::pose(r, k - 8), VertexId::pose(r, k)));
        }
        if n % 8 == 0 {
            pairs.push((VertexId::pose(r, n - 1), VertexId::pose(r, 0)));
        }
    }
    for a in 0..spec.robot_count {
        let neighbors = [
            (a % side + 1 < side).then_some(a + 1),
            (a + side < spec.robot_count).then_some(a + side),
        ];
        for b in neighbors.into_iter().flatten() {
            for i in 0..n {
                for j in 0..n {
                    if (corner(a, i) - corner(b, j)).norm() < 1e-9 * s {
                        pairs.push((VertexId::pose(a, i), VertexId::pose(b, j)));
                    }
                }
            }
        }
    }
    (truth, pairs)
}

fn track_layout(spec: &ScenarioSpec) -> (Estimate, Vec<(VertexId, VertexId)>) {
    let n = spec.poses_per_robot;
    let mut truth = Estimate::new();
    let mut pairs = Vec::new();
    for r in 0..2 {
        for i in 0..n {
            let yaw = 0.15 * (i as f64 + r as f64).sin();
            let pose = Pose::new(
                exp_map(&Vector3::new(0.0, 0.0, yaw)),
                Vector3::new(i as f64, r as f64, 0.05 * (i as f64).cos()) * spec.scale,
            );
            truth.insert(VertexId::pose(r, i), pose);
        }
        for i in 0..n - 1 {
            pairs.push((VertexId::pose(r, i), VertexId::pose(r, i + 1)));
        }
    }
    for i in n - spec.link_count..n {
        pairs.push((VertexId::pose(0, i), VertexId::pose(1, i)));
    }
    (truth, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgeKind, RobotId};

    #[test]
    fn noiseless_scenarios_have_zero_cost_at_truth() {
        for spec in [
            ScenarioSpec::grid(9, 1).with_noise(0.0, 0.0),
            ScenarioSpec::tracks(4, 1).with_noise(0.0, 0.0),
        ] {
            let (g, truth) = generate_scenario(&spec).unwrap();
            assert!(g.cost(&truth).unwrap() < 1e-18, "{}", spec.label());
            assert_eq!(truth[&g.anchor()], Pose::identity());
        }
    }

    #[test]
    fn grid_four_robots_all_have_separators() {
        let (g, _) = generate_scenario(&ScenarioSpec::grid(4, 2)).unwrap();
        g.validate().unwrap();
        for r in g.robots() {
            assert!(!g.partition_edges(r).separators.is_empty(), "robot {r}");
        }
        // 2×2 grid: 4 neighbouring pairs, each sharing a face of 4 corners
        let inter = g
            .edges()
            .iter()
            .filter(|e| e.kind == EdgeKind::InterRobot)
            .count();
        assert_eq!(inter, 16);
    }

    #[test]
    fn tracks_link_count_is_exact() {
        for links in [1, 5, 10] {
            let (g, _) = generate_scenario(&ScenarioSpec::tracks(links, 3)).unwrap();
            for r in [RobotId(0), RobotId(1)] {
                assert_eq!(g.partition_edges(r).separators.len(), links);
            }
        }
    }

    #[test]
    fn partition_counts_on_largest_grid() {
        let (g, _) = generate_scenario(&ScenarioSpec::grid(49, 4)).unwrap();
        let mut intra = 0;
        let mut separators = 0;
        for r in g.robots() {
            let p = g.partition_edges(r);
            intra += p.intra.len();
            separators += p.separators.len();
        }
        let inter = g.edges().iter().filter(|e| e.kind.is_separator()).count();
        assert_eq!(separators, 2 * inter);
        assert_eq!(intra + inter, g.edges().len());
        // 7×7 grid has 2·7·6 neighbouring pairs
        assert_eq!(inter, 4 * 84);
    }

    #[test]
    fn generation_is_deterministic_and_validated() {
        let spec = ScenarioSpec::grid(16, 11);
        assert_eq!(
            generate_scenario(&spec).unwrap().0.edges(),
            generate_scenario(&spec).unwrap().0.edges()
        );
        assert!(generate_scenario(&ScenarioSpec::grid(5, 0)).is_err());
        assert!(generate_scenario(&ScenarioSpec::tracks(0, 0)).is_err());
        assert!(generate_scenario(&ScenarioSpec::tracks(11, 0)).is_err());
    }
}

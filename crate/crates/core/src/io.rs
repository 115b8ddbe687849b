//! Graph files, estimates, traces, run configurations and manifests.
//!
//! Graph files are line oriented; `#` starts a comment:
//!
//! ```text
//! ROBOTS <n>
//! ANCHOR <id>
//! VERTEX <id> x y z qx qy qz qw
//! OWNER <id> <robot> <pose|object> <index>
//! EDGE <from> <to> x y z qx qy qz qw I11 I12 ... I16 I22 ... I66
//! ```
//!
//! The information matrix is the upper triangle of a 6×6 matrix over the
//! (translation, axis-angle rotation) error and must be isotropic per block.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix6, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Rotation};
use crate::graph::{
    Estimate, MultiRobotGraph, RelativeMeasurement, RobotId, VertexId, VertexKind, Weights,
};
use crate::metrics::Method;
use crate::objects::ObjectSceneSpec;
use crate::runtime::{CommunicationLedger, ScenarioSpec};
use crate::solvers::{IterationTrace, SolverConfig};

pub const GRAPH_FORMAT_HEADER: &str = "# dpgo graph v1";
/// Allowed deviation of a parsed quaternion from unit norm.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-3;
/// Relative tolerance for treating an information block as isotropic.
pub const ISOTROPY_TOLERANCE: f64 = 1e-6;

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn kind_name(kind: VertexKind) -> &'static str {
    match kind {
        VertexKind::RobotPose => "pose",
        VertexKind::ObjectLandmark => "object",
    }
}

fn parse_kind(s: &str) -> Option<VertexKind> {
    match s {
        "pose" => Some(VertexKind::RobotPose),
        "object" => Some(VertexKind::ObjectLandmark),
        _ => None,
    }
}

/// `(ω_t², ω_R²)` from a 6×6 information matrix; anything but
/// `diag(a, a, a, b, b, b)` is rejected.
pub fn isotropic_weights(information: &Matrix6<f64>) -> std::result::Result<Weights, String> {
    let scale = information.amax();
    if !(scale > 0.0 && scale.is_finite()) {
        return Err("information matrix must be finite and nonzero".into());
    }
    for i in 0..6 {
        for j in 0..6 {
            if i != j && information[(i, j)].abs() > ISOTROPY_TOLERANCE * scale {
                return Err(format!(
                    "anisotropic information: off-diagonal entry ({}, {}) is nonzero",
                    i + 1,
                    j + 1
                ));
            }
        }
    }
    let block = |start: usize, what: &str| -> std::result::Result<f64, String> {
        let d = information[(start, start)];
        if !(d > 0.0) {
            return Err(format!("{what} information must be positive"));
        }
        for k in start + 1..start + 3 {
            if (information[(k, k)] - d).abs() > ISOTROPY_TOLERANCE * d {
                return Err(format!(
                    "anisotropic {what} information: diagonal entries differ"
                ));
            }
        }
        Ok(d)
    };
    Ok(Weights::new(
        block(0, "translation")?,
        block(3, "rotation")?,
    ))
}

fn information_upper(w: &Weights) -> [f64; 21] {
    let mut out = [0.0; 21];
    let mut k = 0;
    for i in 0..6 {
        for j in i..6 {
            if i == j {
                out[k] = if i < 3 { w.omega_t_sq } else { w.omega_r_sq };
            }
            k += 1;
        }
    }
    out
}

fn push_pose(line: &mut String, p: &Pose) {
    let t = p.translation;
    let q = p.rotation.to_quaternion();
    write!(
        line,
        " {} {} {} {} {} {} {}",
        t.x, t.y, t.z, q[0], q[1], q[2], q[3]
    )
    .expect("writing to a String");
}

/// Serializes a graph. Vertices without an initial pose are written at the
/// identity.
pub fn graph_to_string(graph: &MultiRobotGraph) -> String {
    let ids: BTreeMap<VertexId, usize> =
        graph.vertices().enumerate().map(|(i, v)| (*v, i)).collect();
    let mut s = String::new();
    writeln!(s, "{GRAPH_FORMAT_HEADER}").unwrap();
    writeln!(s, "ROBOTS {}", graph.robot_count()).unwrap();
    if let Some(a) = ids.get(&graph.anchor()) {
        writeln!(s, "ANCHOR {a}").unwrap();
    }
    for (v, id) in &ids {
        let mut line = format!("VERTEX {id}");
        push_pose(&mut line, &graph.initial_pose(v).unwrap_or_default());
        writeln!(s, "{line}").unwrap();
        writeln!(
            s,
            "OWNER {id} {} {} {}",
            v.robot.0,
            kind_name(v.kind),
            v.index
        )
        .unwrap();
    }
    for e in graph.edges() {
        let mut line = format!("EDGE {} {}", ids[&e.from], ids[&e.to]);
        push_pose(&mut line, &e.relative_pose());
        for x in information_upper(&e.weights) {
            write!(line, " {x}").unwrap();
        }
        writeln!(s, "{line}").unwrap();
    }
    s
}

pub fn write_graph(graph: &MultiRobotGraph, path: &Path) -> Result<()> {
    std::fs::write(path, graph_to_string(graph))?;
    Ok(())
}

fn numbers(line: usize, fields: &[&str], count: usize, what: &str) -> Result<Vec<f64>> {
    if fields.len() != count {
        return Err(parse_err(
            line,
            format!("{what} expects {count} numbers, found {}", fields.len()),
        ));
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| parse_err(line, format!("invalid number '{f}'")))
        })
        .collect()
}

fn integer(line: usize, field: Option<&&str>, what: &str) -> Result<usize> {
    let f = field.ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    f.parse()
        .map_err(|_| parse_err(line, format!("invalid {what} '{f}'")))
}

fn pose_from(line: usize, v: &[f64]) -> Result<Pose> {
    let q = [v[3], v[4], v[5], v[6]];
    let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
        return Err(parse_err(line, format!("quaternion norm {norm} is not 1")));
    }
    Ok(Pose::new(
        Rotation::from_quaternion(q),
        Vector3::new(v[0], v[1], v[2]),
    ))
}

struct RawEdge {
    line: usize,
    from: usize,
    to: usize,
    pose: Pose,
    weights: Weights,
}

/// Parses and validates a graph file. Without any `OWNER` records all
/// vertices become poses of a single robot, in id order.
pub fn parse_graph_str(text: &str) -> Result<MultiRobotGraph> {
    let mut robots: Option<(usize, usize)> = None;
    let mut anchor: Option<(usize, usize)> = None;
    let mut vertices: BTreeMap<usize, (usize, Pose)> = BTreeMap::new();
    let mut owners: BTreeMap<usize, (usize, VertexId)> = BTreeMap::new();
    let mut edges = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        match fields[0] {
            "ROBOTS" => robots = Some((line, integer(line, fields.get(1), "robot count")?)),
            "ANCHOR" => anchor = Some((line, integer(line, fields.get(1), "anchor id")?)),
            "VERTEX" => {
                let id = integer(line, fields.get(1), "vertex id")?;
                let pose = pose_from(line, &numbers(line, &fields[2..], 7, "VERTEX")?)?;
                if vertices.insert(id, (line, pose)).is_some() {
                    return Err(parse_err(line, format!("duplicate vertex {id}")));
                }
            }
            "OWNER" => {
                if fields.len() != 5 {
                    return Err(parse_err(
                        line,
                        "OWNER expects <id> <robot> <pose|object> <index>",
                    ));
                }
                let id = integer(line, fields.get(1), "vertex id")?;
                let robot = integer(line, fields.get(2), "robot")?;
                let kind = parse_kind(fields[3]).ok_or_else(|| {
                    parse_err(line, format!("unknown vertex kind '{}'", fields[3]))
                })?;
                let index = integer(line, fields.get(4), "index")?;
                let v = VertexId {
                    robot: RobotId(robot),
                    kind,
                    index,
                };
                if owners.insert(id, (line, v)).is_some() {
                    return Err(parse_err(
                        line,
                        format!("duplicate owner record for vertex {id}"),
                    ));
                }
            }
            "EDGE" => {
                let from = integer(line, fields.get(1), "edge source")?;
                let to = integer(line, fields.get(2), "edge target")?;
                let rest = if fields.len() > 3 {
                    &fields[3..]
                } else {
                    &[][..]
                };
                let v = numbers(line, rest, 28, "EDGE")?;
                let pose = pose_from(line, &v[..7])?;
                let mut info = Matrix6::zeros();
                let mut k = 7;
                for r in 0..6 {
                    for c in r..6 {
                        info[(r, c)] = v[k];
                        info[(c, r)] = v[k];
                        k += 1;
                    }
                }
                let weights = isotropic_weights(&info).map_err(|m| parse_err(line, m))?;
                edges.push(RawEdge {
                    line,
                    from,
                    to,
                    pose,
                    weights,
                });
            }
            other => return Err(parse_err(line, format!("unknown record '{other}'"))),
        }
    }

    let mut mapping: BTreeMap<usize, VertexId> = BTreeMap::new();
    if owners.is_empty() {
        for (rank, id) in vertices.keys().enumerate() {
            mapping.insert(*id, VertexId::pose(0, rank));
        }
    } else {
        for (id, (line, _)) in &vertices {
            let (_, v) = owners
                .get(id)
                .ok_or_else(|| parse_err(*line, format!("vertex {id} has no OWNER record")))?;
            mapping.insert(*id, *v);
        }
        for (id, (line, _)) in &owners {
            if !vertices.contains_key(id) {
                return Err(parse_err(
                    *line,
                    format!("OWNER refers to unknown vertex {id}"),
                ));
            }
        }
        let mut seen = BTreeMap::new();
        for (id, v) in &mapping {
            if let Some(other) = seen.insert(*v, *id) {
                return Err(parse_err(
                    owners[id].0,
                    format!("vertices {other} and {id} both claim {v}"),
                ));
            }
        }
    }

    let max_robot = mapping.values().map(|v| v.robot.0 + 1).max().unwrap_or(1);
    let robot_count = match robots {
        Some((line, n)) if n < max_robot => {
            return Err(parse_err(
                line,
                format!("ROBOTS {n} but a vertex belongs to robot {}", max_robot - 1),
            ));
        }
        Some((_, n)) => n,
        None => max_robot,
    };
    let mut graph = MultiRobotGraph::new(robot_count);
    for (id, v) in &mapping {
        graph.add_vertex(*v, Some(vertices[id].1))?;
    }
    if let Some((line, a)) = anchor {
        let v = mapping
            .get(&a)
            .ok_or_else(|| parse_err(line, format!("unknown anchor vertex {a}")))?;
        graph
            .set_anchor(*v)
            .map_err(|e| parse_err(line, e.to_string()))?;
    }
    for e in edges {
        let lookup = |id: usize| {
            mapping
                .get(&id)
                .copied()
                .ok_or_else(|| parse_err(e.line, format!("unknown vertex {id}")))
        };
        let (from, to) = (lookup(e.from)?, lookup(e.to)?);
        let m = RelativeMeasurement::new(from, to, e.pose, e.weights)
            .ok_or_else(|| parse_err(e.line, format!("no edge kind joins {from} and {to}")))?;
        graph
            .add_edge(m)
            .map_err(|err| parse_err(e.line, err.to_string()))?;
    }
    graph.validate()?;
    Ok(graph)
}

pub fn parse_graph(path: &Path) -> Result<MultiRobotGraph> {
    parse_graph_str(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimateRow {
    robot: usize,
    kind: String,
    index: usize,
    x: f64,
    y: f64,
    z: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    qw: f64,
}

pub fn write_estimate_csv<W: Write>(estimate: &Estimate, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (v, p) in estimate {
        let q = p.rotation.to_quaternion();
        w.serialize(EstimateRow {
            robot: v.robot.0,
            kind: kind_name(v.kind).into(),
            index: v.index,
            x: p.translation.x,
            y: p.translation.y,
            z: p.translation.z,
            qx: q[0],
            qy: q[1],
            qz: q[2],
            qw: q[3],
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_estimate_csv<R: Read>(input: R) -> Result<Estimate> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Estimate::new();
    for (i, row) in r.deserialize::<EstimateRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row?;
        let kind = parse_kind(&row.kind)
            .ok_or_else(|| parse_err(line, format!("unknown vertex kind '{}'", row.kind)))?;
        let pose = pose_from(line, &[row.x, row.y, row.z, row.qx, row.qy, row.qz, row.qw])?;
        let v = VertexId {
            robot: RobotId(row.robot),
            kind,
            index: row.index,
        };
        out.insert(v, pose);
    }
    Ok(out)
}

/// Long-format trace: `phase,iteration,change_norm,objective`.
pub fn write_trace_csv<W: Write>(
    rotation: &IterationTrace,
    pose: &IterationTrace,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["phase", "iteration", "change_norm", "objective"])?;
    for (phase, trace) in [("rotation", rotation), ("pose", pose)] {
        for (k, (change, objective)) in trace.change_norms.iter().zip(&trace.objective).enumerate()
        {
            w.write_record([
                phase.to_string(),
                (k + 1).to_string(),
                change.to_string(),
                objective.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_ledger_json<W: Write>(ledger: &CommunicationLedger, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, ledger)?;
    Ok(())
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Generated input; ignored when `graph` or `objects` is set.
    pub scenario: Option<ScenarioSpec>,
    #[serde(default)]
    pub objects: Option<ObjectSceneSpec>,
    /// Graph file input.
    pub graph: Option<PathBuf>,
    pub solver: SolverConfig,
    pub method: Method,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.graph, &self.objects, &self.scenario) {
            (None, None, None) => {
                return Err(Error::InvalidConfig(
                    "a scenario, object scene or graph file is required".into(),
                ));
            }
            (None, Some(o), _) => o.validate()?,
            (None, None, Some(s)) => s.validate()?,
            _ => {}
        }
        self.solver.validate()?;
        if let Method::Jor(g) | Method::Sor(g) = self.method {
            self.solver.clone().with_gamma(g).validate()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        config.validate()?;
        Ok(config)
    }

    pub fn seed(&self) -> Option<u64> {
        if self.graph.is_some() {
            return None;
        }
        match &self.objects {
            Some(o) => Some(o.rng_seed),
            None => self.scenario.as_ref().map(|s| s.rng_seed),
        }
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("run configs serialize");
        hex::encode(Sha256::digest(&json))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: Option<u64>,
    /// Output file name to SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: Option<u64>) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let config_hash = sha256_hex(&serde_json::to_vec(&config)?);
        Ok(Manifest {
            tool: "dpgo".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            config_hash,
            seed,
            outputs: BTreeMap::new(),
        })
    }

    /// Writes `bytes` to `dir/name` and records its digest.
    pub fn write_output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(dir.join(name), bytes)?;
        self.outputs.insert(name.into(), sha256_hex(bytes));
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut f = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

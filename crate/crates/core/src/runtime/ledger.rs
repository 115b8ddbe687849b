use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::graph::{RobotId, VertexId};

/// Bytes per rotation block (9 doubles).
pub const B_R: usize = 72;
/// Bytes per pose block (6 doubles).
pub const B_P: usize = 48;
/// Bytes used to transmit an object category label.
pub const LABEL_BYTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Rotation,
    Pose,
}

impl Phase {
    pub fn block_bytes(self) -> usize {
        match self {
            Phase::Rotation => B_R,
            Phase::Pose => B_P,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparatorMessage {
    pub sender: RobotId,
    pub receiver: RobotId,
    pub round: usize,
    pub phase: Phase,
    pub payload: Vec<(VertexId, Vec<f64>)>,
}

impl SeparatorMessage {
    pub fn byte_size(&self) -> usize {
        self.payload.len() * self.phase.block_bytes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub messages: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotTraffic {
    pub rotation: Tally,
    pub pose: Tally,
    /// Object maps shared at rendezvous.
    pub objects: Tally,
    pub rendezvous: usize,
}

impl RobotTraffic {
    pub fn phase(&self, phase: Phase) -> &Tally {
        match phase {
            Phase::Rotation => &self.rotation,
            Phase::Pose => &self.pose,
        }
    }

    pub fn total_bytes(&self) -> usize {
        self.rotation.bytes + self.pose.bytes + self.objects.bytes
    }
}

/// Sent traffic per robot, plus the set of vertices that ever crossed a
/// robot boundary (for privacy audits).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CommunicationLedger {
    pub robots: BTreeMap<RobotId, RobotTraffic>,
    pub transmitted: BTreeSet<(RobotId, RobotId, VertexId)>,
}

impl CommunicationLedger {
    pub fn new(robot_count: usize) -> Self {
        CommunicationLedger {
            robots: (0..robot_count)
                .map(|r| (RobotId(r), RobotTraffic::default()))
                .collect(),
            transmitted: BTreeSet::new(),
        }
    }

    pub fn record(&mut self, msg: &SeparatorMessage) {
        let traffic = self.robots.entry(msg.sender).or_default();
        let tally = match msg.phase {
            Phase::Rotation => &mut traffic.rotation,
            Phase::Pose => &mut traffic.pose,
        };
        tally.messages += 1;
        tally.bytes += msg.byte_size();
        for (v, _) in &msg.payload {
            self.transmitted.insert((msg.sender, msg.receiver, *v));
        }
    }

    pub fn record_objects(&mut self, sender: RobotId, bytes: usize) {
        let traffic = self.robots.entry(sender).or_default();
        traffic.objects.messages += 1;
        traffic.objects.bytes += bytes;
    }

    pub fn record_rendezvous(&mut self, a: RobotId, b: RobotId) {
        self.robots.entry(a).or_default().rendezvous += 1;
        self.robots.entry(b).or_default().rendezvous += 1;
    }

    pub fn robot(&self, r: RobotId) -> RobotTraffic {
        self.robots.get(&r).cloned().unwrap_or_default()
    }

    pub fn total_bytes(&self) -> usize {
        self.robots.values().map(RobotTraffic::total_bytes).sum()
    }
}

/// Bytes each robot sends under DDF-SAM's dense separator marginals:
/// `K_GN [s B_p + (s B_p)²]`.
pub fn ddf_sam_comm_model(s: usize, k_gn: usize) -> u128 {
    let sb = (s * B_P) as u128;
    k_gn as u128 * (sb + sb * sb)
}

/// Bytes each robot sends with the block iterations: `K_r s B_r + K_p s B_p`.
pub fn dgs_comm_model(s: usize, k_r: usize, k_p: usize) -> usize {
    k_r * s * B_R + k_p * s * B_P
}

//! Simulated team execution: agents, separator messages, byte accounting,
//! scenario generation and Monte Carlo batches.

mod agent;
mod ledger;
mod montecarlo;
mod scenario;

pub use agent::{run_distributed_two_stage, DistributedResult, RobotAgent};
pub use ledger::{
    ddf_sam_comm_model, dgs_comm_model, CommunicationLedger, Phase, RobotTraffic, SeparatorMessage,
    Tally, B_P, B_R, LABEL_BYTES,
};
pub use montecarlo::{monte_carlo, run_seed, MonteCarloSummary, RunRecord, Stat};
pub use scenario::{
    generate_scenario, ScenarioKind, ScenarioSpec, GRID_ROBOT_COUNTS, TRACK_LENGTH,
};

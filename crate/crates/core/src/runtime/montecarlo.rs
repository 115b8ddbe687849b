use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::centralized::{solve_gauss_newton, solve_two_stage, GaussNewtonOptions};
use crate::error::Result;
use crate::graph::VertexId;
use crate::metrics::{are_star, ate_star};
use crate::runtime::agent::run_distributed_two_stage;
use crate::runtime::scenario::{generate_scenario, ScenarioSpec};
use crate::solvers::SolverConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub rotation_iterations: usize,
    pub pose_iterations: usize,
    pub distributed_cost: f64,
    pub two_stage_cost: f64,
    pub gn_cost: f64,
    /// Distributed estimate against GN, meters.
    pub ate_star: f64,
    /// Distributed estimate against GN, degrees.
    pub are_star: f64,
    pub total_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Stat {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub runs: Vec<RunRecord>,
    pub rotation_iterations: Stat,
    pub pose_iterations: Stat,
    pub distributed_cost: Stat,
    pub two_stage_cost: Stat,
    pub gn_cost: Stat,
    pub ate_star: Stat,
    pub are_star: Stat,
}

/// Seed of run `i`: the base seed offset by the run index.
pub fn run_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add(i as u64)
}

fn single_run(spec: &ScenarioSpec, config: &SolverConfig) -> Result<RunRecord> {
    let (graph, _) = generate_scenario(spec)?;
    let two_stage = solve_two_stage(&graph)?;
    let gn = solve_gauss_newton(&graph, &two_stage.estimate, &GaussNewtonOptions::default())?;
    let dist = run_distributed_two_stage(&graph, config)?;
    let vertices: Vec<VertexId> = graph.vertices().copied().collect();
    Ok(RunRecord {
        seed: spec.rng_seed,
        rotation_iterations: dist.rotation_trace.iterations,
        pose_iterations: dist.pose_trace.iterations,
        distributed_cost: dist.cost,
        two_stage_cost: two_stage.cost,
        gn_cost: gn.cost,
        ate_star: ate_star(&dist.estimate, &gn.estimate, &vertices)?,
        are_star: are_star(&dist.estimate, &gn.estimate, &vertices)?,
        total_bytes: dist.ledger.total_bytes(),
    })
}

/// Runs `runs` noise realizations in parallel and aggregates them.
pub fn monte_carlo(
    spec: &ScenarioSpec,
    config: &SolverConfig,
    runs: usize,
) -> Result<MonteCarloSummary> {
    if runs == 0 {
        return Err(crate::error::Error::InvalidConfig(
            "monte carlo needs at least one run".into(),
        ));
    }
    let records: Vec<RunRecord> = (0..runs)
        .into_par_iter()
        .map(|i| single_run(&spec.clone().with_seed(run_seed(spec.rng_seed, i)), config))
        .collect::<Result<_>>()?;
    let stat = |f: fn(&RunRecord) -> f64| Stat::of(records.iter().map(f));
    Ok(MonteCarloSummary {
        rotation_iterations: stat(|r| r.rotation_iterations as f64),
        pose_iterations: stat(|r| r.pose_iterations as f64),
        distributed_cost: stat(|r| r.distributed_cost),
        two_stage_cost: stat(|r| r.two_stage_cost),
        gn_cost: stat(|r| r.gn_cost),
        ate_star: stat(|r| r.ate_star),
        are_star: stat(|r| r.are_star),
        runs: records,
    })
}

//! Error metrics and comparison tables.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::centralized::{solve_gauss_newton, solve_two_stage, GaussNewtonOptions};
use crate::error::{Error, Result};
use crate::geometry::log_map;
use crate::graph::{Estimate, MultiRobotGraph, VertexId};
use crate::runtime::{generate_scenario, run_distributed_two_stage, ScenarioSpec};
use crate::solvers::{Scheme, SolverConfig};
use crate::system::BlockLinearSystem;

/// Version of the CSV column layout written by [`write_benchmark_csv`].
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// `e(y) = ‖A y − b‖² − m*`, zero at the direct solution.
pub fn residual_error(system: &BlockLinearSystem, y: &DVector<f64>, m_star: f64) -> Result<f64> {
    if y.len() != system.dim() {
        return Err(Error::DimensionMismatch {
            expected: system.dim(),
            actual: y.len(),
        });
    }
    Ok(system.objective(y) - m_star)
}

fn check_vertices<'a>(
    estimate: &Estimate,
    reference: &Estimate,
    vertices: &'a [VertexId],
) -> Result<&'a [VertexId]> {
    if vertices.is_empty() {
        return Err(Error::InvalidConfig(
            "metric over an empty vertex set".into(),
        ));
    }
    for v in vertices {
        if !estimate.contains_key(v) || !reference.contains_key(v) {
            return Err(Error::MissingEstimate(*v));
        }
    }
    Ok(vertices)
}

/// RMS position error in meters.
pub fn ate_star(estimate: &Estimate, reference: &Estimate, vertices: &[VertexId]) -> Result<f64> {
    let vs = check_vertices(estimate, reference, vertices)?;
    let sum: f64 = vs
        .iter()
        .map(|v| (estimate[v].translation - reference[v].translation).norm_squared())
        .sum();
    Ok((sum / vs.len() as f64).sqrt())
}

/// RMS of `‖Log(R*ᵀ R)‖` in degrees.
pub fn are_star(estimate: &Estimate, reference: &Estimate, vertices: &[VertexId]) -> Result<f64> {
    let vs = check_vertices(estimate, reference, vertices)?;
    let sum: f64 = vs
        .iter()
        .map(|v| {
            let delta = reference[v]
                .rotation
                .transpose()
                .compose(&estimate[v].rotation);
            log_map(&delta).norm_squared()
        })
        .sum();
    Ok((sum / vs.len() as f64).sqrt().to_degrees())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", content = "gamma", rename_all = "lowercase")]
pub enum Method {
    Dgs,
    Dj,
    Jor(f64),
    Sor(f64),
    TwoStage,
    Gn,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Dgs => "dgs".into(),
            Method::Dj => "dj".into(),
            Method::Jor(g) => format!("jor({g})"),
            Method::Sor(g) => format!("sor({g})"),
            Method::TwoStage => "two-stage".into(),
            Method::Gn => "gn".into(),
        }
    }

    /// Solver settings for the distributed methods, thresholds taken from `base`.
    pub fn solver_config(&self, base: &SolverConfig) -> Option<SolverConfig> {
        let (scheme, gamma) = match self {
            Method::Dgs => (Scheme::GaussSeidel, 1.0),
            Method::Dj => (Scheme::Jacobi, 1.0),
            Method::Jor(g) => (Scheme::Jacobi, *g),
            Method::Sor(g) => (Scheme::GaussSeidel, *g),
            Method::TwoStage | Method::Gn => return None,
        };
        Some(SolverConfig {
            scheme,
            gamma,
            ..base.clone()
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let gamma = |prefix: &str| -> Option<Result<f64>> {
            let inner = lower
                .strip_prefix(prefix)?
                .strip_prefix('(')?
                .strip_suffix(')')?;
            Some(
                inner
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad relaxation factor in {s:?}"))),
            )
        };
        match lower.as_str() {
            "dgs" => Ok(Method::Dgs),
            "dj" => Ok(Method::Dj),
            "two-stage" | "twostage" => Ok(Method::TwoStage),
            "gn" => Ok(Method::Gn),
            _ => {
                if let Some(g) = gamma("jor") {
                    Ok(Method::Jor(g?))
                } else if let Some(g) = gamma("sor") {
                    Ok(Method::Sor(g?))
                } else {
                    Err(Error::InvalidConfig(format!("unknown method {s:?}")))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub rotation_iterations: usize,
    pub pose_iterations: usize,
    pub cost: f64,
    /// Against the GN estimate, meters.
    pub ate_star: f64,
    /// Against the GN estimate, degrees.
    pub are_star: f64,
    pub eta_r: f64,
    pub eta_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub scenario: String,
    pub results: Vec<MethodResult>,
}

impl BenchmarkRow {
    pub fn get(&self, method: &Method) -> Option<&MethodResult> {
        let name = method.name();
        self.results.iter().find(|r| r.method == name)
    }
}

/// Runs every method on every scenario. GN (initialized from the two-stage
/// estimate) is always computed as the ATE*/ARE* reference.
pub fn build_comparison_table(
    scenarios: &[ScenarioSpec],
    methods: &[Method],
    config: &SolverConfig,
) -> Result<Vec<BenchmarkRow>> {
    use rayon::prelude::*;
    scenarios
        .par_iter()
        .map(|spec| {
            let (graph, _) = generate_scenario(spec)?;
            compare_on_graph(&spec.label(), &graph, methods, config)
        })
        .collect()
}

pub fn compare_on_graph(
    label: &str,
    graph: &MultiRobotGraph,
    methods: &[Method],
    config: &SolverConfig,
) -> Result<BenchmarkRow> {
    let two_stage = solve_two_stage(graph)?;
    let gn = solve_gauss_newton(graph, &two_stage.estimate, &GaussNewtonOptions::default())?;
    let vertices: Vec<VertexId> = graph.vertices().copied().collect();
    let mut results = Vec::with_capacity(methods.len());
    for method in methods {
        let (estimate, k_r, k_p) = match method {
            Method::TwoStage => (two_stage.estimate.clone(), 0, 0),
            Method::Gn => (gn.estimate.clone(), gn.gn_iterations, gn.gn_iterations),
            _ => {
                let cfg = method.solver_config(config).expect("distributed method");
                let res = run_distributed_two_stage(graph, &cfg)?;
                (
                    res.estimate,
                    res.rotation_trace.iterations,
                    res.pose_trace.iterations,
                )
            }
        };
        results.push(MethodResult {
            method: method.name(),
            rotation_iterations: k_r,
            pose_iterations: k_p,
            cost: graph.cost(&estimate)?,
            ate_star: ate_star(&estimate, &gn.estimate, &vertices)?,
            are_star: are_star(&estimate, &gn.estimate, &vertices)?,
            eta_r: config.eta_r,
            eta_p: config.eta_p,
        });
    }
    Ok(BenchmarkRow {
        scenario: label.to_string(),
        results,
    })
}

#[derive(Debug, Serialize)]
struct CsvRecord<'a> {
    schema: u32,
    scenario: &'a str,
    method: &'a str,
    rotation_iterations: usize,
    pose_iterations: usize,
    cost: f64,
    ate_star_m: f64,
    are_star_deg: f64,
    eta_r: f64,
    eta_p: f64,
}

/// Long-format CSV, one line per (scenario, method).
pub fn write_benchmark_csv<W: std::io::Write>(rows: &[BenchmarkRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        for r in &row.results {
            w.serialize(CsvRecord {
                schema: CSV_SCHEMA_VERSION,
                scenario: &row.scenario,
                method: &r.method,
                rotation_iterations: r.rotation_iterations,
                pose_iterations: r.pose_iterations,
                cost: r.cost,
                ate_star_m: r.ate_star,
                are_star_deg: r.are_star,
                eta_r: r.eta_r,
                eta_p: r.eta_p,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

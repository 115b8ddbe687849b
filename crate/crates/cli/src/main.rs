use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use dpgo::assembly::{build_pose_system, build_rotation_system};
use dpgo::centralized::{
    solve_two_stage, solve_two_stage_then_gn, spanning_tree_estimate, GaussNewtonOptions,
};
use dpgo::io::{
    parse_graph, read_estimate_csv, write_estimate_csv, write_ledger_json, write_trace_csv,
    Manifest, RunConfig,
};
use dpgo::metrics::{ate_star, build_comparison_table, write_benchmark_csv, Method};
use dpgo::objects::{generate_object_scenario, ObjectSceneSpec};
use dpgo::runtime::{
    generate_scenario, monte_carlo, run_distributed_two_stage, run_seed, ScenarioSpec,
};
use dpgo::solvers::{jor_spectral_radius, jor_spectral_radius_dense, SolverConfig};
use dpgo::{Error, Estimate, MultiRobotGraph, Result, VertexId};

#[derive(Parser)]
#[command(
    name = "dpgo",
    version,
    about = "Distributed multi-robot pose graph optimization"
)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "DPGO_OUT_DIR", default_value = "dpgo-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic graph and its ground truth.
    Generate(InputArgs),
    /// Run one method and write the estimate, trace and ledger.
    Solve(SolveArgs),
    /// Monte Carlo comparison of methods over grid scenarios.
    Bench(BenchArgs),
    /// Spectral radius of the block Jacobi iteration.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Clone, Default)]
struct InputArgs {
    /// Grid scenario with this many robots.
    #[arg(long, group = "input")]
    grid: Option<usize>,
    /// Two-robot parallel tracks with this many links.
    #[arg(long, group = "input")]
    tracks: Option<usize>,
    /// Two-robot object scene.
    #[arg(long, group = "input")]
    objects: bool,
    /// Graph file.
    #[arg(long, group = "input")]
    graph: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rotation noise, degrees.
    #[arg(long)]
    sigma_r: Option<f64>,
    /// Translation noise, meters.
    #[arg(long)]
    sigma_t: Option<f64>,
}

#[derive(Args, Clone, Default)]
struct SolverArgs {
    /// dgs, dj, jor(γ), sor(γ), two-stage or gn.
    #[arg(long)]
    method: Option<String>,
    /// Sets both stopping thresholds.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    eta_r: Option<f64>,
    #[arg(long)]
    eta_p: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, overrides_with = "no_flagged")]
    flagged: bool,
    #[arg(long)]
    no_flagged: bool,
    /// Comma-separated robot order.
    #[arg(long, value_delimiter = ',')]
    sor_order: Option<Vec<usize>>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Run configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Ground truth CSV to score a graph file against.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Grid robot counts.
    #[arg(long, value_delimiter = ',', default_value = "4,9,16")]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "dgs,dj,two-stage,gn")]
    methods: Vec<String>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Rotation,
    Pose,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Relaxation factors.
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    gamma: Vec<f64>,
    #[arg(long, value_enum, default_value = "rotation")]
    phase: PhaseArg,
    /// Dense eigensolver instead of Lanczos.
    #[arg(long)]
    dense: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({ "error": "usage", "message": e.to_string().trim() })
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::Generate(input) => generate(&cli.out, &input),
        Command::Solve(args) => solve(&cli.out, &args),
        Command::Bench(args) => bench(&cli.out, &args),
        Command::Analyze(args) => analyze(&cli.out, &args),
    }
}

fn scenario_spec(input: &InputArgs) -> Option<ScenarioSpec> {
    let spec = match (input.grid, input.tracks) {
        (Some(n), _) => ScenarioSpec::grid(n, input.seed),
        (None, Some(links)) => ScenarioSpec::tracks(links, input.seed),
        (None, None) => return None,
    };
    let (r, t) = (
        input.sigma_r.unwrap_or(spec.sigma_r),
        input.sigma_t.unwrap_or(spec.sigma_t),
    );
    Some(spec.with_noise(r, t))
}

fn object_spec(input: &InputArgs) -> Option<ObjectSceneSpec> {
    input.objects.then(|| {
        let mut spec = ObjectSceneSpec::new(input.seed);
        spec.sigma_r = input.sigma_r.unwrap_or(spec.sigma_r);
        spec.sigma_t = input.sigma_t.unwrap_or(spec.sigma_t);
        spec
    })
}

fn base_config(input: &InputArgs, solver: &SolverArgs) -> Result<RunConfig> {
    let mut config = match &solver.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig {
            scenario: None,
            objects: None,
            graph: None,
            solver: SolverConfig::default(),
            method: Method::Dgs,
            out_dir: None,
        },
    };
    let from_flags = (
        scenario_spec(input),
        object_spec(input),
        input.graph.clone(),
    );
    if from_flags != (None, None, None) {
        (config.scenario, config.objects, config.graph) = from_flags;
    }
    apply_solver_flags(&mut config, solver)?;
    Ok(config)
}

fn apply_solver_flags(config: &mut RunConfig, flags: &SolverArgs) -> Result<()> {
    if let Some(m) = &flags.method {
        config.method = m.parse()?;
    }
    let s = &mut config.solver;
    if let Some(eta) = flags.eta {
        (s.eta_r, s.eta_p) = (eta, eta);
    }
    s.eta_r = flags.eta_r.unwrap_or(s.eta_r);
    s.eta_p = flags.eta_p.unwrap_or(s.eta_p);
    if flags.flagged {
        s.flagged_init = true;
    }
    if flags.no_flagged {
        s.flagged_init = false;
    }
    if let Some(order) = &flags.sor_order {
        s.sor_order = Some(order.clone());
    }
    s.max_iterations = flags.max_iterations.unwrap_or(s.max_iterations);
    if let Some(g) = flags.gamma {
        config.method = match config.method {
            Method::Dgs | Method::Sor(_) => Method::Sor(g),
            Method::Dj | Method::Jor(_) => Method::Jor(g),
            ref m => {
                return Err(Error::InvalidConfig(format!(
                    "--gamma does not apply to method {}",
                    m.name()
                )));
            }
        };
    }
    Ok(())
}

struct Input {
    graph: MultiRobotGraph,
    truth: Option<Estimate>,
}

fn load_input(config: &RunConfig) -> Result<Input> {
    if let Some(path) = &config.graph {
        return Ok(Input {
            graph: parse_graph(path)?,
            truth: None,
        });
    }
    if let Some(spec) = &config.objects {
        let scene = generate_object_scenario(spec)?;
        return Ok(Input {
            graph: scene.graph,
            truth: Some(scene.truth),
        });
    }
    let spec = config.scenario.as_ref().ok_or_else(|| {
        Error::InvalidConfig(
            "no input: pass --grid, --tracks, --objects, --graph or --config".into(),
        )
    })?;
    let (graph, truth) = generate_scenario(spec)?;
    Ok(Input {
        graph,
        truth: Some(truth),
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn generate(out: &Path, input: &InputArgs) -> Result<()> {
    if input.graph.is_some() {
        return Err(Error::InvalidConfig(
            "generate needs --grid, --tracks or --objects".into(),
        ));
    }
    let config = base_config(input, &SolverArgs::default())?;
    config.validate()?;
    let Input { mut graph, truth } = load_input(&config)?;
    // odometry-chained initial guess, so the file is usable by other tools
    for (v, p) in spanning_tree_estimate(&graph)? {
        graph.add_vertex(v, Some(p))?;
    }
    let truth = truth.expect("generated inputs have ground truth");

    let mut manifest = Manifest::new("generate", &config, config.seed())?;
    manifest.write_output(
        out,
        "graph.txt",
        dpgo::io::graph_to_string(&graph).as_bytes(),
    )?;
    manifest.write_output(
        out,
        "truth.csv",
        &csv_bytes(|b| write_estimate_csv(&truth, b))?,
    )?;
    manifest.save(out)?;
    println!(
        "{}",
        json!({ "vertices": graph.vertex_count(), "edges": graph.edges().len(), "robots": graph.robot_count() })
    );
    Ok(())
}

fn solve(out: &Path, args: &SolveArgs) -> Result<()> {
    let config = base_config(&args.input, &args.solver)?;
    config.validate()?;
    let Input { graph, truth } = load_input(&config)?;
    let truth = match &args.truth {
        Some(path) => Some(read_estimate_csv(std::fs::File::open(path)?)?),
        None => truth,
    };

    let mut manifest = Manifest::new("solve", &config, config.seed())?;
    let mut summary = json!({ "method": config.method.name(), "robots": graph.robot_count() });
    let estimate = match config.method.solver_config(&config.solver) {
        Some(solver) => {
            let res = run_distributed_two_stage(&graph, &solver)?;
            manifest.write_output(
                out,
                "trace.csv",
                &csv_bytes(|b| write_trace_csv(&res.rotation_trace, &res.pose_trace, b))?,
            )?;
            manifest.write_output(
                out,
                "ledger.json",
                &csv_bytes(|b| write_ledger_json(&res.ledger, b))?,
            )?;
            summary["cost"] = json!(res.cost);
            summary["rotation_iterations"] = json!(res.rotation_trace.iterations);
            summary["pose_iterations"] = json!(res.pose_trace.iterations);
            summary["converged"] = json!(res.rotation_trace.converged && res.pose_trace.converged);
            summary["total_bytes"] = json!(res.ledger.total_bytes());
            res.estimate
        }
        None => {
            let res = match config.method {
                Method::Gn => solve_two_stage_then_gn(&graph, &GaussNewtonOptions::default())?,
                _ => solve_two_stage(&graph)?,
            };
            summary["cost"] = json!(res.cost);
            summary["gn_iterations"] = json!(res.gn_iterations);
            summary["flagged"] = json!(res.flagged);
            res.estimate
        }
    };
    if let Some(truth) = truth {
        let common: Vec<VertexId> = estimate
            .keys()
            .filter(|v| truth.contains_key(v))
            .copied()
            .collect();
        if !common.is_empty() {
            summary["ate_vs_truth_m"] = json!(ate_star(&estimate, &truth, &common)?);
        }
    }
    manifest.write_output(
        out,
        "estimate.csv",
        &csv_bytes(|b| write_estimate_csv(&estimate, b))?,
    )?;
    manifest.write_output(out, "summary.json", &to_json(&summary)?)?;
    manifest.save(out)?;
    println!("{summary}");
    Ok(())
}

fn bench(out: &Path, args: &BenchArgs) -> Result<()> {
    let mut config = base_config(&InputArgs::default(), &args.solver)?;
    config.scenario = Some(ScenarioSpec::grid(
        *args.grid.first().unwrap_or(&4),
        args.seed,
    ));
    config.validate()?;
    let methods = args
        .methods
        .iter()
        .map(|m| m.parse())
        .collect::<Result<Vec<Method>>>()?;
    if args.runs == 0 {
        return Err(Error::InvalidConfig("--runs must be at least 1".into()));
    }
    let scenarios: Vec<ScenarioSpec> = args
        .grid
        .iter()
        .flat_map(|&n| (0..args.runs).map(move |i| ScenarioSpec::grid(n, run_seed(args.seed, i))))
        .collect();
    let rows = build_comparison_table(&scenarios, &methods, &config.solver)?;
    let dgs = Method::Dgs
        .solver_config(&config.solver)
        .expect("dgs is distributed");
    let summaries = args
        .grid
        .iter()
        .map(|&n| {
            Ok((
                n.to_string(),
                monte_carlo(&ScenarioSpec::grid(n, args.seed), &dgs, args.runs)?,
            ))
        })
        .collect::<Result<std::collections::BTreeMap<_, _>>>()?;

    let manifest_config = json!({ "grid": args.grid, "runs": args.runs, "seed": args.seed,
        "methods": args.methods, "solver": config.solver });
    let mut manifest = Manifest::new("bench", &manifest_config, Some(args.seed))?;
    manifest.write_output(
        out,
        "bench.csv",
        &csv_bytes(|b| write_benchmark_csv(&rows, b))?,
    )?;
    manifest.write_output(out, "montecarlo.json", &to_json(&summaries)?)?;
    manifest.save(out)?;
    println!("{}", serde_json::to_string(&summaries)?);
    Ok(())
}

fn analyze(out: &Path, args: &AnalyzeArgs) -> Result<()> {
    let config = base_config(&args.input, &SolverArgs::default())?;
    config.validate()?;
    let Input { graph, .. } = load_input(&config)?;
    let system = match args.phase {
        PhaseArg::Rotation => build_rotation_system(&graph)?,
        PhaseArg::Pose => {
            let central = solve_two_stage(&graph)?;
            let rotations = central
                .estimate
                .iter()
                .map(|(v, p)| (*v, p.rotation))
                .collect();
            build_pose_system(&graph, &rotations)?
        }
    };
    let mut estimates = Vec::new();
    for &gamma in &args.gamma {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        let est = if args.dense {
            jor_spectral_radius_dense(&system, gamma)?
        } else {
            jor_spectral_radius(&system, gamma)?
        };
        estimates.push(json!({
            "gamma": gamma,
            "lambda_min": est.lambda_min,
            "lambda_max": est.lambda_max,
            "spectral_radius": est.spectral_radius,
            "converges": est.predicts_convergence(),
            "method": est.method,
        }));
    }
    let phase = match args.phase {
        PhaseArg::Rotation => "rotation",
        PhaseArg::Pose => "pose",
    };
    let report = json!({ "phase": phase, "dim": system.dim(), "estimates": estimates });
    let mut manifest = Manifest::new(
        "analyze",
        &json!({ "run": config, "phase": phase, "gamma": args.gamma }),
        config.seed(),
    )?;
    manifest.write_output(out, "analysis.json", &to_json(&report)?)?;
    manifest.save(out)?;
    println!("{report}");
    Ok(())
}

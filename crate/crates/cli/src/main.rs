use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pilm::blocks::{build_block_system, BlockLayout};
use pilm::gen::{coordinate_error, generate, histogram, mean_incidence, GenConfig, MeasurementCounts};
use pilm::inner::InnerIterations;
use pilm::io::{read_problem, write_problem};
use pilm::outer::{AlphaMode, MuMode, SolveResult, SolverConfig, Status, Termination};
use pilm::partition::{build_variable_graph, induce_residual_partition, partition_variables, PartitionStats};
use pilm::report::{Algorithm, RunReport};
use pilm::runtime::{simulate_communication_volume, CommunicationVolume, WorkerPool};
use pilm::Problem;

const EXIT_USAGE: u8 = 2;
/// Power iterations for the norm estimates printed by `partition-info`.
const NORM_ITERS: usize = 50;

#[derive(Parser)]
#[command(
    name = "pilm",
    version,
    about = "Parallel inexact Levenberg-Marquardt for network adjustment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic network-adjustment problem.
    Generate(GenerateArgs),
    /// Solve a problem with PILM or classical LM.
    Solve(SolveArgs),
    /// Partition a problem and print block statistics.
    PartitionInfo(PartitionArgs),
    /// Time solves over a list of block counts.
    SweepK(SweepArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of points; must be a perfect square.
    #[arg(long)]
    n_hat: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
    /// Strip the ground truth from the written file.
    #[arg(long)]
    no_truth: bool,
    /// Multiplier on every observation's noise (0 gives exact observations).
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Pilm,
    Lm,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Pilm => Algorithm::Pilm,
            AlgorithmArg::Lm => Algorithm::Lm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MuModeArg {
    Practical,
    Theoretical,
    Delta,
}

#[derive(Args, Clone)]
struct SolverArgs {
    /// Number of variable blocks (ignored by `lm`).
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Fixed number of inner iterations.
    #[arg(long, default_value_t = 5)]
    ell: usize,
    /// Use adaptive inner iterations with this forcing constant instead of a fixed count.
    #[arg(long)]
    adaptive_eta: Option<f64>,
    #[arg(long, value_enum, default_value = "practical")]
    mu_mode: MuModeArg,
    /// C_µ for theoretical damping.
    #[arg(long, default_value_t = 2.0)]
    c_mu: f64,
    /// µ̄ and δ for the delta schedule.
    #[arg(long, default_value_t = 1.0)]
    mu_bar: f64,
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    /// Take α = 1 at every iteration instead of searching.
    #[arg(long)]
    full_step: bool,
    #[arg(long)]
    workers: Option<usize>,
    /// Wall-clock budget, e.g. `30`, `1.5s` or `2m`.
    #[arg(long, value_parser = parse_duration_s)]
    time_budget: Option<f64>,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Also stop once |g| falls below this fraction of its initial value.
    #[arg(long, default_value_t = 0.0)]
    grad_rtol: f64,
    #[arg(long, default_value_t = 0.0)]
    grad_tol: f64,
    /// Disable the 68/95/99.5 residual rule.
    #[arg(long)]
    no_sigma_rule: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SolveArgs {
    problem: PathBuf,
    #[arg(long, value_enum, default_value = "pilm")]
    algorithm: AlgorithmArg,
    #[command(flatten)]
    solver: SolverArgs,
    /// Write the JSON run report here (default: stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write one JSON line per outer iteration.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write per-iteration residual fractions as CSV.
    #[arg(long)]
    fractions_csv: Option<PathBuf>,
    /// Write coordinate-error histograms (initial and final) as CSV; needs ground truth.
    #[arg(long)]
    error_hist_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    /// Write the final coordinates as a JSON array.
    #[arg(long)]
    solution: Option<PathBuf>,
}

#[derive(Args)]
struct PartitionArgs {
    problem: PathBuf,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Inner iterations per outer step for the communication estimate.
    #[arg(long, default_value_t = 5)]
    ell: u64,
}

#[derive(Args)]
struct SweepArgs {
    problem: PathBuf,
    /// Comma-separated block counts; K = 1 runs classical LM.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    k_list: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output CSV (default: stdout).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn parse_duration_s(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let (num, scale) = if let Some(v) = s.strip_suffix("ms") {
        (v, 1e-3)
    } else if let Some(v) = s.strip_suffix('s') {
        (v, 1.0)
    } else if let Some(v) = s.strip_suffix('m') {
        (v, 60.0)
    } else if let Some(v) = s.strip_suffix('h') {
        (v, 3600.0)
    } else {
        (s, 1.0)
    };
    let v: f64 = num.trim().parse().map_err(|_| format!("invalid duration `{s}`"))?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(format!("invalid duration `{s}`"));
    }
    Ok(v * scale)
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        let inner = match self.adaptive_eta {
            Some(eta) => InnerIterations::Adaptive {
                eta,
                exponent: 1.0,
                max_ell: self.ell.max(1) * 10,
            },
            None => InnerIterations::Fixed { ell: self.ell },
        };
        let mu_mode = match self.mu_mode {
            MuModeArg::Practical => MuMode::practical(),
            MuModeArg::Theoretical => MuMode::Theoretical {
                mu_min: 1e-10,
                c_mu: self.c_mu,
            },
            MuModeArg::Delta => MuMode::delta_schedule(self.mu_bar, self.delta),
        };
        SolverConfig {
            k: self.k,
            inner,
            mu_mode,
            alpha_mode: if self.full_step {
                AlphaMode::FullStep
            } else {
                AlphaMode::default()
            },
            termination: Termination {
                grad_tol: self.grad_tol,
                grad_rtol: self.grad_rtol,
                sigma_fractions: (!self.no_sigma_rule).then_some([0.68, 0.95, 0.995]),
                max_outer_iters: self.max_iters,
                time_budget_s: self.time_budget,
            },
            seed: self.seed,
            workers: self.workers,
            ..SolverConfig::default()
        }
    }
}

fn status_code(s: Status) -> u8 {
    match s {
        Status::Converged(_) => 0,
        Status::MaxIters => 1,
        Status::TimeBudget => 3,
        Status::Stalled => 4,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load(path: &Path) -> Result<Problem> {
    read_problem(path).with_context(|| format!("cannot read problem {}", path.display()))
}

fn cmd_generate(a: &GenerateArgs) -> Result<u8> {
    let cfg = GenConfig {
        noise_scale: a.noise_scale,
        ..GenConfig::new(a.n_hat, a.seed)
    };
    let mut p = generate(&cfg)?;
    let counts = MeasurementCounts::of(&p);
    let incidence = mean_incidence(&p);
    if a.no_truth {
        p = p.without_ground_truth();
    }
    write_problem(&a.output, &p).with_context(|| format!("cannot write {}", a.output.display()))?;
    println!(
        "points {}  residuals {}  distance {}  angle {}  point-line {}  coordinate {}  mean incidence {:.2}",
        p.n_points(),
        p.m(),
        counts.distance,
        counts.angle,
        counts.point_line,
        counts.coordinate,
        incidence
    );
    Ok(0)
}

#[derive(Serialize)]
struct FractionRow {
    iteration: usize,
    f: f64,
    grad_norm: f64,
    within_1: f64,
    within_2: f64,
    within_3: f64,
}

#[derive(Serialize)]
struct HistRow {
    stage: &'static str,
    lower: f64,
    upper: f64,
    count: usize,
}

fn write_outputs(a: &SolveArgs, p: &Problem, report: &RunReport, res: &SolveResult) -> Result<()> {
    let json = report.to_json()?;
    match &a.report {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{json}")?;
            w.flush()?;
        }
        None => println!("{json}"),
    }
    if let Some(path) = &a.log {
        let mut w = create(path)?;
        for r in &res.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    if let Some(path) = &a.fractions_csv {
        let mut w = csv::Writer::from_writer(create(path)?);
        for r in &res.records {
            w.serialize(FractionRow {
                iteration: r.k,
                f: r.f,
                grad_norm: r.grad_norm,
                within_1: r.within_sigma[0],
                within_2: r.within_sigma[1],
                within_3: r.within_sigma[2],
            })?;
        }
        w.flush()?;
    }
    if let Some(path) = &a.error_hist_csv {
        let gt = p.ground_truth();
        let mut w = csv::Writer::from_writer(create(path)?);
        for (stage, x) in [("initial", p.initial_guess()), ("final", res.x.clone())] {
            let e = coordinate_error(&x, gt)?;
            for (lower, upper, count) in histogram(&e.errors, a.bins) {
                w.serialize(HistRow {
                    stage,
                    lower,
                    upper,
                    count,
                })?;
            }
        }
        w.flush()?;
    }
    if let Some(path) = &a.solution {
        let mut w = create(path)?;
        serde_json::to_writer(&mut w, &res.x)?;
        w.flush()?;
    }
    Ok(())
}

fn cmd_solve(a: &SolveArgs) -> Result<u8> {
    let p = load(&a.problem)?;
    if a.error_hist_csv.is_some() && p.ground_truth().is_none() {
        bail!("--error-hist-csv needs a problem with ground truth");
    }
    let mut cfg = a.solver.config();
    if matches!(a.algorithm, AlgorithmArg::Lm) {
        cfg.k = 1;
    }
    cfg.validate()?;
    let algorithm = Algorithm::from(a.algorithm);
    let res = algorithm.solve(&p, &cfg)?;
    let report = RunReport::new(algorithm, &cfg, &p, &res)?;
    write_outputs(a, &p, &report, &res)?;
    log::info!(
        "{:?} after {} iterations in {:.3}s",
        res.status,
        res.iterations(),
        res.timings.total
    );
    Ok(status_code(res.status))
}

#[derive(Serialize)]
struct PartitionInfo {
    #[serde(flatten)]
    stats: PartitionStats,
    edge_cut: u64,
    neighbors: Vec<Vec<usize>>,
    /// Estimated at the initial guess by power iteration.
    b_norm: f64,
    jtj_norm: f64,
    b_over_jtj: f64,
    communication: CommunicationVolume,
}

fn cmd_partition_info(a: &PartitionArgs) -> Result<u8> {
    let p = load(&a.problem)?;
    if a.k == 0 {
        bail!("K must be at least 1");
    }
    let g = build_variable_graph(&p);
    let pp = partition_variables(&g, a.k, a.seed)?;
    let part = induce_residual_partition(&p, &pp)?;
    let x0 = p.initial_guess();
    let jac = p.jacobian(&x0)?;
    let r = p.residuals(&x0)?;
    let pool = WorkerPool::new(1)?;
    let layout = Arc::new(BlockLayout::from_partition(&part));
    let bs = build_block_system(&jac, &r, &part, layout, &pool)?;
    let b_norm = bs.estimate_b_norm(NORM_ITERS, a.seed);
    let jtj_norm = jac.gram_norm_estimate(NORM_ITERS, a.seed);
    let info = PartitionInfo {
        stats: part.stats(),
        edge_cut: g.edge_cut(&pp.block_of),
        neighbors: (0..part.k()).map(|i| part.neighbors(i).to_vec()).collect(),
        b_norm,
        jtj_norm,
        b_over_jtj: if jtj_norm > 0.0 { b_norm / jtj_norm } else { 0.0 },
        communication: simulate_communication_volume(&part, 1, a.ell),
    };
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(0)
}

#[derive(Serialize)]
struct SweepRow {
    k: usize,
    repetition: usize,
    wall_time_s: f64,
    iterations: usize,
    status: String,
}

fn status_name(s: Status) -> String {
    match s {
        Status::Converged(c) => format!(
            "converged:{}",
            serde_json::to_value(c).unwrap_or_default().as_str().unwrap_or("")
        ),
        Status::MaxIters => "max_iters".into(),
        Status::TimeBudget => "time_budget".into(),
        Status::Stalled => "stalled".into(),
    }
}

fn cmd_sweep_k(a: &SweepArgs) -> Result<u8> {
    if a.k_list.is_empty() {
        bail!("--k-list must name at least one block count");
    }
    if a.k_list.contains(&0) {
        bail!("block counts must be at least 1");
    }
    if a.repetitions == 0 {
        bail!("--repetitions must be at least 1");
    }
    let p = load(&a.problem)?;
    let out: Box<dyn Write> = match &a.output {
        Some(path) => Box::new(create(path)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(out);
    for &k in &a.k_list {
        let cfg = SolverConfig { k, ..a.solver.config() };
        cfg.validate()?;
        let algorithm = if k == 1 { Algorithm::Lm } else { Algorithm::Pilm };
        for repetition in 0..a.repetitions {
            let t = Instant::now();
            let res = algorithm.solve(&p, &cfg)?;
            let wall_time_s = t.elapsed().as_secs_f64();
            log::info!("K = {k} repetition {repetition}: {:?} in {wall_time_s:.3}s", res.status);
            w.serialize(SweepRow {
                k,
                repetition,
                wall_time_s,
                iterations: res.iterations(),
                status: status_name(res.status),
            })?;
            w.flush()?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PILM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let out = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Solve(a) => cmd_solve(a),
        Command::PartitionInfo(a) => cmd_partition_info(a),
        Command::SweepK(a) => cmd_sweep_k(a),
    };
    match out {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

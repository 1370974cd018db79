mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{parse_mode, parse_recipe, DataSource, RunConfig, SolverKind};
use cvx_attn::arrangements::{cardinality_bound, gates_to_arrangements, ArrangementMode, ArrangementSet};
use cvx_attn::data::EmbeddingBatch;
use cvx_attn::heads::{Activation, ConvexVars, HeadSpec, Parametrization, Problem};
use cvx_attn::io::{self, VariableSet};
use cvx_attn::linalg::Mat;
use cvx_attn::nonconvex::{map_convex_to_nonconvex, map_nonconvex_to_convex, nc_objective};
use cvx_attn::norms::sample_constrained_ball;
use cvx_attn::solvers::{bm_solve, fista_solve, nc_solve, TrainReport};
use cvx_attn::synth::{generate, SynthDims};
use cvx_attn::verify::{self, Suite, VerifyOptions};
use cvx_attn::{Error, Result};

#[derive(Parser)]
#[command(name = "cvxattn", version, about = "Convex token-mixing heads: training, mappings and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Arrangement mode for ReLU heads: exhaustive, sampled or gated.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<ArrangementMode>,
    /// Named defaults applied to unset keys (`paper`).
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic embedding file.
    GenData {
        /// e.g. `gaussian_classes(k=3, sep=5)`, `planted_head(sa, linear)`, `blockdiag_gram(B=2)`.
        recipe: String,
        #[arg(long, default_value_t = 60)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        s: usize,
        #[arg(long, default_value_t = 6)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        c: usize,
        /// Neurons of a planted head.
        #[arg(long, default_value_t = 4)]
        m: usize,
        /// B-FNO groups of a planted head.
        #[arg(long, default_value_t = 1)]
        blocks: usize,
    },
    /// Solve the configured head; writes `report.json` and `variables.bin`.
    Train,
    /// Run property suites; exits non-zero if any check fails.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
        /// Seeds per check (default: per suite).
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Convert weights between the convex and non-convex forms.
    Map {
        #[arg(value_enum)]
        direction: Direction,
        /// Variable file to convert.
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// List the arrangement patterns of the configured head and data as JSON.
    Enumerate {
        /// Samples for sampled mode.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Sample the constrained nuclear-norm ball as CSV.
    Ball {
        /// Constraint rows `a,b;c,d`, `I` for the identity, `none` for no constraint.
        #[arg(long, default_value = "I")]
        k: String,
        #[arg(long, default_value_t = 2)]
        cols: usize,
        #[arg(long, default_value_t = 400)]
        count: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    ToNonconvex,
    ToConvex,
}

fn threads() -> usize {
    std::env::var("CVXATTN_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&t| t > 0).unwrap_or(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let c = cli.common;
    match cli.command {
        Command::GenData { recipe, n, s, d, c: outputs, m, blocks } => {
            let recipe = parse_recipe(&recipe).map_err(Error::InvalidArgument)?;
            let batch = generate(&recipe, SynthDims { n, s, d, c: outputs, m, blocks }, c.seed.unwrap_or(0))?;
            let out = c.out.unwrap_or_else(|| PathBuf::from("data.cvx"));
            io::write_embeddings(&out, &batch)?;
            println!("wrote {} ({} samples, {}x{} inputs, {}x{} targets)", out.display(), batch.n, batch.s, batch.d, batch.r, batch.c);
            Ok(ExitCode::SUCCESS)
        }
        Command::Train => train(&c),
        Command::Verify { suite, seeds } => verify_cmd(&suite, seeds, &c),
        Command::Map { direction, input } => map(direction, &input, &c),
        Command::Enumerate { budget } => enumerate(budget, &c),
        Command::Ball { k, cols, count } => ball(&k, cols, count, &c),
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p, c.preset.as_deref())?,
        None => RunConfig::empty(c.preset.as_deref())?,
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        cfg.solver_cfg.seed = seed;
    }
    if c.mode.is_some() {
        cfg.mode = c.mode;
    }
    cfg.solver_cfg.threads = threads();
    for w in &cfg.warnings {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<EmbeddingBatch> {
    match &cfg.data {
        Some(DataSource::File(p)) => io::read_embeddings(p),
        Some(DataSource::Synthetic(r)) => generate(r, cfg.dims, cfg.seed),
        None => Err(Error::InvalidArgument("config sets neither data.path nor data.recipe".into())),
    }
}

fn build_problem(spec: HeadSpec, batch: &EmbeddingBatch, cfg: &RunConfig) -> Result<Problem> {
    match spec.activation {
        Activation::Linear => Problem::new(spec, batch),
        Activation::GatedRelu => Problem::with_mode(spec, batch, ArrangementMode::Gated, 0, cfg.seed),
        Activation::Relu => match cfg.mode {
            Some(mode) => Problem::with_mode(spec, batch, mode, cfg.budget, cfg.seed),
            None => match Problem::with_mode(spec.clone(), batch, ArrangementMode::Exhaustive, 0, cfg.seed) {
                Err(Error::UnsupportedMode(r)) => {
                    eprintln!("warning: effective rank {r} > 2, sampling {} arrangements per group", cfg.budget);
                    Problem::with_mode(spec, batch, ArrangementMode::Sampled, cfg.budget, cfg.seed)
                }
                other => other,
            },
        },
    }
}

fn train(c: &Common) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    let batch = load_data(&cfg)?;
    let problem = build_problem(cfg.spec.clone(), &batch, &cfg)?;
    let bm_param = matches!(cfg.spec.param, Parametrization::Bm(_));
    let solver = match cfg.solver {
        SolverKind::Auto if cfg.spec.activation == Activation::Relu || bm_param => SolverKind::Bm,
        SolverKind::Auto => SolverKind::Fista,
        other => other,
    };
    let (set, report): (VariableSet, TrainReport) = match solver {
        SolverKind::Fista => {
            let (vars, rep) = fista_solve(&problem, &cfg.solver_cfg)?;
            (VariableSet::Convex { spec: cfg.spec.clone(), vars }, rep)
        }
        SolverKind::Bm => {
            let (f, rep) = bm_solve(&problem, &cfg.solver_cfg)?;
            (VariableSet::Convex { spec: cfg.spec.clone(), vars: ConvexVars::Factored(f) }, rep)
        }
        SolverKind::Nc => {
            let (weights, rep) = nc_solve(&problem, &cfg.solver_cfg)?;
            (VariableSet::Nonconvex { spec: cfg.spec.clone(), weights }, rep)
        }
        SolverKind::Auto => unreachable!(),
    };
    let out = c.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    std::fs::create_dir_all(&out)?;
    io::write_json(&out.join("report.json"), &report)?;
    io::write_variables(&out.join("variables.bin"), &set)?;

    println!("solver  {} ({:?}, {} iterations)", report.solver, report.status, report.iterations);
    println!("loss    {:.9e}", report.loss);
    println!("reg     {:.9e}", report.reg);
    println!("total   {:.9e}", report.total);
    if let Some(cert) = &report.certificate {
        println!("cert    {} (norm {:.6e} vs beta {:.3e}, gap {:.3e})", if cert.passes { "passes" } else { "fails" }, cert.spectral_norm, cert.beta, cert.gap);
    }
    if let Some(m) = &report.metrics {
        println!("top1    {:.4}", m.top1);
        println!("top5    {:.4}", m.top5);
    }
    println!("wrote   {}", out.display());
    if let Err(e) = report.check() {
        eprintln!("error: {e}");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_cmd(name: &str, seeds: Option<usize>, c: &Common) -> Result<ExitCode> {
    let suites = Suite::parse(name).ok_or_else(|| Error::InvalidArgument(format!("unknown suite `{name}`")))?;
    let opts = VerifyOptions { seeds, threads: threads() };
    let mut checks = Vec::new();
    let mut stdout = std::io::stdout().lock();
    for s in suites {
        let start = Instant::now();
        let found = verify::run(s, &opts)?;
        for ch in &found {
            writeln!(
                stdout,
                "{}  {:<12} {:<58} {:>10.3e} (tol {:.0e})  {}",
                if ch.passed { "PASS" } else { "FAIL" },
                ch.suite,
                ch.name,
                ch.value,
                ch.tolerance,
                ch.detail
            )?;
        }
        writeln!(stdout, "----  {:<12} {:.1} s", s.name(), start.elapsed().as_secs_f64())?;
        checks.extend(found);
    }
    let failed = checks.iter().filter(|ch| !ch.passed).count();
    writeln!(stdout, "{} checks, {} failed", checks.len(), failed)?;
    if let Some(out) = &c.out {
        io::write_json(out, &checks)?;
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn pattern_string(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn map(direction: Direction, input: &Path, c: &Common) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    let batch = load_data(&cfg)?;
    let set = io::read_variables(input)?;
    let spec = set.spec().clone();
    let problem = match (&set, spec.activation) {
        // Gated weights carry their gates; rebuild the program on exactly those.
        (VariableSet::Nonconvex { weights, .. }, Activation::GatedRelu) => {
            let groups = build_problem(spec.clone(), &batch, &cfg)?;
            let sets = weights
                .gates
                .iter()
                .zip(&groups.groups)
                .map(|(gates, g)| gates_to_arrangements(gates, &g.data))
                .collect::<Result<Vec<_>>>()?;
            Problem::with_arrangements(spec.clone(), &batch, sets)?
        }
        _ => build_problem(spec.clone(), &batch, &cfg)?,
    };
    let (convex, nonconvex, out_set) = match (direction, set) {
        (Direction::ToNonconvex, VariableSet::Convex { vars, .. }) => {
            let weights = match map_convex_to_nonconvex(&problem, &vars) {
                Err(Error::ConeViolation(v)) => {
                    eprintln!("error: left factor leaves its cone by {v:.3e}; the convex point has no exact ReLU factorization");
                    return Ok(ExitCode::from(1));
                }
                other => other?,
            };
            let convex = problem.objective(&vars)?.total;
            let nonconvex = nc_objective(&spec, &weights, &batch)?;
            (convex, nonconvex, VariableSet::Nonconvex { spec: spec.clone(), weights })
        }
        (Direction::ToConvex, VariableSet::Nonconvex { weights, .. }) => {
            let vars = match map_nonconvex_to_convex(&problem, &weights) {
                Err(Error::PatternMiss { group, pattern }) => {
                    eprintln!("error: neuron pattern {pattern} is not in the arrangement set of group {group}; available:");
                    for m in &problem.arrangements[group].masks {
                        eprintln!("  {}", pattern_string(m));
                    }
                    return Ok(ExitCode::from(1));
                }
                other => other?,
            };
            let convex = problem.objective(&vars)?.total;
            let nonconvex = nc_objective(&spec, &weights, &batch)?;
            (convex, nonconvex, VariableSet::Convex { spec: spec.clone(), vars })
        }
        (Direction::ToNonconvex, _) => return Err(Error::InvalidArgument("to-nonconvex needs a convex variable file".into())),
        (Direction::ToConvex, _) => return Err(Error::InvalidArgument("to-convex needs a non-convex weight file".into())),
    };
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("mapped.bin"));
    io::write_variables(&out, &out_set)?;
    println!("convex      {convex:.12e}");
    println!("nonconvex   {nonconvex:.12e}");
    println!("gap         {:.3e}", (convex - nonconvex).abs());
    println!("wrote       {}", out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GroupArrangements {
    group: usize,
    kind: String,
    mode: &'static str,
    rank: usize,
    rows: usize,
    cols: usize,
    count: usize,
    bound: f64,
    patterns: Vec<String>,
}

fn describe(g: usize, set: &ArrangementSet) -> GroupArrangements {
    GroupArrangements {
        group: g,
        kind: set.kind.name(),
        mode: set.mode.name(),
        rank: set.rank,
        rows: set.rows,
        cols: set.cols,
        count: set.len(),
        bound: cardinality_bound(set.rank, set.rows),
        patterns: set.masks.iter().map(|m| pattern_string(m)).collect(),
    }
}

fn enumerate(budget: Option<usize>, c: &Common) -> Result<ExitCode> {
    let mut cfg = load_config(c)?;
    if let Some(b) = budget {
        cfg.budget = b;
    }
    let batch = load_data(&cfg)?;
    let mut spec = cfg.spec.clone();
    if spec.activation == Activation::Linear {
        spec.activation = Activation::Relu;
    }
    let problem = build_problem(spec, &batch, &cfg)?;
    let groups: Vec<GroupArrangements> = problem.arrangements.iter().enumerate().map(|(g, s)| describe(g, s)).collect();
    let json = io::to_json(&groups)?;
    match &c.out {
        Some(p) => std::fs::write(p, json)?,
        None => print!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_k(spec: &str, dim_hint: usize) -> Result<Mat> {
    match spec.trim() {
        "I" | "identity" => Ok(Mat::identity(dim_hint, dim_hint)),
        "none" => Ok(Mat::zeros(1, dim_hint)),
        rows => {
            let parsed: Vec<Vec<f64>> = rows
                .split(';')
                .map(|r| r.split(',').map(|v| v.trim().parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidArgument(format!("bad K `{rows}`: {e}")))?;
            let cols = parsed[0].len();
            if parsed.iter().any(|r| r.len() != cols) {
                return Err(Error::InvalidArgument(format!("ragged K `{rows}`")));
            }
            Ok(Mat::from_row_iterator(parsed.len(), cols, parsed.into_iter().flatten()))
        }
    }
}

fn ball(k: &str, cols: usize, count: usize, c: &Common) -> Result<ExitCode> {
    let k = parse_k(k, 2)?;
    let samples = sample_constrained_ball(&k, cols, count, c.seed.unwrap_or(0));
    let csv = io::ball_csv(&samples, k.ncols(), cols)?;
    match &c.out {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

//! Experiment harness: `npql train|eval|verify|export-curves`.
//!
//! Exit codes: 0 ok, 1 usage error, 2 verification failure, 3 runtime error.

use clap::{Args, Parser, Subcommand};
use npql::env::{evaluate_success, scripted_expert, EnvConfig, ManipEnv, Task, TraceStep};
use npql::run::{read_curve, run_training, Checkpoint, RunConfig};
use npql::verify::{run_all, run_suite, SuiteReport};
use npql::NpqlError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "npql", version, about = "Train and verify KL-regularized non-parametric Q-learning agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training job to its environment-step budget.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the scripted expert) on fresh episodes.
    Eval(EvalArgs),
    /// Run the exact verification suites.
    Verify(VerifyArgs),
    /// Merge run metrics and render a success-rate SVG.
    ExportCurves(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set agent.gamma=0.95 (repeatable).
    #[arg(short, long = "set")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint JSON produced by `train`.
    #[arg(long, required_unless_present = "expert")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the scripted expert instead of a checkpoint.
    #[arg(long)]
    expert: bool,
    /// Task for --expert runs (taken from the checkpoint otherwise).
    #[arg(long)]
    task: Option<String>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write per-step JSON-lines traces here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite name, or "all".
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Machine-readable JSON report destination.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Run directories containing metrics.csv + config.toml.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Output directory for merged.csv and curves.svg.
    #[arg(long, default_value = "curves")]
    out: PathBuf,
}

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_for(err: &NpqlError) -> u8 {
    match err {
        NpqlError::InvalidConfig(_) | NpqlError::EmptyInput(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits; anything else is usage
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Verify(args) => cmd_verify(args),
        Command::ExportCurves(args) => cmd_export(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<u8, NpqlError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for spec in &args.set {
        cfg = cfg.with_override(spec)?;
    }
    cfg.validate()?;
    let result = run_training(&cfg, None)?;
    println!(
        "run complete: {} eval points, final success_rate {}",
        result.evals.len(),
        result.final_success
    );
    println!("metrics: {}", result.dir.join("metrics.csv").display());
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<u8, NpqlError> {
    if args.episodes == 0 {
        return Err(NpqlError::InvalidConfig("episodes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (env_cfg, rate) = if args.expert {
        let task: Task = args
            .task
            .as_deref()
            .ok_or_else(|| NpqlError::InvalidConfig("--expert needs --task".into()))?
            .parse()?;
        let env_cfg = EnvConfig::new(task);
        let mut env = ManipEnv::new(env_cfg.clone())?;
        let rate = expert_success(&env_cfg, args.episodes, &mut env, &mut rng)?;
        (env_cfg, rate)
    } else {
        let ckpt = Checkpoint::load(args.checkpoint.as_ref().unwrap())?;
        let env_cfg = EnvConfig::new(ckpt.config.task);
        let rate = evaluate_success(&env_cfg, args.episodes, &mut rng, |obs, r| {
            ckpt.learner.act(obs, r)
        })?;
        (env_cfg, rate)
    };
    println!("success_rate {rate}");
    if let Some(path) = &args.trace {
        write_traces(path, &env_cfg, args.expert, args.checkpoint.as_deref(), args.seed)?;
        println!("traces: {}", path.display());
    }
    Ok(0)
}

/// Expert rollouts need the environment state, which `evaluate_success`'s
/// observation-only closure hides; run the loop directly.
fn expert_success(
    cfg: &EnvConfig,
    episodes: usize,
    env: &mut ManipEnv,
    rng: &mut ChaCha8Rng,
) -> Result<f64, NpqlError> {
    let mut successes = 0usize;
    for _ in 0..episodes {
        env.reset(rng);
        loop {
            let action = scripted_expert(&env.state, cfg, rng);
            let (_, reward, done) = env.step(&action)?;
            if reward > 0.5 {
                successes += 1;
            }
            if done {
                break;
            }
        }
    }
    Ok(successes as f64 / episodes as f64)
}

fn write_traces(
    path: &Path,
    env_cfg: &EnvConfig,
    expert: bool,
    checkpoint: Option<&Path>,
    seed: u64,
) -> Result<(), NpqlError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ace);
    let mut env = ManipEnv::new(env_cfg.clone())?;
    let ckpt = match checkpoint {
        Some(p) if !expert => Some(Checkpoint::load(p)?),
        _ => None,
    };
    let mut steps = Vec::new();
    for _ in 0..5 {
        let mut obs = env.reset(&mut rng);
        loop {
            let action = match &ckpt {
                Some(c) => c.learner.act(&obs, &mut rng)?,
                None => scripted_expert(&env.state, env_cfg, &mut rng),
            };
            let state = env.state.clone();
            let (next, reward, done) = env.step(&action)?;
            steps.push(TraceStep {
                state,
                action,
                reward,
            });
            if done {
                break;
            }
            obs = next;
        }
    }
    let mut file = fs::File::create(path)?;
    npql::env::write_trace(&mut file, &steps)
}

fn cmd_verify(args: VerifyArgs) -> Result<u8, NpqlError> {
    let reports: Vec<SuiteReport> = if args.suite == "all" {
        run_all(args.seed)?
    } else {
        vec![run_suite(&args.suite, args.seed)?]
    };
    let mut failed = false;
    for r in &reports {
        println!(
            "{}: {} ({} checks, {:.2}s)",
            r.suite,
            if r.passed { "pass" } else { "FAIL" },
            r.checks,
            r.seconds
        );
        for f in r.failures.iter().take(5) {
            println!("  {f}");
        }
        failed |= !r.passed;
    }
    if let Some(path) = &args.report {
        let text =
            serde_json::to_string_pretty(&reports).map_err(|e| NpqlError::Serde(e.to_string()))?;
        fs::write(path, text)?;
    }
    Ok(if failed { EXIT_VERIFY } else { 0 })
}

struct Curve {
    algorithm: String,
    seed: u64,
    points: Vec<(usize, f64)>,
}

fn cmd_export(args: ExportArgs) -> Result<u8, NpqlError> {
    let mut curves: Vec<Curve> = Vec::new();
    for dir in &args.runs {
        let metrics = dir.join("metrics.csv");
        let config = dir.join("config.toml");
        if !metrics.exists() || !config.exists() {
            eprintln!("warning: skipping {} (missing metrics or config)", dir.display());
            continue;
        }
        let cfg = RunConfig::load(&config)?;
        let points = read_curve(&metrics)?
            .into_iter()
            .map(|p| (p.env_steps, p.success_rate))
            .collect();
        curves.push(Curve {
            algorithm: cfg.algorithm.name().to_string(),
            seed: cfg.seed,
            points,
        });
    }
    if curves.is_empty() {
        return Err(NpqlError::EmptyInput("no usable run directories".into()));
    }
    curves.sort_by(|a, b| (&a.algorithm, a.seed).cmp(&(&b.algorithm, b.seed)));
    fs::create_dir_all(&args.out)?;

    let mut merged = String::from("algorithm,seed,env_steps,success_rate\n");
    for c in &curves {
        for &(steps, rate) in &c.points {
            merged.push_str(&format!("{},{},{steps},{rate}\n", c.algorithm, c.seed));
        }
    }
    fs::write(args.out.join("merged.csv"), &merged)?;
    fs::write(args.out.join("curves.svg"), render_svg(&curves))?;
    println!("wrote {} and {}", args.out.join("merged.csv").display(), args.out.join("curves.svg").display());
    Ok(0)
}

const PALETTE: &[(&str, &str)] = &[
    ("ap-npql", "#1f77b4"),
    ("ap-mpo", "#ff7f0e"),
    ("ap-sac", "#2ca02c"),
    ("sac", "#d62728"),
];

fn color_for(alg: &str) -> &'static str {
    PALETTE
        .iter()
        .find(|(a, _)| *a == alg)
        .map(|(_, c)| *c)
        .unwrap_or("#7f7f7f")
}

/// Deterministic fixed-viewport plot: one mean polyline per algorithm plus a
/// min/max band across seeds.
fn render_svg(curves: &[Curve]) -> String {
    const W: f64 = 800.0;
    const H: f64 = 500.0;
    const ML: f64 = 60.0; // margins
    const MR: f64 = 20.0;
    const MT: f64 = 20.0;
    const MB: f64 = 50.0;
    let max_steps = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let x = |steps: usize| ML + (W - ML - MR) * steps as f64 / max_steps;
    let y = |rate: f64| H - MB - (H - MT - MB) * rate.clamp(0.0, 1.0);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" width=\"{W}\" height=\"{H}\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB
    ));
    for tick in 0..=5 {
        let rate = tick as f64 / 5.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{rate:.1}</text>\n",
            ML - 6.0,
            y(rate) + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">env steps (max {max_steps})</text>\n",
        (ML + W - MR) / 2.0,
        H - 14.0
    ));

    let mut algs: Vec<&str> = curves.iter().map(|c| c.algorithm.as_str()).collect();
    algs.dedup();
    for (slot, alg) in algs.iter().enumerate() {
        let group: Vec<&Curve> = curves.iter().filter(|c| c.algorithm == *alg).collect();
        // union of eval grids; per-step mean/min/max over seeds holding the
        // latest value for coarser grids
        let mut grid: Vec<usize> = group.iter().flat_map(|c| c.points.iter().map(|p| p.0)).collect();
        grid.sort_unstable();
        grid.dedup();
        let value_at = |c: &Curve, step: usize| -> f64 {
            let mut v = c.points.first().map(|p| p.1).unwrap_or(0.0);
            for &(s, r) in &c.points {
                if s <= step {
                    v = r;
                } else {
                    break;
                }
            }
            v
        };
        let stats: Vec<(usize, f64, f64, f64)> = grid
            .iter()
            .map(|&s| {
                let vals: Vec<f64> = group.iter().map(|c| value_at(c, s)).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (s, mean, lo, hi)
            })
            .collect();
        let color = color_for(alg);
        if group.len() > 1 {
            let mut band = String::new();
            for &(s, _, lo, _) in &stats {
                band.push_str(&format!("{},{} ", x(s), y(lo)));
            }
            for &(s, _, _, hi) in stats.iter().rev() {
                band.push_str(&format!("{},{} ", x(s), y(hi)));
            }
            svg.push_str(&format!(
                "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n",
                band.trim_end()
            ));
        }
        let line: String = stats
            .iter()
            .map(|&(s, mean, _, _)| format!("{},{}", x(s), y(mean)))
            .collect::<Vec<_>>()
            .join(" ");
        svg.push_str(&format!(
            "<polyline points=\"{line}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n"
        ));
        let ly = MT + 16.0 * slot as f64 + 10.0;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            ML + 10.0,
            ML + 34.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">{alg}</text>\n",
            ML + 40.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

//! `tspo`: generate datasets, train the temporal agent, evaluate sampling
//! policies and check gradients.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage, 3 generation
//! exhausted, 4 format or I/O, 5 dimension mismatch.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use tspo_core::agent::{AgentConfig, NoiseReuse};
use tspo_core::checkpoint::load_checkpoint;
use tspo_core::datapipe::{self, FilterConfig, Recipe, StyleMix};
use tspo_core::evalbench::{self, EvalReport, Policy, ReportFormat};
use tspo_core::gradcheck::{run_grad_check, GradCheckConfig};
use tspo_core::tspo::{train, TrainOutputs, TrainState, TrainerConfig};
use tspo_core::worldsim::{OracleConfig, World, WorldConfig};
use tspo_core::Error;

use manifest::{now_ms, sibling, RunManifest};

#[derive(Parser, Debug)]
#[command(
    name = "tspo",
    version,
    about = "Temporal sampling policy optimization lab"
)]
struct Cli {
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = "TSPO_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train the temporal agent on a dataset.
    Train(TrainArgs),
    /// Evaluate sampling policies on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StyleArg {
    Needle,
    Comprehensive,
    Mixed,
}

impl From<StyleArg> for StyleMix {
    fn from(s: StyleArg) -> Self {
        match s {
            StyleArg::Needle => StyleMix::Needle,
            StyleArg::Comprehensive => StyleMix::Comprehensive,
            StyleArg::Mixed => StyleMix::Mixed,
        }
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output dataset file [default: <out-dir>/dataset.tsds].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Candidate frames per record.
    #[arg(long, default_value_t = 128)]
    tc: usize,
    #[arg(long, value_enum, default_value_t = StyleArg::Mixed)]
    style: StyleArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames in the needle clip.
    #[arg(long, default_value_t = 8)]
    target_frames: usize,
    #[arg(long, default_value_t = 0.3)]
    event_noise: f64,
    #[arg(long, default_value_t = 0.3)]
    query_noise: f64,
    #[arg(long, default_value_t = 0.5)]
    gap_scale: f64,
    #[arg(long, default_value_t = 4)]
    choices: usize,
    /// Frames a needle group needs before the answerer is reliable.
    #[arg(long, default_value_t = 4)]
    needle_threshold: usize,
    /// Maximum generation attempts [default: max(100, 20·n)].
    #[arg(long)]
    attempts: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file [default: <out-dir>/checkpoint.txt].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    group: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.025)]
    tau: f64,
    #[arg(long, default_value_t = 12)]
    window: usize,
    /// Frames selected per rollout.
    #[arg(long, default_value_t = 16)]
    ts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ratio clip epsilon; unclipped when omitted.
    #[arg(long)]
    clip: Option<f64>,
    /// KL penalty weight against the initial policy.
    #[arg(long)]
    kl_beta: Option<f64>,
    #[arg(long, default_value_t = 1)]
    inner_epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    fusion_weight: f64,
    /// Re-evaluate stored actions with their Gumbel noise or without it.
    #[arg(long, value_parser = ["stored", "noise-free"], default_value = "stored")]
    noise_reuse: String,
    /// Also checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint; the seeded untrained agent is used when omitted.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Policies to compare [default: all].
    #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
    policy: Vec<Policy>,
    #[arg(long, default_value_t = 64)]
    ts: usize,
    /// Report file [default: <out-dir>/report.<format>].
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_parser = ["json", "csv"], default_value = "json")]
    format: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Agent settings used when no checkpoint is given.
    #[arg(long, default_value_t = 12)]
    window: usize,
    #[arg(long, default_value_t = 0.025)]
    tau: f64,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    Policy::parse(s).ok_or_else(|| {
        let names: Vec<_> = Policy::ALL.iter().map(|p| p.as_str()).collect();
        format!("unknown policy {s:?}; expected one of {}", names.join(", "))
    })
}

/// Failure carrying its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) => 2,
            Error::GenerationExhausted { .. } => 3,
            Error::Format { .. } | Error::Io { .. } => 4,
            Error::DimensionMismatch(_) => 5,
            Error::DegenerateInput(_) | Error::Numerical(_) => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(&cli.out_dir, a),
        Command::Train(a) => cmd_train(&cli.out_dir, a),
        Command::Eval(a) => cmd_eval(&cli.out_dir, a),
        Command::GradCheck(a) => cmd_grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn resolve(explicit: &Option<PathBuf>, out_dir: &Path, default_name: &str) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| out_dir.join(default_name))
}

fn cmd_gen(out_dir: &Path, a: &GenArgs) -> CmdResult {
    let started = now_ms();
    let out = resolve(&a.out, out_dir, "dataset.tsds");
    let world_cfg = WorldConfig {
        feature_dim: a.dim,
        event_noise: a.event_noise,
        query_noise: a.query_noise,
        modality_gap_scale: a.gap_scale,
        n_choices: a.choices,
        seed: a.seed,
        ..WorldConfig::default()
    };
    let recipe = Recipe {
        n_samples: a.n,
        style: a.style.into(),
        candidate_frames: a.tc,
        target_frames: a.target_frames,
        attempt_budget: a.attempts,
        ..Recipe::default()
    };
    let oracle = OracleConfig {
        needle_threshold: a.needle_threshold,
        ..OracleConfig::default()
    };
    let filter = FilterConfig::default();
    let world = World::new(world_cfg.clone())?;
    // The world's hidden map uses stream 0 of the seed; samples use stream 1.
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    rng.set_stream(1);
    let (dataset, stats) = datapipe::build_dataset(&world, &recipe, &oracle, &filter, &mut rng)?;
    let bytes = datapipe::write_dataset(&out, &dataset)?;
    print!("{}", stats.report());
    println!(
        "wrote {} records ({bytes} bytes) to {}",
        dataset.len(),
        out.display()
    );
    RunManifest {
        command: "gen".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: json!({
            "world": world_cfg,
            "recipe": recipe,
            "attempt_budget": recipe.attempts(),
            "oracle": oracle,
            "filter": filter,
            "stats": stats,
        }),
        seeds: json!({ "world": a.seed, "sampling": a.seed, "sampling_stream": 1 }),
        inputs: vec![],
        outputs: vec![out.clone()],
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    }
    .write_next_to(&out)?;
    Ok(())
}

fn cmd_train(out_dir: &Path, a: &TrainArgs) -> CmdResult {
    let started = now_ms();
    let out = resolve(&a.out, out_dir, "checkpoint.txt");
    let metrics_path = sibling(&out, "metrics.jsonl");
    let dataset = datapipe::read_dataset(&a.data)?;
    let agent = AgentConfig {
        feature_dim: dataset.feature_dim,
        window: a.window,
        temperature: a.tau,
        select_count: a.ts,
        sim_fusion_weight: a.fusion_weight,
        noise_reuse: NoiseReuse::parse(&a.noise_reuse).expect("clap restricts values"),
    };
    agent.validate()?;
    let cfg = TrainerConfig {
        group_size: a.group,
        learning_rate: a.lr,
        inner_epochs: a.inner_epochs,
        clip_epsilon: a.clip,
        kl_beta: a.kl_beta,
        train_select: a.ts,
        seed: a.seed,
        record_wall_time: false,
    };
    cfg.validate()?;
    let mut state = match &a.resume {
        Some(path) => {
            let (saved, state) = load_checkpoint(path)?;
            if saved.feature_dim != agent.feature_dim {
                return Err(Error::DimensionMismatch(format!(
                    "checkpoint has dimension {}, dataset has {}",
                    saved.feature_dim, agent.feature_dim
                ))
                .into());
            }
            if saved != agent {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint agent settings {saved:?} differ from the flags {agent:?}"
                ))
                .into());
            }
            state
        }
        None => TrainState::new(&agent, &cfg),
    };
    let resumed_at = state.step;
    let outputs = TrainOutputs {
        metrics: Some(&metrics_path),
        checkpoint: Some(&out),
        checkpoint_every: a.checkpoint_every,
    };
    let records = train(&mut state, &dataset, &agent, &cfg, &outputs)?;
    println!(
        "trained {} steps (from step {resumed_at} to {})",
        records.len(),
        state.step
    );
    println!("wrote {} and {}", out.display(), metrics_path.display());
    let tail = &records[records.len().saturating_sub(100)..];
    let mean = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().map(|r| r.mean_reward).sum::<f64>() / tail.len() as f64
    };
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.resume.clone());
    RunManifest {
        command: "train".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: json!({
            "agent": agent,
            "trainer": cfg,
            "checkpoint_every": a.checkpoint_every,
            "resumed_at_step": resumed_at,
            "final_step": state.step,
        }),
        seeds: json!({ "trainer": a.seed }),
        inputs,
        outputs: vec![out.clone(), metrics_path],
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    }
    .write_next_to(&out)?;
    println!("mean reward over last {} steps: {mean:.6}", tail.len());
    Ok(())
}

fn cmd_eval(out_dir: &Path, a: &EvalArgs) -> CmdResult {
    let started = now_ms();
    let format = ReportFormat::parse(&a.format).expect("clap restricts values");
    let report_path = resolve(&a.report, out_dir, &format!("report.{}", a.format));
    let dataset = datapipe::read_dataset(&a.data)?;
    let policies = if a.policy.is_empty() {
        Policy::ALL.to_vec()
    } else {
        a.policy.clone()
    };
    let (agent, params, source) = match &a.ckpt {
        Some(path) => {
            let (agent, state) = load_checkpoint(path)?;
            (agent, state.params, path.display().to_string())
        }
        None => {
            let agent = AgentConfig {
                feature_dim: dataset.feature_dim,
                window: a.window,
                temperature: a.tau,
                ..AgentConfig::default()
            };
            agent.validate()?;
            let cfg = TrainerConfig {
                seed: a.seed,
                ..TrainerConfig::default()
            };
            let params = TrainState::new(&agent, &cfg).params;
            (agent, params, "untrained".to_string())
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut reports = Vec::with_capacity(policies.len());
    for &policy in &policies {
        reports.push(evalbench::evaluate(
            &params, &agent, &dataset, policy, a.ts, &mut rng,
        )?);
    }
    let names: Vec<&str> = policies.iter().map(|p| p.as_str()).collect();
    let config = [
        ("data", a.data.display().to_string()),
        ("agent", source),
        ("policies", names.join(",")),
        ("ts", a.ts.to_string()),
        ("seed", a.seed.to_string()),
        ("window", agent.window.to_string()),
        ("tau", format!("{:?}", agent.temperature)),
        ("fusion_weight", format!("{:?}", agent.sim_fusion_weight)),
        ("format", a.format.clone()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let report = EvalReport {
        dataset_digest: evalbench::dataset_digest(&dataset)?,
        config,
        policies: reports,
    };
    evalbench::export_report(&report, &report_path, format)?;
    for p in &report.policies {
        println!(
            "{:<10} accuracy {:.4} recall {:.4} reward {:.4} coverage {:.4}",
            p.policy.as_str(),
            p.accuracy,
            p.recall,
            p.mean_reward,
            p.group_coverage
        );
    }
    println!("wrote {}", report_path.display());
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.ckpt.clone());
    RunManifest {
        command: "eval".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: json!({ "agent": agent, "report": report.config }),
        seeds: json!({ "eval": a.seed, "untrained_init": a.ckpt.is_none().then_some(a.seed) }),
        inputs,
        outputs: vec![report_path.clone()],
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    }
    .write_next_to(&report_path)?;
    Ok(())
}

fn cmd_grad_check(a: &GradCheckArgs) -> CmdResult {
    let report = run_grad_check(&GradCheckConfig {
        trials: a.trials,
        tolerance: a.tol,
        seed: a.seed,
    })?;
    let worst = report.worst().expect("at least one trial");
    println!(
        "{} of {} trials within tolerance {:e}",
        report.trials.len() - report.failures(),
        report.trials.len(),
        a.tol
    );
    println!(
        "worst relative error {:e} ({}) at seed {} (frames {}, dim {}, window {}, select {}, tau {:.4})",
        worst.worst.1,
        worst.worst.0.as_str(),
        worst.seed,
        worst.frames,
        worst.dim,
        worst.window,
        worst.select_count,
        worst.temperature
    );
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!(
                "{} trials failed; replay the worst with --seed {} --trials 1",
                report.failures(),
                worst.seed
            ),
        })
    }
}

//! `sidecar`: command-line front end for the hybrid side-car model toolkit.
//!
//! Exit codes: 0 success (and, for `validate`/`audit-gates`, all checks
//! passing), 1 check failure, 2 usage error, 3 I/O error, 4 data validation
//! error. Failures emit a machine-readable JSON object on stderr:
//! `{"error": "<kind>", "message": "..."}`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sidecar_cli::error::{CliError, EXIT_CHECK_FAILED};
use sidecar_cli::{data, format};
use sidecar_core::{
    copy_task_batches, divergence_eval, gate_audit, ics_score, run_validation_gate, train,
    GatePolicy, HippoVariant, HybridModel, IcsError, ModelConfig, SsmCore, SsmState, TrainableMask,
    ValidationArgs,
};

#[derive(Parser)]
#[command(
    name = "sidecar",
    version,
    about = "Gated HiPPO side-cars on a frozen toy transformer: init, train, evaluate, validate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a LegS state-space core on a sine signal and emit
    /// t,input,reconstruction CSV rows.
    HippoDemo(HippoDemoArgs),
    /// Initialize a hybrid model from a JSON config and write it to a file.
    ModelInit(ModelInitArgs),
    /// Train the extension parameters on JSONL byte data.
    Train(TrainArgs),
    /// Per-token KL divergence of an adapted model against a base reference.
    EvalDivergence(EvalDivergenceArgs),
    /// Audit recorded parameter initializations against the zero-init policy.
    AuditGates(AuditGatesArgs),
    /// Run the ordered validation pipeline; exit 0 only if every check passes.
    Validate(ValidateArgs),
    /// Score a rubric-scored response suite.
    IcsScore(IcsScoreArgs),
}

#[derive(Args)]
struct HippoDemoArgs {
    /// State count N of the LegS core.
    #[arg(long, default_value_t = 16)]
    n_states: usize,
    /// Discretization step.
    #[arg(long, default_value_t = 0.05)]
    dt: f64,
    /// Number of recurrence steps to drive.
    #[arg(long, default_value_t = 400)]
    steps: usize,
    /// Number of reconstruction samples over the elapsed window.
    #[arg(long, default_value_t = 200)]
    points: usize,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelInitArgs {
    /// Model config JSON; omits to use the desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Training data: JSONL with a `bytes` field per record.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Trainable parameter groups, comma separated
    /// (gates,ssm_projections,lora); defaults to the mask stored in the file.
    #[arg(long)]
    mask: Option<String>,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalDivergenceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    base: PathBuf,
    /// Probe set: JSONL with a `bytes` field per record.
    #[arg(long)]
    probes: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AuditGatesArgs {
    #[arg(long)]
    model: PathBuf,
    /// Absolute tolerance on recorded initialization values.
    #[arg(long, default_value_t = 0.0)]
    tolerance: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Zero-gate/zero-LoRA reference model.
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    probes: PathBuf,
    /// Smoke-training data; the bundled copy task is used when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Smoke-training steps.
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Smoke-training learning rate.
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Hard cost cap for the budget gate, dollars.
    #[arg(long, default_value_t = 20.0)]
    budget_cap: f64,
    /// Steps the budgeted run would take.
    #[arg(long, default_value_t = 25_908)]
    planned_steps: u64,
    /// Cost per thousand steps, dollars.
    #[arg(long, default_value_t = 0.62)]
    cost_per_kstep: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct IcsScoreArgs {
    /// Scored responses: JSONL with prompt_id, category, consistency,
    /// engagement, reasoning.
    #[arg(long = "in")]
    input: PathBuf,
    /// Enforce the canonical 50-prompt suite shape.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            let payload = serde_json::json!({ "error": err.kind, "message": err.message });
            eprintln!("{payload}");
            ExitCode::from(err.code)
        }
    }
}

fn run(command: Command) -> Result<u8, CliError> {
    match command {
        Command::HippoDemo(args) => hippo_demo(args),
        Command::ModelInit(args) => model_init(args),
        Command::Train(args) => run_train(args),
        Command::EvalDivergence(args) => eval_divergence(args),
        Command::AuditGates(args) => audit_gates(args),
        Command::Validate(args) => validate(args),
        Command::IcsScore(args) => run_ics(args),
    }
}

fn load_model(path: &Path) -> Result<HybridModel, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    format::decode(&bytes).map_err(CliError::model_file)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

// ─── hippo-demo ──────────────────────────────────────────────────────────

fn hippo_demo(args: HippoDemoArgs) -> Result<u8, CliError> {
    if args.steps == 0 {
        return Err(CliError::data(
            "invalid_argument",
            "steps must be at least 1".into(),
        ));
    }
    let core = SsmCore::new(args.n_states, HippoVariant::StandardLegs, args.dt)
        .map_err(|e| CliError::data("invalid_argument", e.to_string()))?;
    let horizon = args.steps as f64 * args.dt;
    let signal = |t: f64| (2.0 * std::f64::consts::PI * t / horizon).sin();
    let inputs: Vec<f64> = (0..args.steps)
        .map(|k| signal((k + 1) as f64 * args.dt))
        .collect();
    let states = core.scan(&inputs, &SsmState::zero(args.n_states));
    let last = states.last().expect("steps >= 1");
    let recon = core
        .reconstruct_legendre(last, args.points)
        .map_err(|e| CliError::data("invalid_argument", e.to_string()))?;

    let mut csv = String::from("t,input,reconstruction\n");
    for (i, value) in recon.iter().enumerate() {
        let t = if args.points == 1 {
            horizon
        } else {
            horizon * i as f64 / (args.points - 1) as f64
        };
        csv.push_str(&format!("{t},{},{value}\n", signal(t)));
    }
    match args.out {
        Some(path) => write_file(&path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(0)
}

// ─── model-init ──────────────────────────────────────────────────────────

fn model_init(args: ModelInitArgs) -> Result<u8, CliError> {
    let mut config = match &args.config {
        Some(path) => data::load_config(path)?,
        None => ModelConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let model =
        HybridModel::init(config).map_err(|e| CliError::data("invalid_config", e.to_string()))?;
    let bytes = format::encode(&model);
    write_file(&args.out, &bytes)?;

    let params: usize = model
        .extension_parameters()
        .iter()
        .chain(model.backbone_parameters().iter())
        .map(|(_, v)| v.len())
        .sum();
    if args.json {
        println!(
            "{}",
            serde_json::json!({
                "written": args.out.display().to_string(),
                "bytes": bytes.len(),
                "parameters": params,
                "seed": model.config().seed,
            })
        );
    } else {
        println!(
            "wrote {} ({} parameters, {} bytes, seed {})",
            args.out.display(),
            params,
            bytes.len(),
            model.config().seed
        );
    }
    Ok(0)
}

// ─── train ───────────────────────────────────────────────────────────────

fn parse_mask(raw: &str) -> Result<TrainableMask, CliError> {
    let mut mask = TrainableMask::NONE;
    for part in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "gates" => mask.gates = true,
            "ssm_projections" => mask.ssm_projections = true,
            "lora" => mask.lora = true,
            other => {
                return Err(CliError::data(
                    "invalid_argument",
                    format!("unknown mask group {other} (expected gates, ssm_projections, lora)"),
                ))
            }
        }
    }
    Ok(mask)
}

fn run_train(args: TrainArgs) -> Result<u8, CliError> {
    let mut model = load_model(&args.model)?;
    if let Some(mask) = &args.mask {
        model.set_trainable_mask(parse_mask(mask)?);
    }
    let cfg = model.config();
    let batches = data::load_train_batches(&args.data, cfg.max_seq_len, cfg.vocab_size, 8)?;
    let report = train(&mut model, &batches, args.steps, args.lr)
        .map_err(|e| CliError::data("training_failed", e.to_string()))?;
    write_file(&args.out, &format::encode(&model))?;

    if args.json {
        println!(
            "{}",
            serde_json::to_string(&report).expect("report serializes")
        );
    } else {
        println!(
            "trained {} steps: loss {:.6} -> {:.6}, perplexity {:.4}; wrote {}",
            report.steps,
            report.initial_loss,
            report.final_loss,
            report.perplexity,
            args.out.display()
        );
    }
    Ok(0)
}

// ─── eval-divergence ─────────────────────────────────────────────────────

fn eval_divergence(args: EvalDivergenceArgs) -> Result<u8, CliError> {
    let adapted = load_model(&args.model)?;
    let base = load_model(&args.base)?;
    let cfg = adapted.config();
    let probes = data::load_probes(&args.probes, cfg.max_seq_len, cfg.vocab_size)?;
    let report = divergence_eval(&adapted, &base, &probes)
        .map_err(|e| CliError::data("divergence_failed", e.to_string()))?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string(&report).expect("report serializes")
        );
    } else {
        println!(
            "mean KL {:.6e} nats, max {:.6e} over {} probes{}",
            report.mean_kl,
            report.max_kl,
            report.per_probe.len(),
            if report.identical_models {
                " [identical models]"
            } else {
                ""
            }
        );
    }
    Ok(0)
}

// ─── audit-gates ─────────────────────────────────────────────────────────

fn audit_gates(args: AuditGatesArgs) -> Result<u8, CliError> {
    let model = load_model(&args.model)?;
    let policy = GatePolicy {
        tolerance: args.tolerance,
        ..GatePolicy::default()
    };
    let violations = gate_audit(&model, &policy);
    if args.json {
        println!(
            "{}",
            serde_json::to_string(&violations).expect("violations serialize")
        );
    } else if violations.is_empty() {
        println!("clean: all initialization records match the policy");
    } else {
        for v in &violations {
            println!(
                "violation: {}[{}] = {} expected {} (severity {:.3})",
                v.group, v.index, v.actual, v.expected, v.severity
            );
        }
    }
    Ok(if violations.is_empty() {
        0
    } else {
        EXIT_CHECK_FAILED
    })
}

// ─── validate ────────────────────────────────────────────────────────────

fn validate(args: ValidateArgs) -> Result<u8, CliError> {
    let model = load_model(&args.model)?;
    let base = load_model(&args.base)?;
    let cfg = model.config().clone();
    let probes = data::load_probes(&args.probes, cfg.max_seq_len, cfg.vocab_size)?;
    let batches = match &args.data {
        Some(path) => data::load_train_batches(path, cfg.max_seq_len, cfg.vocab_size, 8)?,
        None => copy_task_batches(4, 8, cfg.max_seq_len.min(24), cfg.vocab_size, cfg.seed),
    };
    let vargs = ValidationArgs {
        smoke_steps: args.steps,
        smoke_lr: args.lr,
        planned_steps: args.planned_steps,
        cost_per_kstep: args.cost_per_kstep,
        budget_cap: args.budget_cap,
        ..ValidationArgs::default()
    };
    let report = run_validation_gate(&model, &base, &probes, &batches, &vargs);

    if args.json {
        println!(
            "{}",
            serde_json::to_string(&report).expect("report serializes")
        );
    } else {
        for check in &report.checks {
            println!(
                "[{}] {:<28} value {:<14.6e} {}",
                if check.pass { "PASS" } else { "FAIL" },
                check.check.name(),
                check.value,
                check.detail
            );
        }
        for kind in &report.not_run {
            println!("[----] {:<28} not run", kind.name());
        }
        println!(
            "overall: {}",
            if report.overall_pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(if report.overall_pass {
        0
    } else {
        EXIT_CHECK_FAILED
    })
}

// ─── ics-score ───────────────────────────────────────────────────────────

fn run_ics(args: IcsScoreArgs) -> Result<u8, CliError> {
    let responses = data::load_scores(&args.input)?;
    match ics_score(&responses, args.strict) {
        Ok(result) => {
            if args.json {
                println!(
                    "{}",
                    serde_json::to_string(&result).expect("result serializes")
                );
            } else {
                println!(
                    "ICS composite: {:.4} over {} responses{}",
                    result.composite,
                    result.n_responses,
                    if result.strict { " (strict)" } else { "" }
                );
                for cat in &result.per_category {
                    match cat.mean {
                        Some(mean) => println!(
                            "  {:<18} n={:<3} mean {:.4}",
                            format!("{:?}", cat.category),
                            cat.count,
                            mean
                        ),
                        None => println!(
                            "  {:<18} n=0   (no responses)",
                            format!("{:?}", cat.category)
                        ),
                    }
                }
            }
            Ok(0)
        }
        Err(IcsError::SuiteInvalid(issues)) | Err(IcsError::InvalidScores(issues)) => {
            Err(CliError::data(
                "suite_invalid",
                serde_json::to_string(&issues).expect("issues serialize"),
            ))
        }
        Err(IcsError::Empty) => Err(CliError::data(
            "empty_input",
            "no responses to score".into(),
        )),
    }
}

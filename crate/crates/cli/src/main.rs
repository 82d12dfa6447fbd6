use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use phaselab::harness::{self, ExperimentPlan, Overrides};
use phaselab::tensor::Precision;
use phaselab::Error;

#[derive(Parser)]
#[command(name = "phaselab", version, about = "Phase-transition and reading-time experiments on toy transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every cell of the plan's grid; finished runs are skipped, unfinished ones restart.
    Train(PlanArgs),
    /// Per-checkpoint PS, SAS, UAS, ICL and validation loss with breakthroughs.
    Metrics(PlanArgs),
    /// Per-head pattern-preserving ablation against reading times.
    Ablate(PlanArgs),
    /// ΔLL trajectories, tipping points, pre/post correlations and permutation tests.
    Ppp(PlanArgs),
    /// Write a synthetic corpus, reading times and a two-cell plan.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Finite-difference checks of every primitive and the regularized loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per primitive.
        #[arg(long, default_value_t = 100)]
        instances: u64,
        #[arg(long, value_enum, default_value = "f64")]
        precision: PrecisionArg,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replace the plan's seed list with this one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint schedule scale.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load_plan(args: &PlanArgs) -> Result<ExperimentPlan, Failure> {
    let mut plan = ExperimentPlan::load(&args.plan)?;
    plan.apply(&Overrides {
        seed: args.seed,
        checkpoint_scale: args.scale,
        precision: args.precision.map(Into::into),
    });
    plan.validate()?;
    Ok(plan)
}

fn print_json(v: &impl serde::Serialize) -> Result<(), Failure> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))?;
    // a closed pipe (e.g. `| head`) is not a failure of the command
    let _ = writeln!(std::io::stdout(), "{s}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => {
            let plan = load_plan(&a)?;
            let summary = harness::cmd_train(&plan, &a.out, a.jobs)?;
            print_json(&summary)?;
            let failed = summary.failed();
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} of {} runs failed", summary.runs.len())));
            }
        }
        Command::Metrics(a) => {
            let plan = load_plan(&a)?;
            print_json(&harness::cmd_metrics(&plan, &a.out, a.jobs)?)?;
        }
        Command::Ablate(a) => {
            let plan = load_plan(&a)?;
            print_json(&harness::cmd_ablate(&plan, &a.out, a.jobs)?)?;
        }
        Command::Ppp(a) => {
            let plan = load_plan(&a)?;
            print_json(&harness::cmd_ppp(&plan, &a.out, a.jobs)?)?;
        }
        Command::GenSynthetic { out, seed, scale } => {
            print_json(&harness::gen_synthetic(&out, seed, scale)?)?;
        }
        Command::Gradcheck {
            seed,
            instances,
            precision,
            out,
        } => {
            if matches!(precision, PrecisionArg::F32) {
                return Err(Failure::Validation(
                    "finite-difference checks need f64; rerun with --precision f64".into(),
                ));
            }
            let summary = harness::gradcheck_suite(instances, instances.min(10), seed)?;
            print_json(&summary)?;
            if let Some(path) = out {
                write_report(&path, &summary)?;
            }
            let worst = summary.worst();
            if !(worst < 1e-4) {
                return Err(Failure::Runtime(format!("max relative error {worst:e} exceeds 1e-4")));
            }
        }
    }
    Ok(())
}

fn write_report(path: &Path, v: &impl serde::Serialize) -> Result<(), Failure> {
    let bytes = serde_json::to_vec_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

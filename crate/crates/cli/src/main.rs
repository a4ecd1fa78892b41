//! `adasample` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid configuration or input,
//! 3 runtime failure (including a failed gradient check).

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use adasample::config::ConfigError;
use adasample::run::RunError;
use adasample::sampler::SamplerMode;
use adasample::{Frontend, HarnessError, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "adasample", version, about = "Adaptive event sampling toolkit")]
struct Cli {
    /// Run configuration (TOML); flags override its values.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flags that override run-configuration values.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// Seed from which every random stream of the run is derived.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(short, long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 lets the pool decide.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub frontend: Option<FrontendArg>,
    #[arg(long, global = true)]
    pub mode: Option<ModeArg>,
    /// Embedding slots K.
    #[arg(long, global = true)]
    pub slots: Option<usize>,
    /// Early-aggregation steps T_m.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Global window T in microseconds.
    #[arg(long, global = true)]
    pub window_us: Option<u64>,
    /// Sampler firing threshold.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[arg(long, global = true)]
    pub rpd: Option<bool>,
    #[arg(long, global = true)]
    pub sat: Option<bool>,
    #[arg(long, global = true)]
    pub train_count: Option<usize>,
    #[arg(long, global = true)]
    pub test_count: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FrontendArg {
    Sampler,
    EventCount,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Snn,
    Rsnn,
    Arsnn,
}

impl Overrides {
    fn apply(&self, run: &mut RunConfig) {
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(run.seed, self.seed);
        set!(run.output, self.out.clone());
        set!(run.threads, self.threads);
        set!(run.train.epochs, self.epochs);
        set!(run.train.batch, self.batch);
        set!(run.train.adam.lr, self.lr);
        set!(
            run.model.frontend,
            self.frontend.map(|f| match f {
                FrontendArg::Sampler => Frontend::Sampler,
                FrontendArg::EventCount => Frontend::EventCount,
            })
        );
        set!(
            run.model.sampler.mode,
            self.mode.map(|m| match m {
                ModeArg::Snn => SamplerMode::Snn,
                ModeArg::Rsnn => SamplerMode::Rsnn,
                ModeArg::Arsnn => SamplerMode::Arsnn,
            })
        );
        set!(run.model.sampler.slots, self.slots);
        set!(run.model.steps, self.steps);
        set!(run.model.window_us, self.window_us);
        set!(run.model.sampler.threshold, self.threshold);
        set!(run.model.sampler.rpd, self.rpd);
        set!(run.model.sampler.sat, self.sat);
        set!(run.data.train, self.train_count);
        set!(run.data.test, self.test_count);
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic event streams and their annotations.
    Gen(commands::GenArgs),
    /// Convert a stream into frames of one representation.
    Aggregate(commands::AggregateArgs),
    /// Run the sampler on a stream; write the embedding and its windows.
    Sample(commands::SampleArgs),
    /// Train a detector; write checkpoints, metric log, summary and plots.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on the test set.
    Eval(commands::EvalArgs),
    /// Compare detector gradients with finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Energy estimate from operation counts or from a trained detector.
    Energy(commands::EnergyArgs),
    /// Print stream statistics.
    Stats(commands::StatsArgs),
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Invalid(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidConfig(_) | HarnessError::Synth(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => c.into(),
            RunError::Harness(h) => h.into(),
            RunError::Mismatch(m) => Failure::Invalid(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

/// Loads the configuration file (or defaults), applies flag overrides and
/// validates the result.
fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut run = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut run);
    run.validate()?;
    Ok(run)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = resolve(&cli).and_then(|run| {
        if run.threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(run.threads)
                .build_global()
                .map_err(|e| Failure::Runtime(e.to_string()))?;
        }
        match &cli.command {
            Command::Gen(a) => commands::gen(&run, a),
            Command::Aggregate(a) => commands::aggregate(&run, a),
            Command::Sample(a) => commands::sample(&run, a),
            Command::Train(a) => commands::train(&run, a),
            Command::Eval(a) => commands::eval(&run, &cli.overrides, a),
            Command::Gradcheck(a) => commands::gradcheck(&run, a),
            Command::Energy(a) => commands::energy(&run, &cli.overrides, a),
            Command::Stats(a) => commands::stats(&run, a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

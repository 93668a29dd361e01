//! `tsfm`: run experiments, benchmark suites and overhead comparisons.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration error, 3 failure
//! while running. Diagnostics go to stderr; results go to files or stdout.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use tsfm_kit::bench::{self, BenchSuite, ExperimentConfig, OverheadConfig};
use tsfm_kit::decoders::DECODER_TYPES;
use tsfm_kit::encoders::ENCODER_TYPES;
use tsfm_kit::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "tsfm", version, about = "Time-series pipeline benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write its results.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output_dir` in the config.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum)]
        metrics: Option<Switch>,
    },
    /// Run a suite of experiments and emit one CSV table.
    Bench {
        /// JSON document with an `experiments` list.
        #[arg(long)]
        config: PathBuf,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Time the pipeline against hand-chained components.
    Compare {
        /// Optional JSON overhead config; defaults to the reference setup.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        predict_batches: Option<usize>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the registered component types.
    List,
    /// Check a config's shapes and names without touching data.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

/// A failure with the exit code it maps to.
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME },
            message: e.to_string(),
        }
    }
}

fn config_failure(e: Error) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: e.to_string(),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        message: format!("{}: {e}", path.display()),
    }
}

pub fn cli_main(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            config,
            seed,
            output,
            metrics,
        } => run(&config, seed, output, metrics),
        Command::Bench { config, output } => bench_suite(&config, output.as_deref()),
        Command::Compare {
            config,
            predict_batches,
            repetitions,
            seed,
        } => compare(config.as_deref(), predict_batches, repetitions, seed),
        Command::List => {
            list();
            Ok(())
        }
        Command::Validate { config } => validate(&config),
    }
}

fn run(path: &Path, seed: Option<u64>, output: Option<PathBuf>, metrics: Option<Switch>) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::from_path(path).map_err(config_failure)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = metrics {
        cfg.metrics = m == Switch::On;
    }
    if output.is_some() {
        cfg.output_dir = output;
    }
    cfg.validate().map_err(|e| config_failure(e.context(path.display().to_string())))?;
    let result = bench::run_experiment(&cfg).map_err(|e| Failure::from(e.context(path.display().to_string())))?;
    if let Some(dir) = &cfg.output_dir {
        result.write(dir)?;
    }
    let label = if result.name.is_empty() { path.display().to_string() } else { result.name.clone() };
    println!("{label}\t{}={}", result.metric_name, result.metric_value);
    Ok(())
}

fn bench_suite(path: &Path, output: Option<&Path>) -> Result<(), Failure> {
    let suite = BenchSuite::from_path(path).map_err(config_failure)?;
    for (i, cfg) in suite.experiments.iter().enumerate() {
        cfg.validate()
            .map_err(|e| config_failure(e.context(format!("{}: experiments[{i}]", path.display()))))?;
    }
    let results = match output {
        Some(out) => bench::run_suite(&suite, out)?,
        None => bench::run_suite_to(&suite, std::io::stdout().lock())?,
    };
    if let Some(out) = output {
        eprintln!("wrote {} rows to {}", results.len(), out.display());
    }
    Ok(())
}

fn compare(
    path: Option<&Path>,
    predict_batches: Option<usize>,
    repetitions: Option<usize>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_failure(Error::Config(format!("{}: {e}", p.display()))))?;
            serde_json::from_str::<OverheadConfig>(&text)
                .map_err(|e| config_failure(Error::Config(format!("{}: invalid overhead config: {e}", p.display()))))?
        }
        None => OverheadConfig::default(),
    };
    if let Some(n) = predict_batches {
        cfg.predict_batches = n;
    }
    if let Some(n) = repetitions {
        cfg.repetitions = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = bench::compare_overhead(&cfg)?;
    let text = serde_json::to_string_pretty(&report).expect("plain struct");
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| io_failure(Path::new("<stdout>"), e))?;
    Ok(())
}

fn list() {
    println!("encoder\t{}", ENCODER_TYPES.join(", "));
    println!("backbone\treference_transformer");
    println!("adapter\tlora");
    println!("decoder\t{}", DECODER_TYPES.join(", "));
}

fn validate(path: &Path) -> Result<(), Failure> {
    let cfg = ExperimentConfig::from_path(path).map_err(config_failure)?;
    cfg.validate().map_err(|e| config_failure(e.context(path.display().to_string())))?;
    println!("{}: ok", path.display());
    Ok(())
}

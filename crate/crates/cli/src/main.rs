//! `advscope`: command-line driver for the analysis pipeline.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use advscope_core::Error;

#[derive(Parser)]
#[command(name = "advscope", version, about = "Adversarial-attack interpretability workbench")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset.
    GenData(GenData),
    /// Train MiniNet, holding out every n-th image as the test split.
    Train(Train),
    /// Attack the correctly classified test images with PGD.
    Attack(Attack),
    /// Fill the vulnerability-map and dendrogram caches of a run.
    Precompute(Precompute),
    /// Serve the HTTP API for a run.
    Serve(Serve),
    /// Write PNG/JSON artifacts for one pair.
    Export(Export),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    holdout_every: usize,
    #[arg(long, default_value = "model.bin")]
    out: PathBuf,
}

#[derive(Args)]
struct Attack {
    #[arg(long, default_value = "model.bin")]
    model: PathBuf,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// L∞ radius.
    #[arg(long, default_value_t = 8.0 / 255.0)]
    eps: f64,
    /// Step size.
    #[arg(long, default_value_t = 2.0 / 255.0)]
    alpha: f64,
    #[arg(long, default_value_t = 7)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start from the clean image instead of a random point in the ball.
    #[arg(long)]
    no_random_start: bool,
    #[arg(long, default_value_t = 5)]
    holdout_every: usize,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Space {
    Probability,
    Logit,
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkageArg {
    Average,
    Complete,
    Single,
}

#[derive(Args)]
struct VulnArgs {
    /// Substitution patch size.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Stride between patch centers.
    #[arg(long, default_value_t = 1)]
    s: usize,
    #[arg(long, value_enum, default_value = "probability")]
    space: Space,
}

#[derive(Args)]
struct Precompute {
    #[arg(long, default_value = "run")]
    run: PathBuf,
    #[command(flatten)]
    vuln: VulnArgs,
    /// Top fraction used when binarizing maps; validated here and
    /// recorded in the report.
    #[arg(long, default_value_t = advscope_core::vulnmap::DEFAULT_TOP_FRACTION)]
    q: f64,
    /// Receptive-field threshold for the dendrograms.
    #[arg(long, default_value_t = advscope_core::rf::DEFAULT_THRESHOLD)]
    t: f64,
    #[arg(long, value_enum, default_value = "average")]
    linkage: LinkageArg,
}

#[derive(Args)]
struct Serve {
    #[arg(long, default_value = "run")]
    run: PathBuf,
    #[arg(long, env = "ADVSCOPE_ADDR", default_value = advscope_server::DEFAULT_ADDR)]
    addr: String,
    /// In-memory response cache budget.
    #[arg(long, default_value_t = 256)]
    cache_mb: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum What {
    Rf,
    Vulnmap,
    Dendrogram,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Benign,
    Adv,
}

#[derive(Args)]
struct Export {
    #[arg(long, default_value = "run")]
    run: PathBuf,
    #[arg(long)]
    pair: usize,
    #[arg(long, value_enum)]
    what: What,
    /// Neuron for `--what rf`.
    #[arg(long, default_value_t = 0)]
    neuron: usize,
    /// Image side for rf; map side for vulnmap.
    #[arg(long, value_enum, default_value = "benign")]
    side: SideArg,
    #[arg(long, default_value_t = advscope_core::rf::DEFAULT_THRESHOLD)]
    t: f64,
    #[command(flatten)]
    vuln: VulnArgs,
    #[arg(long, default_value_t = advscope_core::vulnmap::DEFAULT_TOP_FRACTION)]
    q: f64,
    #[arg(long, value_enum, default_value = "average")]
    linkage: LinkageArg,
    #[arg(long, default_value = "export")]
    out: PathBuf,
}

/// A failure with its exit code: 2 validation, 3 io/format, 4 compute.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }

    pub fn compute(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::InvalidInput(_) | Error::InvalidParameter { .. } | Error::NotFound { .. } => Self::validation(message),
            Error::Io(_) | Error::Json(_) | Error::Format(_) | Error::InvalidModel(_) => Self::io(message),
            Error::TrainingDiverged { .. } | Error::InsufficientMembers { .. } => Self::compute(message),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::validation("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::compute(e.to_string()))?;
    }
    let wd = cli.workdir;
    match cli.command {
        Command::GenData(a) => commands::gen_data(&wd, a),
        Command::Train(a) => commands::train(&wd, a),
        Command::Attack(a) => commands::attack(&wd, a),
        Command::Precompute(a) => commands::precompute(&wd, a),
        Command::Serve(a) => commands::serve(&wd, a),
        Command::Export(a) => commands::export(&wd, a),
    }
}

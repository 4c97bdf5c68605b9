//! `emharness`: run entity matching experiments against chat-completion
//! models and analyze the results.

mod commands;
mod config;
mod rundir;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

/// Command failures, mapped to exit codes: config errors exit 2, backend and
/// credential errors 3, degraded runs (parse failures present) 4, everything
/// else 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Backend(String),
    Degraded(String),
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Degraded(_) => 4,
            CliError::Internal(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Backend(m)
            | CliError::Degraded(m)
            | CliError::Internal(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "emharness",
    version,
    about = "Entity matching experiments against chat-completion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a benchmark directory and print split summaries.
    Ingest(IngestArgs),
    /// Match the test split with the configured prompt designs.
    Run(Box<RunArgs>),
    /// Ask the model to explain each decision of a finished run.
    Explain(ExplainArgs),
    /// Derive error classes from a run's mistakes and classify every error.
    AnalyzeErrors(AnalyzeErrorsArgs),
    /// Summarize token usage and cost for a finished run.
    Cost(CostArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Benchmark directory holding dev.csv and/or test.csv.
    #[arg(long)]
    dir: PathBuf,
    /// Display name; defaults to the directory name.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value = "entity descriptions")]
    domain_noun: String,
    /// Column mapping file (JSON).
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Write normalized copies of the splits here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment manifest (TOML); flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long)]
    domain_noun: Option<String>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Model identifier sent with every request.
    #[arg(long)]
    model: Option<String>,
    /// "scripted" or "hosted".
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    /// Script file for the scripted backend.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Comma-separated design names, or "all".
    #[arg(long, value_delimiter = ',')]
    designs: Option<Vec<String>>,
    /// "related", "random", or "handpicked".
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pair file for the handpicked strategy.
    #[arg(long)]
    handpicked: Option<PathBuf>,
    /// Text file with one matching rule per line.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Pair file to learn rules from before matching.
    #[arg(long)]
    learn_rules_from: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Upper bound on request starts per second.
    #[arg(long)]
    rate_limit: Option<f64>,
    #[arg(long)]
    max_output_tokens: Option<u32>,
    /// Response cache file shared between runs.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    runs_root: Option<PathBuf>,
    /// Price table (JSON) for cost columns in the report.
    #[arg(long)]
    prices: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    run_id: String,
    /// Design to explain; defaults to the first one in the run.
    #[arg(long)]
    design: Option<String>,
    #[arg(long, default_value = "runs")]
    runs_root: PathBuf,
}

#[derive(Args)]
struct AnalyzeErrorsArgs {
    run_id: String,
    /// Design to analyze; defaults to the first one in the run.
    #[arg(long)]
    design: Option<String>,
    /// CSV of pair_id,polarity,classes agreed by a human annotator.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Chunk error synthesis prompts at this many whitespace tokens.
    #[arg(long)]
    synthesis_token_budget: Option<u64>,
    #[arg(long, default_value = "runs")]
    runs_root: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    run_id: String,
    /// Run to compare against; defaults to the run itself.
    #[arg(long)]
    baseline: Option<String>,
    /// Price table (JSON); defaults to the run's configured table.
    #[arg(long)]
    prices: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    runs_root: PathBuf,
}

fn merged_config(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_toml_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &args.run_id {
        config.run_id = Some(v.clone());
    }
    if let Some(v) = &args.dataset_dir {
        config.dataset.dir = Some(v.clone());
    }
    if let Some(v) = &args.domain_noun {
        config.dataset.domain_noun = Some(v.clone());
    }
    if let Some(v) = &args.schema {
        config.dataset.schema = Some(v.clone());
    }
    if let Some(v) = &args.model {
        config.model.id = Some(v.clone());
    }
    if let Some(v) = &args.backend {
        config.model.backend = Some(v.clone());
    }
    if let Some(v) = &args.endpoint {
        config.model.endpoint = Some(v.clone());
    }
    if let Some(v) = &args.script {
        config.model.script = Some(v.clone());
    }
    if let Some(v) = &args.designs {
        config.prompt.designs = Some(v.clone());
    }
    if let Some(v) = &args.strategy {
        config.prompt.strategy = Some(v.clone());
    }
    if let Some(v) = args.shots {
        config.prompt.shots = Some(v);
    }
    if let Some(v) = args.seed {
        config.prompt.seed = Some(v);
    }
    if let Some(v) = &args.handpicked {
        config.prompt.handpicked = Some(v.clone());
    }
    if let Some(v) = &args.rules {
        config.prompt.rules = Some(v.clone());
    }
    if let Some(v) = &args.learn_rules_from {
        config.prompt.learn_rules_from = Some(v.clone());
    }
    if let Some(v) = args.parallelism {
        config.execution.parallelism = Some(v);
    }
    if let Some(v) = args.rate_limit {
        config.execution.rate_limit_per_sec = Some(v);
    }
    if let Some(v) = args.max_output_tokens {
        config.execution.max_output_tokens = Some(v);
    }
    if let Some(v) = &args.cache {
        config.execution.cache = Some(v.clone());
    }
    if let Some(v) = &args.runs_root {
        config.execution.runs_root = Some(v.clone());
    }
    if let Some(v) = &args.prices {
        config.execution.prices = Some(v.clone());
    }
    Ok(config)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(args) => {
            commands::cmd_ingest(args.dir, args.dataset, args.domain_noun, args.schema, args.out)
        }
        Command::Run(args) => {
            let merged = merged_config(&args)?;
            let resolved = config::resolve(&merged)?;
            commands::cmd_run(resolved)
        }
        Command::Explain(args) => {
            commands::cmd_explain(&args.runs_root, &args.run_id, args.design)
        }
        Command::AnalyzeErrors(args) => commands::cmd_analyze_errors(
            &args.runs_root,
            &args.run_id,
            args.design,
            args.annotations,
            args.synthesis_token_budget,
        ),
        Command::Cost(args) => {
            commands::cmd_cost(&args.runs_root, &args.run_id, args.baseline, args.prices)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}

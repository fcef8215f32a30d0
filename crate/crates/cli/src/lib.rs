//! `knowrec` pipeline orchestration: dataset construction, SFT export,
//! knowledge inference, CTR training and evaluation.

pub mod config;
pub mod pipeline;

use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

pub use config::PipelineConfig;
pub use pipeline::{Backends, Pipeline};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or missing inputs, detected before any output.
    Config(String),
    /// The pipeline started and then failed.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "pipeline aborted: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub(crate) fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub(crate) fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Line-oriented JSON events: `{"event": name, ...fields}`.
pub struct Logger {
    sink: Mutex<Box<dyn Write + Send>>,
}

impl Logger {
    pub fn stderr() -> Self {
        Self::to(Box::new(std::io::stderr()))
    }

    pub fn to(sink: Box<dyn Write + Send>) -> Self {
        Self {
            sink: Mutex::new(sink),
        }
    }

    pub fn discard() -> Self {
        Self::to(Box::new(std::io::sink()))
    }

    pub fn event(&self, name: &str, fields: Value) {
        let mut line = Map::new();
        line.insert("event".into(), name.into());
        if let Value::Object(extra) = fields {
            line.extend(extra);
        }
        let mut sink = self.sink.lock().expect("log lock");
        let _ = writeln!(sink, "{}", Value::Object(line));
    }
}

#[derive(Debug, Parser)]
#[command(name = "knowrec", version, about = "Knowledge-augmented CTR pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build reasoning, reflection and refinement datasets.
    Build(CommonArgs),
    /// Export SFT pairs and fine-tuning metadata.
    Export(CommonArgs),
    /// Infer user and item knowledge and embed it.
    Infer(CommonArgs),
    /// Train base and knowledge-fused CTR models.
    Train(CommonArgs),
    /// Evaluate both checkpoints and write the comparison table.
    Eval(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Build(_) => "build",
            Command::Export(_) => "export",
            Command::Infer(_) => "infer",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Build(a)
            | Command::Export(a)
            | Command::Infer(a)
            | Command::Train(a)
            | Command::Eval(a) => a,
        }
    }
}

pub fn load_config(args: &CommonArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli, log: Logger) -> Result<(), CliError> {
    let name = cli.command.name();
    let args = cli.command.args().clone();
    let cfg = load_config(&args)?;
    log.event(
        "start",
        serde_json::json!({ "command": name, "seed": cfg.seed, "out_dir": cfg.out_dir }),
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers)
        .build()
        .map_err(config_err)?;
    let pipeline = Pipeline::new(cfg, log);
    let result = pool.install(|| match cli.command {
        Command::Build(_) => pipeline.build(),
        Command::Export(_) => pipeline.export(),
        Command::Infer(_) => pipeline.infer(),
        Command::Train(_) => pipeline.train(),
        Command::Eval(_) => pipeline.eval(),
    });
    match &result {
        Ok(()) => pipeline.log.event("done", serde_json::json!({ "command": name })),
        Err(e) => pipeline.log.event(
            "error",
            serde_json::json!({ "command": name, "exit_code": e.exit_code(), "message": e.to_string() }),
        ),
    }
    result
}

//! `k2r` command-line interface.

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use k2r_core::backends::BackendDescriptor;
use k2r_core::databuild::{build_training_set, BuildMode};
use k2r_core::forge::{forge_episode, ForgeBackends, ForgeOutput, HeuristicCandidates};
use k2r_core::metrics::DEFAULT_RARITY_CUTOFF;
use k2r_core::pipeline::{
    DEFAULT_CLOSE_TOKEN, DEFAULT_FILTERED_BEAM_SIZE, DEFAULT_OPEN_TOKEN, DEFAULT_RESPONSE_BEAM_SIZE,
};
use k2r_core::{K2RConfig, SpecialTokens};
use rayon::prelude::*;

use crate::eval::{confidence_sweep, eval_task, write_traces, EvalRunConfig};
use crate::io::{read_episodes, write_jsonl_file};
use crate::service::{serve, AppState};
use crate::HarnessError;

#[derive(Debug, Parser)]
#[command(
    name = "k2r",
    version,
    about = "Knowledge-to-response dialogue pipeline tools"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate a pipeline over a JSONL dataset.
    Eval(EvalArgs),
    /// Evaluate once per confidence level.
    Sweep(SweepArgs),
    /// Build knowledge/response training examples.
    BuildTrain(BuildTrainArgs),
    /// Construct QA episodes from dialogue episodes.
    Forge(ForgeArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

fn parse_backend(s: &str) -> Result<BackendDescriptor, String> {
    s.parse::<BackendDescriptor>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct TokenArgs {
    #[arg(long, default_value = DEFAULT_OPEN_TOKEN)]
    pub knowledge_open_token: String,
    #[arg(long, default_value = DEFAULT_CLOSE_TOKEN)]
    pub knowledge_close_token: String,
}

impl TokenArgs {
    fn tokens(&self) -> Result<SpecialTokens, HarnessError> {
        let tokens = SpecialTokens {
            open: self.knowledge_open_token.clone(),
            close: self.knowledge_close_token.clone(),
        };
        tokens
            .validate()
            .map_err(|e| HarnessError::Usage(e.to_string()))?;
        Ok(tokens)
    }
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// JSONL file of dialogue episodes.
    #[arg(long)]
    pub dataset: PathBuf,
    /// `echo`, `template:<text>`, `corpus-lookup:<path>`, `http:<url>` or a JSON descriptor.
    #[arg(long, value_parser = parse_backend)]
    pub knowledge_backend: Option<BackendDescriptor>,
    #[arg(long, value_parser = parse_backend)]
    pub response_backend: Option<BackendDescriptor>,
    /// Use one backend instance for both steps.
    #[arg(long, value_parser = parse_backend)]
    pub shared: Option<BackendDescriptor>,
    #[command(flatten)]
    pub tokens: TokenArgs,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=10))]
    pub confidence: Option<u8>,
    #[arg(long, default_value_t = DEFAULT_RESPONSE_BEAM_SIZE)]
    pub response_beam_size: usize,
    #[arg(long)]
    pub filter_beams: bool,
    #[arg(long, default_value_t = DEFAULT_FILTERED_BEAM_SIZE)]
    pub filtered_beam_size: usize,
    #[arg(long, default_value_t = k2r_core::backends::DEFAULT_MAX_TOKENS)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = DEFAULT_RARITY_CUTOFF)]
    pub rarity_cutoff: f64,
    #[arg(long, env = "K2R_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (defaults to available cores).
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// JSON report path; the CSV goes beside it.
    #[arg(long)]
    pub report: PathBuf,
    /// Optional JSONL of per-example traces.
    #[arg(long)]
    pub traces: Option<PathBuf>,
}

impl PipelineArgs {
    pub fn run_config(&self) -> Result<EvalRunConfig, HarnessError> {
        let mut k2r = match (
            &self.shared,
            &self.knowledge_backend,
            &self.response_backend,
        ) {
            (Some(d), None, None) => K2RConfig::shared(d.clone()),
            (None, Some(k), Some(r)) => K2RConfig::new(k.clone(), r.clone()),
            (Some(_), _, _) => {
                return Err(HarnessError::Usage(
                    "--shared cannot be combined with --knowledge-backend/--response-backend"
                        .into(),
                ))
            }
            _ => {
                return Err(HarnessError::Usage(
                    "give --shared, or both --knowledge-backend and --response-backend".into(),
                ))
            }
        };
        k2r.knowledge_open_token = self.tokens.knowledge_open_token.clone();
        k2r.knowledge_close_token = self.tokens.knowledge_close_token.clone();
        k2r.confidence = self.confidence;
        k2r.response_beam_size = self.response_beam_size;
        k2r.filter_beams = self.filter_beams;
        k2r.filtered_beam_size = self.filtered_beam_size;
        k2r.max_tokens = self.max_tokens;
        k2r.validate()
            .map_err(|e| HarnessError::Usage(e.to_string()))?;
        if !(self.rarity_cutoff > 0.0 && self.rarity_cutoff <= 1.0) {
            return Err(HarnessError::Usage(format!(
                "--rarity-cutoff {} outside (0, 1]",
                self.rarity_cutoff
            )));
        }
        let mut run = EvalRunConfig::new(&self.dataset, k2r, &self.report);
        run.rarity_cutoff = self.rarity_cutoff;
        run.seed = self.seed;
        run.parallelism = self
            .parallelism
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Ok(run)
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Comma-separated confidence levels.
    #[arg(long, value_delimiter = ',', default_values_t = [0u8, 2, 6, 10],
          value_parser = clap::value_parser!(u8).range(0..=10))]
    pub levels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Supervised,
    Unsupervised,
    Confidence,
}

impl From<ModeArg> for BuildMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Supervised => BuildMode::Supervised,
            ModeArg::Unsupervised => BuildMode::Unsupervised,
            ModeArg::Confidence => BuildMode::Confidence,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BuildTrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub tokens: TokenArgs,
    #[arg(long, env = "K2R_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ForgeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_parser = parse_backend)]
    pub summarizer: BackendDescriptor,
    #[arg(long, value_parser = parse_backend)]
    pub question_generator: BackendDescriptor,
    #[arg(long, value_parser = parse_backend)]
    pub qa: BackendDescriptor,
    /// JSONL of kept QA episodes.
    #[arg(long)]
    pub out: PathBuf,
    /// JSONL of every candidate with its verdict.
    #[arg(long)]
    pub audit: Option<PathBuf>,
    #[command(flatten)]
    pub tokens: TokenArgs,
    #[arg(long, env = "K2R_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Append session events to this JSONL file.
    #[arg(long)]
    pub session_log: Option<PathBuf>,
}

fn print_json<T: serde::Serialize>(value: &T) {
    match serde_json::to_string_pretty(value) {
        Ok(s) => println!("{s}"),
        Err(e) => log::warn!("could not print summary: {e}"),
    }
}

fn run_eval(args: &EvalArgs) -> Result<(), HarnessError> {
    let run = args.pipeline.run_config()?;
    let outcome = eval_task(&run)?;
    if let Some(path) = &args.pipeline.traces {
        write_traces(path, &outcome.traces)?;
    }
    print_json(&serde_json::json!({
        "report": run.report,
        "examples": outcome.report.examples,
        "failures": outcome.report.failures.len(),
        "aggregate": outcome.report.aggregate,
    }));
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> Result<(), HarnessError> {
    let run = args.pipeline.run_config()?;
    let (summary, _) = confidence_sweep(&run, &args.levels)?;
    print_json(&summary.levels);
    Ok(())
}

fn run_build_train(args: &BuildTrainArgs) -> Result<(), HarnessError> {
    let tokens = args.tokens.tokens()?;
    let episodes = read_episodes(&args.dataset)?;
    let (examples, stats) = build_training_set(&episodes, args.mode.into(), &tokens, args.seed);
    write_jsonl_file(&args.out, &examples)?;
    print_json(&stats);
    Ok(())
}

fn run_forge(args: &ForgeArgs) -> Result<(), HarnessError> {
    let tokens = args.tokens.tokens()?;
    let backends =
        ForgeBackends::from_descriptors(&args.summarizer, &args.question_generator, &args.qa)
            .map_err(|e| HarnessError::Usage(e.to_string()))?;
    let episodes = read_episodes(&args.dataset)?;
    let extractor = HeuristicCandidates::default();
    let threads = args
        .parallelism
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::Usage(format!("thread pool: {e}")))?;
    let parts = pool.install(|| {
        episodes
            .par_iter()
            .map(|e| {
                (
                    e.example_id.clone(),
                    forge_episode(e, &backends, &extractor, &tokens, args.seed),
                )
            })
            .collect()
    });
    let out = ForgeOutput::from_parts(parts);
    write_jsonl_file(&args.out, &out.qa_episodes)?;
    if let Some(audit) = &args.audit {
        write_jsonl_file(audit, &out.records)?;
    }
    print_json(&out.stats);
    Ok(())
}

fn run_serve(args: &ServeArgs) -> Result<(), HarnessError> {
    let state = match &args.session_log {
        Some(path) => AppState::with_session_log(path)?,
        None => AppState::new(),
    };
    serve(SocketAddr::new(args.host, args.port), state)
}

pub fn run(cli: &Cli) -> Result<(), HarnessError> {
    match &cli.command {
        Command::Eval(a) => run_eval(a),
        Command::Sweep(a) => run_sweep(a),
        Command::BuildTrain(a) => run_build_train(a),
        Command::Forge(a) => run_forge(a),
        Command::Serve(a) => run_serve(a),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

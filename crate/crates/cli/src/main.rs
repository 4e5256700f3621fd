//! `capcur`: the staged post-training pipeline from caption synthesis through
//! training, evaluation, audit and reporting. All outputs land under `--workdir`.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use capcur_core::curriculum::{parse_budgets, parse_stage_order, PlanMode, StageOrder};
use capcur_core::trainer::TrainMode;
use capcur_core::CapabilityTag;

#[derive(Debug, Parser)]
#[command(name = "capcur", version, about = "Staged RLVR post-training laboratory")]
struct Cli {
    /// Directory for every output; created if missing.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Global TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate perception QA samples from captions with the configured generator.
    Synth(SynthArgs),
    /// Keep samples every evaluator answers from the caption but not the image.
    Filter(FilterArgs),
    /// Score samples by pass rate over sampled answers.
    Difficulty(DifficultyArgs),
    /// Build and save a training plan.
    Plan(PlanArgs),
    /// Run a training plan.
    Train(TrainArgs),
    /// Evaluate policy parameters on the held-out scene sets.
    Eval(EvalArgs),
    /// Judge transcripts for perception errors and compare response lengths.
    Audit(AuditArgs),
    /// Summarize and plot finished runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSONL of `{"image_ref", "caption"}` records.
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_pairs: Option<usize>,
    /// Prompt template file with `{caption}` and `{max_pairs}` placeholders.
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    dedup: bool,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML with one `[[evaluator]]` table per evaluator.
    #[arg(long)]
    evaluators: PathBuf,
}

#[derive(Debug, Args)]
pub struct DifficultyArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML describing one answerer; the initial policy when omitted.
    #[arg(long)]
    answerer: Option<PathBuf>,
    /// Draws per sample.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long, value_parser = parse_mode)]
    mode: Option<PlanMode>,
    /// Preset (`paper-default`, `text-first`, `reversed`) or stage numbers such as `3,2,1`.
    #[arg(long, value_parser = parse_order)]
    order: Option<StageOrder>,
    /// Steps for perception, text and visual reasoning, e.g. `90,375,465`.
    #[arg(long, value_parser = parse_budget_arg)]
    budgets: Option<[usize; 3]>,
    /// JSONL dataset; scene samples are generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "plan.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Plan file; built from the `[stages]` config when omitted.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// JSONL dataset the plan refers to; generated scene samples when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from the latest checkpoint under the workdir.
    #[arg(long)]
    resume: bool,
    /// Stop after this many total steps.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, value_parser = parse_train_mode)]
    train_mode: Option<TrainMode>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value_t = 1)]
    n_rollouts: usize,
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
    /// Also write one greedy transcript per eval task as JSONL.
    #[arg(long)]
    transcripts: Option<PathBuf>,
    /// Label recorded on written transcripts.
    #[arg(long, default_value = "policy")]
    label: String,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// JSONL transcript records.
    #[arg(long)]
    transcripts: PathBuf,
    /// TOML with a `[client]` table and an optional `template` path.
    #[arg(long)]
    judge: PathBuf,
    #[arg(long, default_value = "audit.csv")]
    out: PathBuf,
    /// CSV with `label,length` rows; word counts of labelled transcripts when omitted.
    #[arg(long)]
    lengths: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `LABEL=DIR` of a finished training workdir; repeatable.
    #[arg(long = "run", required = true, value_parser = parse_run)]
    runs: Vec<(String, PathBuf)>,
    /// Label whose eval length the others are compared against; the first run by default.
    #[arg(long)]
    reference: Option<String>,
    #[arg(long, default_value = "report")]
    prefix: String,
}

fn parse_mode(s: &str) -> Result<PlanMode, String> {
    s.parse()
}

fn parse_order(s: &str) -> Result<StageOrder, String> {
    parse_stage_order(s)
}

fn parse_budget_arg(s: &str) -> Result<[usize; 3], String> {
    let m = parse_budgets(s)?;
    Ok(CapabilityTag::ALL.map(|c| m[&c]))
}

fn parse_train_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "rlvr" => Ok(TrainMode::Rlvr),
        "sft" => Ok(TrainMode::Sft),
        other => Err(format!("unknown train mode `{other}` (rlvr or sft)")),
    }
}

fn parse_run(s: &str) -> Result<(String, PathBuf), String> {
    let (label, dir) = s.split_once('=').ok_or_else(|| format!("`{s}` is not LABEL=DIR"))?;
    if label.is_empty() || dir.is_empty() {
        return Err(format!("`{s}` is not LABEL=DIR"));
    }
    Ok((label.to_string(), PathBuf::from(dir)))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = config::GlobalConfig::load(cli.config.as_deref()).and_then(|cfg| {
        let ctx = commands::Ctx::new(cli.workdir, cfg)?;
        match cli.command {
            Command::Synth(a) => commands::synth(&ctx, a),
            Command::Filter(a) => commands::filter(&ctx, a),
            Command::Difficulty(a) => commands::difficulty(&ctx, a),
            Command::Plan(a) => commands::plan(&ctx, a),
            Command::Train(a) => commands::train(&ctx, a),
            Command::Eval(a) => commands::eval(&ctx, a),
            Command::Audit(a) => commands::audit(&ctx, a),
            Command::Report(a) => report::report(&ctx, a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string().replace('\n', " ")).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}

//! `engage`: command-line front end for the engagement toolkit.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use engagement::dataset::Interval;
use engagement::ecdf::Mode;
use engagement::forest::Algorithm;
use engagement::rcmm::{GroupBy, ReturningBase};

#[derive(Debug, Parser)]
#[command(name = "engage", version, about = "Engagement and churn analytics for app-usage event logs")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Main output file; `-` or absent writes to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Output rendering; for `simulate`, `ingest` and `panel` the event file format.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// JSON file mirroring the flags; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Jsonl,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic cohort event log with ground truth.
    Simulate(SimulateArgs),
    /// Validate, sort and deduplicate an event log.
    Ingest(IngestArgs),
    /// Build the daily per-user panel from an event log.
    Panel(PanelArgs),
    /// RCMM churn definition per group.
    ChurnDef(ChurnDefArgs),
    /// ECDF engagement indicators on one day.
    Ecdf(EcdfArgs),
    /// Daily harmonic-mean engagement scores.
    Score(ScoreArgs),
    /// Kaplan-Meier time-to-churn curves.
    Km(KmArgs),
    /// Fit a survival forest and write the model file.
    SurvivalFit(FitArgs),
    /// Repeated train/test evaluation of a survival forest.
    SurvivalEval(EvalArgs),
    /// Per-user report cards.
    Report(ReportArgs),
    /// RCMM versus ECDF churn definitions.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Homogeneous,
    TwoGroup,
    PlantedSignal,
    RegimeSwitch,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Cohort specification (JSON).
    #[arg(long, required_unless_present = "preset")]
    pub spec: Option<PathBuf>,
    /// Built-in cohort instead of a spec file.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Number of users; overrides the spec file.
    #[arg(long)]
    pub users: Option<usize>,
    /// Hazard ratio of the two-group and planted-signal presets.
    #[arg(long, default_value_t = 4.0)]
    pub hazard_ratio: f64,
    /// Daily churn rate of the homogeneous preset.
    #[arg(long, default_value_t = 0.01)]
    pub rate: f64,
    /// Ground-truth JSON output.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Keep the per-day panel rows in the ground truth.
    #[arg(long)]
    pub full_truth: bool,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub events: PathBuf,
    /// Rejected lines as `line,reason` CSV; listed on stderr when absent.
    #[arg(long)]
    pub rejections: Option<PathBuf>,
    /// Earliest accepted timestamp (RFC 3339).
    #[arg(long)]
    pub window_start: Option<String>,
    /// Latest accepted timestamp (RFC 3339).
    #[arg(long)]
    pub window_end: Option<String>,
}

#[derive(Debug, Args)]
pub struct PanelArgs {
    #[arg(long)]
    pub events: PathBuf,
    /// Last panel day; defaults to the day of the latest event.
    #[arg(long)]
    pub end: Option<chrono::NaiveDate>,
    /// Seconds after which a session without an explicit end is closed.
    #[arg(long, default_value_t = 1800.0)]
    pub session_timeout: f64,
    /// Reconstructed session log (CSV).
    #[arg(long)]
    pub sessions: Option<PathBuf>,
    /// Rejected lines as `line,reason` CSV; listed on stderr when absent.
    #[arg(long)]
    pub rejections: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChurnDefArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[arg(long, default_value_t = 0.30)]
    pub returning_max: f64,
    #[arg(long, default_value_t = 0.10)]
    pub missed_max: f64,
    /// Comma-separated metrics whose missed fractions are bounded.
    #[arg(long, default_value = "connection_time,action_count,progression")]
    pub metrics: String,
    #[arg(long, default_value = "country", value_parser = parse_from_str::<GroupBy>)]
    pub group_by: GroupBy,
    /// Denominator of the returning fraction: `cohort` or `flagged`.
    #[arg(long, default_value = "cohort", value_parser = parse_from_str::<ReturningBase>)]
    pub base: ReturningBase,
    /// Largest horizon on the grid `1..=k_max`.
    #[arg(long, default_value_t = 120)]
    pub k_max: u32,
    /// Curve export (CSV).
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EcdfArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[arg(long, default_value = "days_since_last_login")]
    pub metric: String,
    #[arg(long, default_value = "endo", value_parser = parse_from_str::<Mode>)]
    pub mode: Mode,
    /// Day of interest; defaults to the panel end.
    #[arg(long)]
    pub day: Option<chrono::NaiveDate>,
    /// Quantile of the churn-risk flag.
    #[arg(long, default_value_t = 0.9)]
    pub q: f64,
    /// Cutoff on exo/snp days-since-last-login references.
    #[arg(long, default_value_t = 200.0)]
    pub gap_cutoff: f64,
    #[arg(long)]
    pub no_gap_cutoff: bool,
    /// Reference distribution export (CSV `value,ecdf`).
    #[arg(long)]
    pub distribution: Option<PathBuf>,
    /// User whose reference is exported; defaults to the first user with a row on the day.
    #[arg(long)]
    pub user: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// Comma-separated score components.
    #[arg(
        long,
        default_value = "weekly_loyalty_index,video_view_count,video_watch_time,action_count,progression,elearning_connection_time"
    )]
    pub components: String,
    #[arg(long, default_value = "endo", value_parser = parse_from_str::<Mode>)]
    pub mode: Mode,
    /// First day written (inclusive).
    #[arg(long)]
    pub from: Option<chrono::NaiveDate>,
    /// Last day written (inclusive).
    #[arg(long)]
    pub to: Option<chrono::NaiveDate>,
}

#[derive(Debug, Args)]
pub struct KmArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[arg(long, default_value_t = 31)]
    pub churn_k: u32,
    #[arg(long, default_value = "country", value_parser = parse_from_str::<GroupBy>)]
    pub group_by: GroupBy,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// Algorithm: csf, ltrc-cif or ltrc-rrf.
    #[arg(long, value_parser = parse_from_str::<Algorithm>)]
    pub model: Option<Algorithm>,
    /// Model specification (JSON); flags override its fields.
    #[arg(long)]
    pub model_spec: Option<PathBuf>,
    #[arg(long)]
    pub churn_k: Option<u32>,
    #[arg(long)]
    pub ntree: Option<usize>,
    #[arg(long)]
    pub mtry: Option<usize>,
    /// Significance level of the split tests.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub min_node_size: Option<usize>,
    #[arg(long)]
    pub min_leaf: Option<usize>,
    /// Pseudo-observation interval: day, week or month.
    #[arg(long, value_parser = parse_from_str::<Interval>)]
    pub interval: Option<Interval>,
    /// Comma-separated feature subset.
    #[arg(long, conflicts_with = "select_from")]
    pub features: Option<String>,
    /// Evaluation report whose top features are used.
    #[arg(long)]
    pub select_from: Option<PathBuf>,
    /// Number of features taken from `--select-from`.
    #[arg(long, default_value_t = 30)]
    pub select_top: usize,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Train/test rounds.
    #[arg(long, default_value_t = 25)]
    pub bootstrap: usize,
    /// Training share of the users in each round.
    #[arg(long, default_value_t = 0.75)]
    pub split: f64,
    /// Features listed as the top selection.
    #[arg(long, default_value_t = 30)]
    pub top: usize,
    /// Rank features by summed split statistics instead of permutation.
    #[arg(long)]
    pub split_importance: bool,
}

#[derive(Debug, Args)]
pub struct DefinitionArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// Day of interest; defaults to the panel end.
    #[arg(long)]
    pub as_of: Option<chrono::NaiveDate>,
    /// ECDF quantile for flags and equivalent definitions.
    #[arg(long, default_value_t = 0.95)]
    pub quantile: f64,
    #[arg(long, default_value_t = 0.30)]
    pub returning_max: f64,
    #[arg(long, default_value_t = 0.10)]
    pub missed_max: f64,
    #[arg(long, default_value = "connection_time,action_count,progression")]
    pub metrics: String,
    #[arg(long, default_value = "cohort", value_parser = parse_from_str::<ReturningBase>)]
    pub base: ReturningBase,
    #[arg(long, default_value_t = 200.0)]
    pub gap_cutoff: f64,
    #[arg(long)]
    pub no_gap_cutoff: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub def: DefinitionArgs,
    /// Fitted model file for survival probabilities.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated user ids; all users when absent.
    #[arg(long)]
    pub users: Option<String>,
    #[arg(
        long,
        default_value = "weekly_loyalty_index,video_view_count,video_watch_time,action_count,progression,elearning_connection_time"
    )]
    pub components: String,
    #[arg(long, default_value = "endo", value_parser = parse_from_str::<Mode>)]
    pub score_mode: Mode,
    /// Scores below this set the low-score flag.
    #[arg(long, default_value_t = 0.1)]
    pub low_score: f64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub def: DefinitionArgs,
    /// Per-group horizon table (CSV).
    #[arg(long)]
    pub horizons: Option<PathBuf>,
    /// Per-user classification (CSV).
    #[arg(long)]
    pub users_out: Option<PathBuf>,
}

fn parse_from_str<T>(s: &str) -> std::result::Result<T, String>
where
    T: std::str::FromStr<Err = engagement::Error>,
{
    s.parse().map_err(|e: engagement::Error| e.to_string())
}

/// How a successful run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Clean,
    /// Outputs were written but some inputs were rejected or unresolved.
    Partial,
}

fn command() -> clap::Command {
    Cli::command().args_override_self(true).mut_subcommands(|s| s.args_override_self(true))
}

fn parse(args: Vec<String>) -> Result<Cli> {
    let cmd = command();
    let args = match config::config_path(&args) {
        Some(path) => config::merge(args, path.as_ref(), &cmd)?,
        None => args,
    };
    let matches = cmd.try_get_matches_from(args).unwrap_or_else(|e| e.exit());
    Ok(Cli::from_arg_matches(&matches)?)
}

fn run() -> Result<Outcome> {
    let cli = parse(std::env::args().collect())?;
    if let Some(n) = cli.global.workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    commands::dispatch(&cli)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

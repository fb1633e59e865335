//! Command-line surface. Each option documents its config-file key; a flag
//! wins over the config file, which wins over the built-in default.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mega", version, about = "Aggregate epigenetic clocks and run the downstream analyses")]
pub struct Cli {
    /// Cohort CSV with a `subject_id` column.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Column kinds as `name=kind` lines; inferred from the data when absent.
    #[arg(long, global = true)]
    pub schema: Option<PathBuf>,
    /// `key=value` config file; flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw; required by `simulate` and `sem`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for replications and leave-one-out fits (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Directory receiving the outputs and the run manifest.
    #[arg(long, global = true, default_value = "mega-out")]
    pub out_dir: PathBuf,
    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// MEGA_WGT and MEGA_FA scores, weights and leave-one-out variants.
    Aggregate(AggregateArgs),
    /// Exploratory factor analysis of the clocks.
    Efa(EfaArgs),
    /// MIMIC model fit, parameter table and latent scores.
    Sem(SemArgs),
    /// OLS tables with one column per outcome.
    Regress(RegressArgs),
    /// Month-of-birth discontinuity tables.
    Rdd(RddArgs),
    /// Synthetic cohort with known truth.
    Simulate(SimulateArgs),
    /// Check a finished run against its manifest and gather its tables.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Aggregate(_) => "aggregate",
            Command::Efa(_) => "efa",
            Command::Sem(_) => "sem",
            Command::Regress(_) => "regress",
            Command::Rdd(_) => "rdd",
            Command::Simulate(_) => "simulate",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Clock columns, comma separated [config: clocks; default: every `clock_*` column].
    #[arg(long)]
    pub clocks: Option<String>,
    /// Chronological age column [config: age; default: age_years].
    #[arg(long)]
    pub age: Option<String>,
    /// `wgt`, `fa` or both [config: methods; default: wgt,fa].
    #[arg(long)]
    pub methods: Option<String>,
    /// Skip the leave-one-clock-out variants.
    #[arg(long)]
    pub no_leave_one_out: bool,
    /// Also write age-acceleration residuals of every score.
    #[arg(long)]
    pub age_acceleration: bool,
}

#[derive(Debug, Args)]
pub struct EfaArgs {
    /// [config: clocks]
    #[arg(long)]
    pub clocks: Option<String>,
    /// [config: age; default: age_years]
    #[arg(long)]
    pub age: Option<String>,
    /// `pf` (principal factor) or `pc` [config: extraction; default: pf].
    #[arg(long)]
    pub extraction: Option<String>,
    /// Kaiser rule on `correlation` or `reduced` eigenvalues [config: kaiser].
    #[arg(long)]
    pub kaiser: Option<String>,
}

#[derive(Debug, Args)]
pub struct SemArgs {
    /// Model file with `[latent NAME]` and `[structural]` sections [config: model].
    #[arg(long)]
    pub model: Option<String>,
    /// Clock indicators when no model file is given [config: clocks].
    #[arg(long)]
    pub clocks: Option<String>,
    /// Covariates of the latent when no model file is given [config: covariates].
    #[arg(long)]
    pub covariates: Option<String>,
    /// Latent to score [config: latent; default: first block].
    #[arg(long)]
    pub latent: Option<String>,
    /// Reference indicators to report, comma separated, or `all` [config: references].
    #[arg(long)]
    pub references: Option<String>,
    /// `linear` or `regression` [config: score_mode].
    #[arg(long)]
    pub score_mode: Option<String>,
    /// Sandwich standard errors.
    #[arg(long)]
    pub robust: bool,
    /// Random restarts besides the factor-analytic start (default 3).
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Monte Carlo coverage run with this many simulated samples; uses the
    /// simulation keys of the config file instead of `--input`.
    #[arg(long)]
    pub mc: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RegressArgs {
    /// One table column per outcome [config: outcomes].
    #[arg(long)]
    pub outcomes: Option<String>,
    /// Regressors of interest [config: regressors].
    #[arg(long)]
    pub regressors: Option<String>,
    /// Controls, included but not displayed [config: controls].
    #[arg(long)]
    pub controls: Option<String>,
    /// Terms shown in the table [config: keep; default: the regressors].
    #[arg(long)]
    pub keep: Option<String>,
    /// `classical`, `hc1` or `both` [config: se; default: classical].
    #[arg(long)]
    pub se: Option<String>,
    /// Extra CSVs joined on `subject_id` (e.g. aggregate scores).
    #[arg(long)]
    pub join: Vec<PathBuf>,
    /// Add binary abuse indicators derived from the Likert items.
    #[arg(long)]
    pub derive_abuse: bool,
}

#[derive(Debug, Args)]
pub struct RddArgs {
    /// [config: outcomes; default: outcome]
    #[arg(long)]
    pub outcomes: Option<String>,
    /// Months on each side, one panel each [config: bandwidths; default: 4,3,2].
    #[arg(long)]
    pub bandwidths: Option<String>,
    /// [config: controls]
    #[arg(long)]
    pub controls: Option<String>,
    /// Calendar birth month column [config: month_column; default: birth_month].
    #[arg(long)]
    pub month_column: Option<String>,
    /// `hc1` or `classical` [config: se; default: hc1].
    #[arg(long)]
    pub se: Option<String>,
    /// Categorical column for per-class jumps [config: class_column].
    #[arg(long)]
    pub class_column: Option<String>,
    /// `pooled` or `split` [config: class_mode; default: pooled].
    #[arg(long)]
    pub class_mode: Option<String>,
    /// Pre-determined outcome expected to show no jump [config: placebo].
    #[arg(long)]
    pub placebo: Option<String>,
    /// Extra CSVs joined on `subject_id`.
    #[arg(long)]
    pub join: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// `panel`, `abuse` or `rdd` [config: kind; default: panel].
    #[arg(long)]
    pub kind: Option<String>,
    /// Sample size [config: n].
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory holding a manifest (defaults to `--input`).
    #[arg(long)]
    pub run: Option<PathBuf>,
}

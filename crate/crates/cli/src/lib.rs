//! `peclab` command-line front-end: configuration, dataset generation,
//! fitting, correction, run reports and SVG plots.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod report;
pub mod tables;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::commands::{
    CorrectArgs, FitEtaArgs, FitYieldArgs, GenOnsetsArgs, GenPatternArgs, Outcome, SectionArgs,
    SweepArgs, WindowArgs,
};
use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::report::{default_report_path, FileDigest, RunReport};

#[derive(Debug, Parser)]
#[command(
    name = "peclab",
    version,
    about = "E-beam process windows and proximity-effect correction"
)]
pub struct Cli {
    /// key = value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed (PECLAB_SEED overrides it; it overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run report file (defaults to runs.jsonl beside the primary output).
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a parallel lead-array layout.
    GenPattern(GenPatternArgs),
    /// Sample design points and label simulated devices.
    Sweep(SweepArgs),
    /// Fit the logistic yield surface to a labels CSV.
    FitYield(FitYieldArgs),
    /// One-dimensional yield sections, process window and plot.
    Section(SectionArgs),
    /// Recommended operating window over the whole factor space.
    Window(WindowArgs),
    /// Synthetic or simulated onset data.
    GenOnsets(GenOnsetsArgs),
    /// Fit the backscatter ratio eta and onset scale A.
    FitEta(FitEtaArgs),
    /// Dose-multiplier maps and onset flatness for layouts.
    Correct(CorrectArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenPattern(_) => "gen-pattern",
            Command::Sweep(_) => "sweep",
            Command::FitYield(_) => "fit-yield",
            Command::Section(_) => "section",
            Command::Window(_) => "window",
            Command::GenOnsets(_) => "gen-onsets",
            Command::FitEta(_) => "fit-eta",
            Command::Correct(_) => "correct",
        }
    }

    fn report_path(&self) -> PathBuf {
        match self {
            Command::GenPattern(a) => default_report_path(&a.out, false),
            Command::Sweep(a) => default_report_path(&a.out, false),
            Command::FitYield(a) => default_report_path(&a.out, false),
            Command::Section(a) => default_report_path(&a.out_dir, true),
            Command::Window(a) => default_report_path(&a.out, false),
            Command::GenOnsets(a) => default_report_path(&a.out, false),
            Command::FitEta(a) => default_report_path(&a.out, false),
            Command::Correct(a) => default_report_path(&a.out_dir, true),
        }
    }

    pub fn execute(&self, cfg: &Config) -> CliResult<Outcome> {
        match self {
            Command::GenPattern(a) => commands::gen_pattern(a, cfg),
            Command::Sweep(a) => commands::sweep(a, cfg),
            Command::FitYield(a) => commands::fit_yield(a, cfg),
            Command::Section(a) => commands::section(a, cfg),
            Command::Window(a) => commands::window(a, cfg),
            Command::GenOnsets(a) => commands::gen_onsets(a, cfg),
            Command::FitEta(a) => commands::fit_eta_cmd(a, cfg),
            Command::Correct(a) => commands::correct(a, cfg),
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.resolve_seed(cli.seed)?;
    Ok(cfg)
}

fn digests(paths: &[PathBuf]) -> Vec<FileDigest> {
    paths
        .iter()
        .filter_map(|p| FileDigest::of(p).ok())
        .collect()
}

/// Run one command and append exactly one report. Returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let start = Instant::now();
    let report_path = cli
        .report
        .clone()
        .unwrap_or_else(|| cli.command.report_path());
    let cfg = load_config(&cli);
    let (config_hash, seed) = match &cfg {
        Ok(c) => (c.hash(), c.seed),
        Err(_) => (String::new(), 0),
    };
    let result = cfg.and_then(|c| cli.command.execute(&c));
    let (outcome, error) = match result {
        Ok(mut o) => {
            let err = o.deferred.take();
            (o, err)
        }
        Err(e) => (Outcome::default(), Some(e)),
    };
    let mut inputs = outcome.inputs.clone();
    if let Some(c) = &cli.config {
        inputs.insert(0, c.clone());
    }
    let exit_code = error.as_ref().map_or(0, CliError::exit_code);
    if let Some(e) = &error {
        eprintln!("error: {e}");
    }
    let report = RunReport {
        command: cli.command.name().to_string(),
        config_hash,
        seed,
        inputs: digests(&inputs),
        outputs: digests(&outcome.outputs),
        wall_time_s: start.elapsed().as_secs_f64(),
        exit_code,
        error: error.as_ref().map(CliError::message),
        summary: outcome.summary,
    };
    if let Err(e) = report.append(&report_path) {
        eprintln!("error: could not write run report: {e}");
        return if exit_code == 0 {
            e.exit_code()
        } else {
            exit_code
        };
    }
    exit_code
}

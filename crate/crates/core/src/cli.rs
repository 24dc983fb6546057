//! The `pairtest` command line.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gee::{CorrStructure, WorkingCorrelation};
use crate::hypothesis::parse_test_list;
use crate::io::{collapse, convert, parse_frequency, parse_frequency_wide, parse_stacked, render_frequency, render_stacked};
use crate::model::{CombinedCounts, ModelKind};
use crate::report::{analyze, AnalyzeOptions, ModelChoice, SCHEMA};
use crate::sim::{
    alternative_presets, design_presets, run_experiment_with_threads, Alternative, Correlation, Design, SimConfig,
    SimSummary,
};

pub const DEFAULT_REPLICATES: u64 = 10_000;
pub const FULL_REPLICATES: u64 = 50_000;

#[derive(Debug, Parser)]
#[command(name = "pairtest", version, about = "Homogeneity tests for combined unilateral and bilateral binary data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit both hypotheses to a frequency table and report the tests.
    Analyze(AnalyzeArgs),
    /// Estimate type I error or power by Monte Carlo.
    Simulate(SimulateArgs),
    /// Expand a frequency table into stacked one-row-per-organ data.
    Convert(ConvertArgs),
    /// Collapse stacked data back into a frequency table.
    Collapse(CollapseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Frequency CSV (`-` for standard input).
    #[arg(long)]
    pub data: PathBuf,
    /// Read the wide layout with one column per group.
    #[arg(long)]
    pub wide: bool,
    #[arg(long, default_value = "auto")]
    pub model: ModelChoice,
    #[arg(long, default_value = "lr,wald,score,gee")]
    pub tests: String,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    /// GEE working correlation: independence, exchangeable or unstructured.
    #[arg(long, default_value = "unstructured")]
    pub working_corr: CorrStructure,
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    /// Type I error under a common proportion.
    Tie,
    /// Power under a preset alternative.
    Power,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(value_enum)]
    pub study: Study,
    #[arg(long)]
    pub model: ModelKind,
    #[arg(long)]
    pub design: Design,
    #[arg(long)]
    pub g: usize,
    /// Common proportion (type I error).
    #[arg(long, required_if_eq("study", "tie"), conflicts_with = "alt")]
    pub pi0: Option<f64>,
    /// Alternative preset (power).
    #[arg(long, required_if_eq("study", "power"))]
    pub alt: Option<Alternative>,
    /// True correlation on the Donner scale.
    #[arg(long, required_unless_present = "r0", conflicts_with = "r0")]
    pub rho0: Option<f64>,
    /// True `R` of Rosner's model.
    #[arg(long)]
    pub r0: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_REPLICATES, conflicts_with = "full")]
    pub replicates: u64,
    /// Use the full grid size of 50000 replicates.
    #[arg(long)]
    pub full: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, env = "PAIRTEST_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, default_value = "lr,wald,score,gee")]
    pub tests: String,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value = "unstructured")]
    pub working_corr: CorrStructure,
    /// JSON destination; the text table goes to standard error when this is
    /// standard output, otherwise to standard output.
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub wide: bool,
    #[arg(long, default_value_t = 1)]
    pub replicate: u64,
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CollapseArgs {
    /// Stacked CSV (`-` for standard input).
    #[arg(long)]
    pub data: PathBuf,
    /// Replicate to extract when the file holds several.
    #[arg(long)]
    pub replicate: Option<u64>,
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
}

/// Simulation output as written to disk.
#[derive(Debug, Serialize)]
pub struct SimReport<'a> {
    pub schema: &'static str,
    pub study: Study,
    pub design: Design,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alternative: Option<Alternative>,
    #[serde(flatten)]
    pub summary: &'a SimSummary,
}

/// An error tagged with the stage that produced it.
#[derive(Debug)]
pub struct Failure {
    pub stage: &'static str,
    pub error: Error,
}

impl Failure {
    /// 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.error.is_numerical() {
            2
        } else {
            1
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.stage, self.error)
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, Failure>;
}

impl<T, E: Into<Error>> Stage<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure {
            stage,
            error: e.into(),
        })
    }
}

fn read_input(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        fs::read_to_string(path).map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
    }
}

fn write_output(path: &Path, content: &str) -> Result<()> {
    if path == Path::new("-") {
        let mut out = io::stdout().lock();
        out.write_all(content.as_bytes())?;
        out.flush()?;
    } else {
        fs::write(path, content)?;
    }
    Ok(())
}

fn read_counts(path: &Path, wide: bool) -> std::result::Result<CombinedCounts, Failure> {
    let text = read_input(path).stage("reading data")?;
    if wide {
        parse_frequency_wide(&text)
    } else {
        parse_frequency(&text)
    }
    .stage("parsing data")
}

pub fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Convert(a) => cmd_convert(a),
        Command::Collapse(a) => cmd_collapse(a),
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> std::result::Result<(), Failure> {
    let data = read_counts(&args.data, args.wide)?;
    let options = AnalyzeOptions {
        model: args.model,
        tests: parse_test_list(&args.tests).stage("parsing options")?,
        alpha: args.alpha,
        working_correlation: WorkingCorrelation::new(args.working_corr),
    };
    let report = analyze(&data, &options).stage("fitting")?;
    let rendered = match args.format {
        Format::Text => report.render_text(),
        Format::Json => report.to_json().stage("rendering")? + "\n",
    };
    write_output(&args.out, &rendered).stage("writing report")
}

/// Builds the simulation configuration described by the flags.
pub fn sim_config(args: &SimulateArgs) -> Result<SimConfig> {
    let sizes = design_presets(args.design, args.g)?;
    let pis = match args.study {
        Study::Tie => vec![args.pi0.ok_or_else(|| Error::Usage("tie needs --pi0".into()))?; args.g],
        Study::Power => alternative_presets(
            args.alt.ok_or_else(|| Error::Usage("power needs --alt".into()))?,
            args.g,
        )?,
    };
    let correlation = match (args.rho0, args.r0) {
        (Some(rho), None) => Correlation::Rho(rho),
        (None, Some(r)) if args.model == ModelKind::Rosner => Correlation::Kappa(r),
        (None, Some(_)) => return Err(Error::Usage("--r0 applies to the rosner model only".into())),
        _ => return Err(Error::Usage("give exactly one of --rho0 and --r0".into())),
    };
    let config = SimConfig {
        kind: args.model,
        sizes,
        pis,
        correlation,
        replicates: if args.full { FULL_REPLICATES } else { args.replicates },
        alpha: args.alpha,
        seed: args.seed,
        tests: parse_test_list(&args.tests)?,
        working_correlation: WorkingCorrelation::new(args.working_corr),
    };
    config.validate()?;
    Ok(config)
}

fn cmd_simulate(args: SimulateArgs) -> std::result::Result<(), Failure> {
    let config = sim_config(&args).stage("configuring simulation")?;
    let threads = args.threads.filter(|&t| t > 0);
    let summary = run_experiment_with_threads(&config, threads).stage("simulating")?;
    let report = SimReport {
        schema: SCHEMA,
        study: args.study,
        design: args.design,
        alternative: args.alt.filter(|_| args.study == Study::Power),
        summary: &summary,
    };
    let json = serde_json::to_string_pretty(&report).stage("rendering")? + "\n";
    write_output(&args.out, &json).stage("writing results")?;
    let table = summary.render_table();
    if args.out == Path::new("-") {
        eprint!("{table}");
    } else {
        print!("{table}");
    }
    Ok(())
}

fn cmd_convert(args: ConvertArgs) -> std::result::Result<(), Failure> {
    let data = read_counts(&args.data, args.wide)?;
    let rows = convert(&data, args.replicate);
    write_output(&args.out, &render_stacked(&rows)).stage("writing stacked data")
}

fn cmd_collapse(args: CollapseArgs) -> std::result::Result<(), Failure> {
    let text = read_input(&args.data).stage("reading data")?;
    let rows = parse_stacked(&text).stage("parsing stacked data")?;
    let mut tables = collapse(&rows).stage("collapsing")?;
    let data = match args.replicate {
        Some(r) => tables
            .into_iter()
            .find(|(rep, _)| *rep == r)
            .map(|(_, d)| d)
            .ok_or_else(|| Error::Usage(format!("replicate {r} not present")))
            .stage("collapsing")?,
        None if tables.len() == 1 => tables.remove(0).1,
        None => {
            return Err(Error::Usage(format!(
                "{} replicates present; choose one with --replicate",
                tables.len()
            )))
            .stage("collapsing")
        }
    };
    write_output(&args.out, &render_frequency(&data)).stage("writing frequency table")
}

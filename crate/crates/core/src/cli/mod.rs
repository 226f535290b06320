//! Command-line front end: `fit`, `sim` and `probs`.

pub mod formula;
pub mod model;
pub mod table;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::fit::{fit, summary_vector, FitOptions, FitResult, SeMethod, Weighting};
use crate::optimizer::Settings;
use crate::pairobj::{PairMode, PairSet};
use crate::simlab::{self, Study, StudyConfig};
use formula::parse_formula;
use model::{design_only, prepare, DesignSpec, Prepared, StageSpec};
use table::Table;

/// Exit status when the optimizer stops without converging.
pub const EXIT_NOT_CONVERGED: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "pairlmm",
    version,
    about = "Weighted pairwise likelihood for linear mixed models in complex samples"
)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a model to a CSV file.
    Fit(FitArgs),
    /// Run a simulation study.
    Sim(SimArgs),
    /// Dump inclusion probabilities for audit.
    Probs(ProbsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Args, Debug, Clone)]
pub struct DesignArgs {
    /// Stratum column.
    #[arg(long)]
    pub strata: Option<String>,
    /// Sampling stage, outermost first: UNIT:srs:N_SAMPLED:N_POP,
    /// UNIT:bernoulli:PROB or UNIT:pps:PROB (columns or constants).
    #[arg(long = "stage")]
    pub stages: Vec<String>,
    /// CSV of supplied joint probabilities `id_i,id_j,pi_ij`.
    #[arg(long)]
    pub pair_probs: Option<PathBuf>,
    /// Row id column used by --pair-probs and in reports.
    #[arg(long)]
    pub id: Option<String>,
}

impl DesignArgs {
    fn spec(&self) -> Result<DesignSpec> {
        Ok(DesignSpec {
            strata: self.strata.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| s.parse::<StageSpec>())
                .collect::<Result<_>>()?,
            pair_probs: self.pair_probs.clone(),
            id: self.id.clone(),
        })
    }
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// e.g. "y ~ x + (1|g) + (1+z|h) + (1|kin:phi.csv)".
    #[arg(long)]
    pub formula: String,
    #[command(flatten)]
    pub design: DesignArgs,
    /// Column whose values key rows into kinship files.
    #[arg(long, default_value = "id")]
    pub kin_id: String,
    #[arg(long, default_value = "correlated")]
    pub pairs: PairMode,
    /// Population size N for all-pairs weighting (default: estimated).
    #[arg(long)]
    pub population_size: Option<f64>,
    #[arg(long, default_value = "sandwich")]
    pub se: SeMethod,
    /// Ignore the sampling weights.
    #[arg(long)]
    pub unweighted: bool,
    /// Stratum merges for the jackknife, FROM:INTO.
    #[arg(long = "merge-strata")]
    pub merge_strata: Vec<String>,
    #[arg(long, default_value_t = Settings::default().xtol)]
    pub xtol: f64,
    #[arg(long, default_value_t = Settings::default().ftol)]
    pub ftol: f64,
    #[arg(long, default_value_t = Settings::default().max_evals)]
    pub max_evals: usize,
    /// Restart from scaled copies of the starting point.
    #[arg(long)]
    pub multistart: bool,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Report file (JSON or CSV per --format).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SimArgs {
    #[arg(long)]
    pub study: Study,
    /// Crossed study: percent of rows where clusters align with PSUs.
    #[arg(long, default_value_t = 25.0)]
    pub overlap: f64,
    #[arg(long, default_value_t = 100)]
    pub pops: usize,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Twin studies: population and sample size multiplier.
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
    /// Jackknife the first K replicates of each population.
    #[arg(long, default_value_t = 0)]
    pub jackknife_reps: usize,
    #[arg(long)]
    pub no_sandwich: bool,
    #[arg(long, default_value_t = Settings::default().xtol)]
    pub xtol: f64,
    #[arg(long, default_value_t = Settings::default().ftol)]
    pub ftol: f64,
    #[arg(long, default_value_t = Settings::default().max_evals)]
    pub max_evals: usize,
    /// Output format (default: from the --out extension).
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ProbsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub design: DesignArgs,
    /// CSV destination (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One reported quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub name: String,
    pub estimate: f64,
    pub sandwich_se: Option<f64>,
    pub jackknife_se: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub formula: String,
    pub rows_read: usize,
    pub rows_used: usize,
    pub rows_rejected: BTreeMap<String, usize>,
    pub se_method: SeMethod,
    pub estimates: Vec<EstimateRow>,
    pub result: FitResult,
}

impl FitReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["name", "estimate", "sandwich_se", "jackknife_se"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.estimates {
            w.write_record([
                r.name.clone(),
                r.estimate.to_string(),
                opt(r.sandwich_se),
                opt(r.jackknife_se),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn table(&self) -> String {
        let r = &self.result;
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.formula);
        let _ = writeln!(
            s,
            "pairs: {} ({} model pairs, {} units), weighting: {:?}",
            r.mode, r.pair_counts.model_pairs, r.pair_counts.units, r.weighting
        );
        let rejected: usize = self.rows_rejected.values().sum();
        let _ = writeln!(
            s,
            "rows: {} read, {} used, {} rejected",
            self.rows_read, self.rows_used, rejected
        );
        let _ = writeln!(
            s,
            "{:<28} {:>14} {:>12} {:>12}",
            "", "estimate", "sandwich", "jackknife"
        );
        let f = |v: Option<f64>| {
            v.map(|x| format!("{x:>12.5}"))
                .unwrap_or_else(|| format!("{:>12}", "-"))
        };
        for e in &self.estimates {
            let _ = writeln!(
                s,
                "{:<28} {:>14.6} {} {}",
                e.name,
                e.estimate,
                f(e.sandwich_se),
                f(e.jackknife_se)
            );
        }
        let _ = writeln!(
            s,
            "deviance {:.6}, {} evaluations, {:?}",
            r.deviance, r.diagnostics.evaluations, r.diagnostics.termination
        );
        s
    }
}

fn settings(xtol: f64, ftol: f64, max_evals: usize) -> Settings {
    Settings {
        xtol,
        ftol,
        max_evals,
        ..Settings::default()
    }
}

fn load(data: &Path, formula: &str, design: &DesignArgs, kin_id: &str) -> Result<Prepared> {
    let table = Table::read(data)?;
    let f = parse_formula(formula)?;
    let base = data.parent().unwrap_or(Path::new("."));
    prepare(&table, &f, &design.spec()?, kin_id, base)
}

fn parse_merges(merges: &[String]) -> Result<Vec<(String, String)>> {
    merges
        .iter()
        .map(|m| match m.split_once(':') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
            _ => Err(Error::Design(format!(
                "stratum merge '{m}' should be FROM:INTO"
            ))),
        })
        .collect()
}

/// Runs the `fit` pipeline and builds the report.
pub fn run_fit(args: &FitArgs) -> Result<FitReport> {
    let prep = load(&args.data, &args.formula, &args.design, &args.kin_id)?;
    let pairs = PairSet::enumerate(
        &prep.structure,
        &prep.design,
        args.pairs,
        args.population_size,
    )
    .context("enumerating pairs")?;
    let options = FitOptions {
        settings: settings(args.xtol, args.ftol, args.max_evals),
        multistart: args.multistart,
        se: args.se,
        weighting: if args.unweighted {
            Weighting::Unweighted
        } else {
            Weighting::Design
        },
        merges: parse_merges(&args.merge_strata)?,
        start: None,
    };
    let result = fit(&prep.data, &prep.structure, &prep.design, &pairs, &options)?;
    let values = summary_vector(&prep.structure, &result.theta);
    let sandwich = result.sandwich_se();
    let estimates = result
        .summary_names()
        .into_iter()
        .zip(values)
        .enumerate()
        .map(|(k, (name, estimate))| EstimateRow {
            name,
            estimate,
            sandwich_se: sandwich.as_ref().and_then(|s| s.get(k).copied()),
            jackknife_se: result.jackknife.as_ref().map(|j| j.se[k]),
        })
        .collect();
    Ok(FitReport {
        formula: args.formula.clone(),
        rows_read: prep.rows_read,
        rows_used: prep.data.n(),
        rows_rejected: prep.rows_rejected,
        se_method: args.se,
        estimates,
        result,
    })
}

/// CSV of `pi_i` (rows with i = j) and of every design-correlated pair.
pub fn run_probs(args: &ProbsArgs) -> Result<String> {
    let table = Table::read(&args.data)?;
    let (d, labels) = design_only(&table, &args.design.spec()?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["i", "j", "pi", "delta"])?;
    for i in 0..d.len() {
        let p = d.unit_prob(i)?;
        w.write_record([
            &labels[i],
            &labels[i],
            &p.to_string(),
            &(p * (1.0 - p)).to_string(),
        ])?;
    }
    for pp in d.correlated_pairs()? {
        w.write_record([
            &labels[pp.i],
            &labels[pp.j],
            &pp.pi_ij.to_string(),
            &pp.delta_ij.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn sim_config(args: &SimArgs) -> StudyConfig {
    StudyConfig {
        populations: args.pops,
        replicates: args.reps,
        seed: args.seed,
        overlap_pct: args.overlap,
        scale: args.scale,
        sandwich: !args.no_sandwich,
        jackknife_reps: args.jackknife_reps,
        settings: settings(args.xtol, args.ftol, args.max_evals),
        ..StudyConfig::new(args.study)
    }
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::Io(e).context(format!("writing {}", path.display())))
}

/// Executes a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    match cli.command {
        Command::Fit(args) => {
            let report = run_fit(&args)?;
            print!("{}", report.table());
            if let Some(out) = &args.out {
                let text = match args.format {
                    Format::Json => report.to_json()?,
                    Format::Csv => report.to_csv()?,
                };
                write_out(out, &text)?;
            }
            if report.result.converged {
                Ok(0)
            } else {
                eprintln!(
                    "error: optimizer did not converge ({:?})",
                    report.result.diagnostics.termination
                );
                Ok(EXIT_NOT_CONVERGED)
            }
        }
        Command::Sim(args) => {
            let output = simlab::run(&sim_config(&args))?;
            print!("{}", output.table());
            let failures = output.failures();
            if failures > 0 {
                eprintln!("{failures} replicate fits failed");
            }
            if let Some(out) = &args.out {
                let format = args.format.unwrap_or_else(|| {
                    if out
                        .extension()
                        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
                    {
                        Format::Csv
                    } else {
                        Format::Json
                    }
                });
                let text = match format {
                    Format::Json => serde_json::to_string_pretty(&output)? + "\n",
                    Format::Csv => output.records_csv()?,
                };
                write_out(out, &text)?;
            }
            Ok(0)
        }
        Command::Probs(args) => {
            let text = run_probs(&args)?;
            match &args.out {
                Some(out) => write_out(out, &text)?,
                None => print!("{text}"),
            }
            Ok(0)
        }
    }
}

/// Process entry point: parses `std::env::args`, logs to standard error.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

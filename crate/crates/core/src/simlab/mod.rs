//! Simulation studies: synthetic populations, their sampling designs,
//! replicate fits under several estimators and bias/SE summaries.
//!
//! Every population and every sample draws from its own ChaCha stream keyed
//! by `(seed, kind, population, replicate)`, so results do not depend on how
//! replicates are scheduled across workers.

pub mod crossed;
pub mod pps;
pub mod twin;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ModelData;
use crate::design::SurveyDesign;
use crate::error::{Error, Result};
use crate::fit::{estimate, starting_values};
use crate::inference::{jackknife_se, sandwich_beta};
use crate::optimizer::Settings;
use crate::pairobj::{Objective, PairMode, PairSet, Weights};
use crate::varstruct::{ParameterVector, RandomStructure};

/// Random stream for one purpose within one population/replicate.
pub fn stream(seed: u64, kind: u8, population: usize, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(
        ((kind as u64) << 56)
            | ((population as u64 & 0xFFF_FFFF) << 28)
            | (replicate as u64 & 0xFFF_FFFF),
    );
    rng
}

/// Stream kinds.
pub(crate) const POPULATION: u8 = 1;
pub(crate) const SAMPLE: u8 = 2;

/// A drawn sample ready for fitting.
#[derive(Clone, Debug)]
pub struct Sample {
    pub data: ModelData,
    pub structure: RandomStructure,
    pub design: SurveyDesign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Unweighted correlated pairs; exactly ML when all clusters are pairs.
    NaiveUnweighted,
    PairwiseCorrelated,
    PairwiseAll,
    /// Design-weighted least squares, no variance components.
    WeightedLs,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::NaiveUnweighted => "naive-unweighted",
            Estimator::PairwiseCorrelated => "pairwise-corr",
            Estimator::PairwiseAll => "pairwise-all",
            Estimator::WeightedLs => "weighted-ls",
        })
    }
}

/// How a study reports a fitted parameter vector.
pub type ParamMap = fn(&RandomStructure, &ParameterVector) -> Vec<f64>;

/// Estimates plus optional sandwich and jackknife SEs, in study order. SE
/// entries are NaN where not available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOutput {
    pub estimates: Vec<f64>,
    pub sandwich_se: Vec<f64>,
    pub jackknife_se: Vec<f64>,
}

/// What to compute for each fit.
#[derive(Clone, Debug)]
pub struct FitPlan {
    pub settings: Settings,
    pub sandwich: bool,
    pub jackknife: bool,
}

/// Fits `estimator` to `sample` and maps the result through `params`.
/// Weighted least squares reports NaN for every non-fixed-effect slot.
pub fn run_estimator(
    sample: &Sample,
    estimator: Estimator,
    params: ParamMap,
    n_params: usize,
    plan: &FitPlan,
) -> Result<EstimatorOutput> {
    let p = sample.data.p();
    let independent;
    let (structure, mode) = match estimator {
        Estimator::NaiveUnweighted | Estimator::PairwiseCorrelated => {
            (&sample.structure, PairMode::Correlated)
        }
        Estimator::PairwiseAll => (&sample.structure, PairMode::All),
        Estimator::WeightedLs => {
            independent = RandomStructure::independent(sample.data.n());
            (&independent, PairMode::All)
        }
    };
    let pairs = PairSet::enumerate(structure, &sample.design, mode, None)?;
    let weights = |m: Option<&[f64]>| -> Weights {
        match (estimator, m) {
            (Estimator::NaiveUnweighted, None) => pairs.unit_weights(),
            (Estimator::NaiveUnweighted, Some(m)) => {
                let mut w = pairs.unit_weights();
                w.unit.iter_mut().zip(m).for_each(|(u, k)| *u *= k);
                w.pair
                    .iter_mut()
                    .zip(pairs.pairs())
                    .for_each(|(v, pr)| *v *= m[pr.i] * m[pr.j]);
                w.population = w.unit.iter().sum();
                w
            }
            (_, None) => pairs.weights(),
            (_, Some(m)) => pairs.replicate_weights(m),
        }
    };
    let mapped = |structure: &RandomStructure, theta: &ParameterVector| -> Vec<f64> {
        if estimator == Estimator::WeightedLs {
            let mut v = theta.beta.clone();
            v.resize(n_params, f64::NAN);
            v
        } else {
            params(structure, theta)
        }
    };
    let obj = Objective::new(structure, &sample.data, &pairs, weights(None))?;
    let start = starting_values(&sample.data, structure);
    let est = estimate(&obj, &start, &plan.settings, false)?;
    if !est.diagnostics.termination.converged() {
        return Err(Error::Optimizer(format!(
            "{estimator} fit did not converge"
        )));
    }
    let estimates = mapped(structure, &est.theta);

    let mut sandwich_se = vec![f64::NAN; n_params];
    if plan.sandwich && estimator != Estimator::NaiveUnweighted {
        let sp = sample.design.correlated_pairs()?;
        let v = sandwich_beta(&obj, &est.theta.nu, &est.theta.beta, &sp)?;
        for k in 0..p {
            sandwich_se[k] = v[(k, k)].sqrt();
        }
    }
    let mut jk = vec![f64::NAN; n_params];
    if plan.jackknife && estimator != Estimator::NaiveUnweighted {
        let reps = sample.design.jackknife_replicates(&[])?;
        let nu0 = est.theta.nu.clone();
        let se = jackknife_se(&estimates, &reps, |m| {
            let o = Objective::new(structure, &sample.data, &pairs, weights(Some(m)))?;
            let e = estimate(&o, &nu0, &plan.settings, false)?;
            Ok(mapped(structure, &e.theta)
                .into_iter()
                .map(|v| if v.is_nan() { 0.0 } else { v })
                .collect())
        });
        if let Ok(se) = se {
            for (k, v) in se.se.into_iter().enumerate() {
                if !estimates[k].is_nan() {
                    jk[k] = v;
                }
            }
        }
    }
    Ok(EstimatorOutput {
        estimates,
        sandwich_se,
        jackknife_se: jk,
    })
}

/// Median of the finite values; NaN if there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median bias and scaled MAD (1.4826 MAD) of one parameter's estimates.
pub fn bias_and_se(estimates: &[f64], truth: f64) -> (f64, f64) {
    let med = median(estimates);
    let dev: Vec<f64> = estimates.iter().map(|x| (x - med).abs()).collect();
    (med - truth, 1.4826 * median(&dev))
}

/// Per-parameter summary of replicate estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub bias: Vec<f64>,
    pub sim_se: Vec<f64>,
}

/// Median bias and simulation SE for one population's replicates
/// (`replicates[r][k]` is parameter `k` in replicate `r`).
pub fn summarize(replicates: &[Vec<f64>], truth: &[f64]) -> Summary {
    let mut bias = Vec::with_capacity(truth.len());
    let mut sim_se = Vec::with_capacity(truth.len());
    for (k, &t) in truth.iter().enumerate() {
        let col: Vec<f64> = replicates.iter().map(|r| r[k]).collect();
        let (b, s) = bias_and_se(&col, t);
        bias.push(b);
        sim_se.push(s);
    }
    Summary { bias, sim_se }
}

/// [`summarize`] per population against that population's reference
/// values, then averaged over populations.
pub fn summarize_populations(populations: &[Vec<Vec<f64>>], truths: &[Vec<f64>]) -> Summary {
    let truth = truths.first().map(Vec::as_slice).unwrap_or(&[]);
    let per: Vec<Summary> = populations
        .iter()
        .zip(truths)
        .filter(|(p, _)| !p.is_empty())
        .map(|(p, t)| summarize(p, t))
        .collect();
    let avg = |f: &dyn Fn(&Summary) -> &Vec<f64>| -> Vec<f64> {
        (0..truth.len())
            .map(|k| {
                let vals: Vec<f64> = per
                    .iter()
                    .map(|s| f(s)[k])
                    .filter(|v| v.is_finite())
                    .collect();
                if vals.is_empty() {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            })
            .collect()
    };
    Summary {
        bias: avg(&|s| &s.bias),
        sim_se: avg(&|s| &s.sim_se),
    }
}

/// Median of per-replicate SE estimates within each population, averaged
/// over populations.
pub fn average_se(populations: &[Vec<Vec<f64>>], n_params: usize) -> Vec<f64> {
    (0..n_params)
        .map(|k| {
            let meds: Vec<f64> = populations
                .iter()
                .map(|p| median(&p.iter().map(|r| r[k]).collect::<Vec<_>>()))
                .filter(|v| v.is_finite())
                .collect();
            if meds.is_empty() {
                f64::NAN
            } else {
                meds.iter().sum::<f64>() / meds.len() as f64
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    CrossedGrid,
    TwinOversample,
    TwinSubsample,
    PpsHerd,
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Study::CrossedGrid => "crossed-grid",
            Study::TwinOversample => "twin-oversample",
            Study::TwinSubsample => "twin-subsample",
            Study::PpsHerd => "pps-herd",
        })
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "crossed-grid" => Study::CrossedGrid,
            "twin-oversample" => Study::TwinOversample,
            "twin-subsample" => Study::TwinSubsample,
            "pps-herd" => Study::PpsHerd,
            other => {
                return Err(Error::Model(format!(
                    "unknown study '{other}' (expected crossed-grid|twin-oversample|twin-subsample|pps-herd)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub study: Study,
    pub populations: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Crossed study: percentage of grid rows where clusters align with PSUs.
    pub overlap_pct: f64,
    /// Twin studies: multiplier on population and per-stratum sample counts.
    pub scale: usize,
    pub sandwich: bool,
    /// Jackknife the first `jackknife_reps` replicates of each population.
    pub jackknife_reps: usize,
    pub settings: Settings,
}

impl StudyConfig {
    pub fn new(study: Study) -> Self {
        StudyConfig {
            study,
            populations: 100,
            replicates: 20,
            seed: 1,
            overlap_pct: 25.0,
            scale: 1,
            sandwich: true,
            jackknife_reps: 0,
            settings: Settings::default(),
        }
    }
}

/// One estimator's output on one replicate, or the reason it failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub population: usize,
    pub replicate: usize,
    pub estimator: Estimator,
    pub output: Option<EstimatorOutput>,
    pub error: Option<String>,
}

/// A summary line: `statistic` is one of bias, sim-se, sandwich-se,
/// jackknife-se.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: Estimator,
    pub statistic: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyOutput {
    pub study: Study,
    pub parameters: Vec<String>,
    pub truth: Vec<f64>,
    /// Per-population reference values that biases are measured against.
    pub population_truth: Vec<Vec<f64>>,
    pub records: Vec<ReplicateRecord>,
    pub summary: Vec<SummaryRow>,
}

impl StudyOutput {
    pub fn row(&self, estimator: Estimator, statistic: &str) -> Option<&[f64]> {
        self.summary
            .iter()
            .find(|r| r.estimator == estimator && r.statistic == statistic)
            .map(|r| r.values.as_slice())
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.output.is_none()).count()
    }

    /// Fixed-width table in the layout of the summary rows.
    pub fn table(&self) -> String {
        let mut s = format!("{:<20} {:<13}", "estimator", "statistic");
        for p in &self.parameters {
            s.push_str(&format!(" {p:>10}"));
        }
        s.push('\n');
        s.push_str(&format!("{:<20} {:<13}", "truth", ""));
        for t in &self.truth {
            s.push_str(&format!(" {t:>10.4}"));
        }
        s.push('\n');
        let n = self.population_truth.len().max(1) as f64;
        let reference: Vec<f64> = (0..self.truth.len())
            .map(|k| self.population_truth.iter().map(|t| t[k]).sum::<f64>() / n)
            .collect();
        if reference != self.truth && !self.population_truth.is_empty() {
            s.push_str(&format!("{:<20} {:<13}", "reference (mean)", ""));
            for t in &reference {
                s.push_str(&format!(" {t:>10.4}"));
            }
            s.push('\n');
        }
        for r in &self.summary {
            s.push_str(&format!(
                "{:<20} {:<13}",
                r.estimator.to_string(),
                r.statistic
            ));
            for v in &r.values {
                if v.is_finite() {
                    s.push_str(&format!(" {v:>10.4}"));
                } else {
                    s.push_str(&format!(" {:>10}", "---"));
                }
            }
            s.push('\n');
        }
        s
    }

    /// One CSV row per replicate, estimator and parameter.
    pub fn records_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "population",
            "replicate",
            "estimator",
            "parameter",
            "estimate",
            "sandwich_se",
            "jackknife_se",
            "error",
        ])?;
        for r in &self.records {
            match &r.output {
                Some(o) => {
                    for (k, name) in self.parameters.iter().enumerate() {
                        w.write_record([
                            r.population.to_string(),
                            r.replicate.to_string(),
                            r.estimator.to_string(),
                            name.clone(),
                            fmt_num(o.estimates[k]),
                            fmt_num(o.sandwich_se[k]),
                            fmt_num(o.jackknife_se[k]),
                            String::new(),
                        ])?;
                    }
                }
                None => w.write_record([
                    r.population.to_string(),
                    r.replicate.to_string(),
                    r.estimator.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    r.error.clone().unwrap_or_default(),
                ])?,
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        String::new()
    }
}

/// A study's population generator, sampler and reporting conventions.
pub(crate) trait Protocol: Sync {
    type Population: Send + Sync;
    fn parameters(&self) -> Vec<String>;
    fn truth(&self) -> Vec<f64>;
    fn estimators(&self) -> Vec<Estimator>;
    fn params(&self) -> ParamMap;
    fn population(&self, rng: &mut ChaCha8Rng) -> Result<Self::Population>;
    /// Values biases are measured against; the generating truth by default.
    fn population_truth(&self, _population: &Self::Population) -> Result<Vec<f64>> {
        Ok(self.truth())
    }
    fn sample(&self, population: &Self::Population, rng: &mut ChaCha8Rng) -> Result<Sample>;
}

pub fn run(config: &StudyConfig) -> Result<StudyOutput> {
    if config.populations < 1 || config.replicates < 2 {
        return Err(Error::Model(
            "a study needs at least 1 population and 2 replicates".into(),
        ));
    }
    match config.study {
        Study::CrossedGrid => {
            run_protocol(config, &crossed::CrossedProtocol::new(config.overlap_pct))
        }
        Study::TwinOversample => {
            run_protocol(config, &twin::TwinProtocol::new(config.scale, false))
        }
        Study::TwinSubsample => run_protocol(config, &twin::TwinProtocol::new(config.scale, true)),
        Study::PpsHerd => run_protocol(config, &pps::HerdProtocol::default()),
    }
}

fn run_protocol<P: Protocol>(config: &StudyConfig, protocol: &P) -> Result<StudyOutput> {
    let parameters = protocol.parameters();
    let truth = protocol.truth();
    let estimators = protocol.estimators();
    let n_params = parameters.len();
    let params = protocol.params();

    let mut records = Vec::new();
    let mut population_truth = Vec::with_capacity(config.populations);
    for pop_index in 0..config.populations {
        let population = protocol.population(&mut stream(config.seed, POPULATION, pop_index, 0))?;
        population_truth.push(protocol.population_truth(&population)?);
        let per_rep: Vec<Vec<ReplicateRecord>> = (0..config.replicates)
            .into_par_iter()
            .map(|rep| {
                let plan = FitPlan {
                    settings: config.settings.clone(),
                    sandwich: config.sandwich,
                    jackknife: rep < config.jackknife_reps,
                };
                let sample = protocol.sample(
                    &population,
                    &mut stream(config.seed, SAMPLE, pop_index, rep),
                );
                estimators
                    .iter()
                    .map(|&estimator| {
                        let out = sample
                            .as_ref()
                            .map_err(|e| Error::Model(e.to_string()))
                            .and_then(|s| run_estimator(s, estimator, params, n_params, &plan));
                        match out {
                            Ok(o) => ReplicateRecord {
                                population: pop_index,
                                replicate: rep,
                                estimator,
                                output: Some(o),
                                error: None,
                            },
                            Err(e) => ReplicateRecord {
                                population: pop_index,
                                replicate: rep,
                                estimator,
                                output: None,
                                error: Some(e.to_string()),
                            },
                        }
                    })
                    .collect()
            })
            .collect();
        records.extend(per_rep.into_iter().flatten());
    }

    let mut summary = Vec::new();
    for &estimator in &estimators {
        let by_pop = |f: &dyn Fn(&EstimatorOutput) -> &Vec<f64>| -> Vec<Vec<Vec<f64>>> {
            (0..config.populations)
                .map(|p| {
                    records
                        .iter()
                        .filter(|r| r.population == p && r.estimator == estimator)
                        .filter_map(|r| r.output.as_ref().map(|o| f(o).clone()))
                        .collect()
                })
                .collect()
        };
        let est = by_pop(&|o| &o.estimates);
        let s = summarize_populations(&est, &population_truth);
        summary.push(SummaryRow {
            estimator,
            statistic: "bias".into(),
            values: s.bias,
        });
        summary.push(SummaryRow {
            estimator,
            statistic: "sim-se".into(),
            values: s.sim_se,
        });
        if config.sandwich && estimator != Estimator::NaiveUnweighted {
            summary.push(SummaryRow {
                estimator,
                statistic: "sandwich-se".into(),
                values: average_se(&by_pop(&|o| &o.sandwich_se), n_params),
            });
        }
        if config.jackknife_reps > 0 && estimator != Estimator::NaiveUnweighted {
            summary.push(SummaryRow {
                estimator,
                statistic: "jackknife-se".into(),
                values: average_se(&by_pop(&|o| &o.jackknife_se), n_params),
            });
        }
    }
    Ok(StudyOutput {
        study: config.study,
        parameters,
        truth,
        population_truth,
        records,
        summary,
    })
}

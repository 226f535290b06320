//! End-to-end fitting: starting values, minimization of the profile deviance
//! and standard errors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ModelData;
use crate::design::SurveyDesign;
use crate::error::{Error, Result, ResultExt};
use crate::inference::{jackknife_se, sandwich_beta, JackknifeSe};
use crate::optimizer::{minimize, minimize_multistart, Bounds, Diagnostics, Settings};
use crate::pairobj::{Objective, PairMode, PairSet, Weights};
use crate::varstruct::{ParameterVector, RandomStructure, TermKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeMethod {
    None,
    #[default]
    Sandwich,
    Jackknife,
    Both,
}

impl SeMethod {
    fn sandwich(self) -> bool {
        matches!(self, SeMethod::Sandwich | SeMethod::Both)
    }

    fn jackknife(self) -> bool {
        matches!(self, SeMethod::Jackknife | SeMethod::Both)
    }
}

impl fmt::Display for SeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeMethod::None => "none",
            SeMethod::Sandwich => "sandwich",
            SeMethod::Jackknife => "jackknife",
            SeMethod::Both => "both",
        })
    }
}

impl FromStr for SeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => SeMethod::None,
            "sandwich" => SeMethod::Sandwich,
            "jackknife" => SeMethod::Jackknife,
            "both" => SeMethod::Both,
            other => {
                return Err(Error::Inference(format!(
                    "unknown SE method '{other}' (expected sandwich|jackknife|both|none)"
                )))
            }
        })
    }
}

/// Whether the objective uses inverse-probability weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    Design,
    Unweighted,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub settings: Settings,
    pub multistart: bool,
    pub se: SeMethod,
    pub weighting: Weighting,
    /// Stratum merges `(from, into)` applied before forming replicates.
    pub merges: Vec<(String, String)>,
    pub start: Option<Vec<f64>>,
}

/// Point estimates from one minimization.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub theta: ParameterVector,
    pub deviance: f64,
    pub diagnostics: Diagnostics,
}

/// Minimizes the profile deviance of `obj` from `start`.
pub fn estimate(
    obj: &Objective,
    start: &[f64],
    settings: &Settings,
    multistart: bool,
) -> Result<Estimate> {
    let structure = obj.structure();
    let bounds = Bounds::lower_only(structure.nu_lower_bounds());
    let f = |nu: &[f64]| obj.deviance(nu).unwrap_or(f64::NAN);
    let m = if multistart {
        minimize_multistart(f, start, &bounds, settings)
    } else {
        minimize(f, start, &bounds, settings)
    }
    .context("minimizing the profile deviance")?;
    let prof = obj.profile(&m.x).context("profile at the optimum")?;
    Ok(Estimate {
        theta: ParameterVector {
            beta: prof.beta,
            sigma2: prof.sigma2,
            nu: m.x,
        },
        deviance: prof.deviance,
        diagnostics: m.diagnostics,
    })
}

/// Method-of-moments starting point. Grouping intercepts get the ANOVA
/// between/within ratio of OLS residuals (as a relative SD, floored at 0.1);
/// every other Cholesky diagonal starts at 0.1 and off-diagonals at 0.
pub fn starting_values(data: &ModelData, structure: &RandomStructure) -> Vec<f64> {
    const FLOOR: f64 = 0.1;
    let resid = ols_residuals(data);
    let mut nu = Vec::with_capacity(structure.nu_len());
    for slot in structure.layout() {
        if !slot.is_diagonal() {
            nu.push(0.0);
            continue;
        }
        let term = &structure.terms()[slot.term];
        let v = match (&term.kind, slot.row, &resid) {
            (TermKind::Grouping { groups }, 0, Some(r)) => anova_ratio(groups, r).map(f64::sqrt),
            _ => None,
        };
        nu.push(v.unwrap_or(FLOOR).max(FLOOR));
    }
    nu
}

fn ols_residuals(data: &ModelData) -> Option<Vec<f64>> {
    let n = data.n();
    let p = data.p();
    let x = nalgebra::DMatrix::from_fn(n, p, |i, k| data.row(i)[k]);
    let y = nalgebra::DVector::from_column_slice(data.y());
    let beta = x.clone().svd(true, true).solve(&y, 1e-12).ok()?;
    let r = y - x * beta;
    Some(r.iter().copied().collect())
}

/// Between-group variance over within-group variance by one-way ANOVA.
fn anova_ratio(groups: &[usize], r: &[f64]) -> Option<f64> {
    let mut acc: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for (&g, &v) in groups.iter().zip(r) {
        let e = acc.entry(g).or_insert((0.0, 0.0));
        e.0 += 1.0;
        e.1 += v;
    }
    let n = r.len() as f64;
    let k = acc.len() as f64;
    if k < 2.0 || n - k < 1.0 {
        return None;
    }
    let grand = r.iter().sum::<f64>() / n;
    let mut within = 0.0;
    for (&g, &v) in groups.iter().zip(r) {
        let (c, s) = acc[&g];
        within += (v - s / c).powi(2);
    }
    let between: f64 = acc.values().map(|(c, s)| c * (s / c - grand).powi(2)).sum();
    let msw = within / (n - k);
    let msb = between / (k - 1.0);
    let n0 = (n - acc.values().map(|(c, _)| c * c).sum::<f64>() / n) / (k - 1.0);
    if !(msw > 0.0) || !(n0 > 0.0) {
        return None;
    }
    Some(((msb - msw) / n0).max(0.0) / msw)
}

/// A variance component on the standard-deviation scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCounts {
    pub units: usize,
    pub model_pairs: usize,
    pub design_pairs: Option<usize>,
    pub nhat_units: f64,
    pub nhat_pairs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub mode: PairMode,
    pub weighting: Weighting,
    pub beta_names: Vec<String>,
    pub theta: ParameterVector,
    pub sigma: f64,
    pub components: Vec<Component>,
    pub deviance: f64,
    pub converged: bool,
    pub diagnostics: Diagnostics,
    pub vcov_beta_sandwich: Option<Vec<Vec<f64>>>,
    /// Jackknife SEs in [`FitResult::summary_names`] order.
    pub jackknife: Option<JackknifeSe>,
    pub pair_counts: PairCounts,
}

impl FitResult {
    /// Labels of [`summary_vector`]: fixed effects, `sigma`, then variance
    /// components on the SD scale.
    pub fn summary_names(&self) -> Vec<String> {
        let mut v = self.beta_names.clone();
        v.push("sigma".into());
        v.extend(self.components.iter().map(|c| c.name.clone()));
        v
    }

    pub fn sandwich_se(&self) -> Option<Vec<f64>> {
        self.vcov_beta_sandwich
            .as_ref()
            .map(|m| (0..m.len()).map(|k| m[k][k].max(0.0).sqrt()).collect())
    }
}

/// Fixed effects, sigma and SD-scale variance components, flattened.
pub fn summary_vector(structure: &RandomStructure, theta: &ParameterVector) -> Vec<f64> {
    let sigma = theta.sigma2.sqrt();
    let mut v = theta.beta.clone();
    v.push(sigma);
    v.extend(
        structure
            .relative_sds(&theta.nu)
            .into_iter()
            .map(|(_, s)| sigma * s),
    );
    v
}

fn weights_for(pairs: &PairSet, weighting: Weighting, multipliers: Option<&[f64]>) -> Weights {
    match (weighting, multipliers) {
        (Weighting::Design, None) => pairs.weights(),
        (Weighting::Design, Some(m)) => pairs.replicate_weights(m),
        (Weighting::Unweighted, None) => pairs.unit_weights(),
        (Weighting::Unweighted, Some(m)) => {
            let mut w = pairs.unit_weights();
            w.unit.iter_mut().zip(m).for_each(|(u, k)| *u *= k);
            w.pair
                .iter_mut()
                .zip(pairs.pairs())
                .for_each(|(v, p)| *v *= m[p.i] * m[p.j]);
            w.population = pairs
                .population_size()
                .unwrap_or_else(|| w.unit.iter().sum());
            w
        }
    }
}

/// Fits the model and computes the requested standard errors.
pub fn fit(
    data: &ModelData,
    structure: &RandomStructure,
    design: &SurveyDesign,
    pairs: &PairSet,
    options: &FitOptions,
) -> Result<FitResult> {
    let obj = Objective::new(
        structure,
        data,
        pairs,
        weights_for(pairs, options.weighting, None),
    )
    .context("setting up the pairwise objective")?;
    let start = match &options.start {
        Some(s) if s.len() == structure.nu_len() => s.clone(),
        Some(s) => {
            return Err(Error::Model(format!(
                "start has {} variance parameters, model has {}",
                s.len(),
                structure.nu_len()
            )))
        }
        None => starting_values(data, structure),
    };
    let est = estimate(&obj, &start, &options.settings, options.multistart)?;
    let theta = est.theta;
    let sigma = theta.sigma2.sqrt();
    let components = structure
        .relative_sds(&theta.nu)
        .into_iter()
        .map(|(name, s)| Component {
            name,
            sd: sigma * s,
        })
        .collect();

    let mut design_pairs = None;
    let vcov = if options.se.sandwich() {
        let sp = design
            .correlated_pairs()
            .context("design-correlated pairs")?;
        design_pairs = Some(sp.len());
        let v = sandwich_beta(&obj, &theta.nu, &theta.beta, &sp).context("sandwich covariance")?;
        Some(
            (0..v.nrows())
                .map(|r| (0..v.ncols()).map(|c| v[(r, c)]).collect())
                .collect(),
        )
    } else {
        None
    };

    let jackknife = if options.se.jackknife() {
        let reps = design
            .jackknife_replicates(&options.merges)
            .context("forming jackknife replicates")?;
        let full = summary_vector(structure, &theta);
        let settings = options.settings.clone();
        let nu0 = theta.nu.clone();
        let se = jackknife_se(&full, &reps, |m| {
            let w = weights_for(pairs, options.weighting, Some(m));
            let o = Objective::new(structure, data, pairs, w)?;
            let e = estimate(&o, &nu0, &settings, false)?;
            if !e.diagnostics.termination.converged() {
                return Err(Error::Optimizer("replicate refit did not converge".into()));
            }
            Ok(summary_vector(structure, &e.theta))
        })?;
        if se.replicates_dropped > 0 {
            log::warn!(
                "{} of {} jackknife replicates dropped",
                se.replicates_dropped,
                reps.len()
            );
        }
        Some(se)
    } else {
        None
    };

    Ok(FitResult {
        mode: pairs.mode(),
        weighting: options.weighting,
        beta_names: data.columns().to_vec(),
        converged: est.diagnostics.termination.converged(),
        sigma,
        components,
        deviance: est.deviance,
        diagnostics: est.diagnostics,
        theta,
        vcov_beta_sandwich: vcov,
        jackknife,
        pair_counts: PairCounts {
            units: data.n(),
            model_pairs: pairs.pairs().len(),
            design_pairs,
            nhat_units: pairs.nhat_units(),
            nhat_pairs: pairs.nhat_pairs(),
        },
    })
}

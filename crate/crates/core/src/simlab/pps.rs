//! Dairy-herd populations with herd and genetic (sire half-sib) effects,
//! sampled by Poisson PPS on each herd's total outcome.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};

use super::{run_estimator, Estimator, FitPlan, ParamMap, Protocol, Sample};
use crate::data::ModelData;
use crate::design::{hajek_joint, ElementPath, StageDraw, StageUnit, SurveyDesign};
use crate::error::{Error, Result};
use crate::optimizer::Settings;
use crate::varstruct::{
    preset, ParameterVector, Preset, PresetInputs, RandomStructure, Relatedness,
};

#[derive(Clone, Debug, PartialEq)]
pub struct HerdParams {
    pub herds: usize,
    pub sires: usize,
    /// Log-normal cows-per-herd, capped.
    pub herd_meanlog: f64,
    pub herd_sdlog: f64,
    pub max_cows: usize,
    /// Intercept, lactation number, log days in milk.
    pub beta: [f64; 3],
    pub tau2_herd: f64,
    pub tau2_gene: f64,
    pub sigma2: f64,
    /// Expected number of sampled herds.
    pub expected_herds: f64,
}

impl Default for HerdParams {
    fn default() -> Self {
        HerdParams {
            herds: 57,
            sires: 38,
            herd_meanlog: 2.6,
            herd_sdlog: 1.0,
            max_cows: 100,
            beta: [1.1, -0.09, 0.84],
            tau2_herd: 0.67 * 0.67,
            tau2_gene: 0.66 * 0.66,
            sigma2: 0.82 * 0.82,
            expected_herds: 10.0,
        }
    }
}

/// One record per cow lactation.
#[derive(Clone, Debug)]
pub struct HerdPopulation {
    pub herd: Vec<usize>,
    pub cow: Vec<usize>,
    pub lactation: Vec<f64>,
    pub log_days: Vec<f64>,
    pub y: Vec<f64>,
    /// Sire of every cow.
    pub sire: Vec<usize>,
    pub n_herds: usize,
}

impl HerdPopulation {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn herd_totals(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.n_herds];
        for (h, y) in self.herd.iter().zip(&self.y) {
            t[*h] += y;
        }
        t
    }
}

pub fn gen_herd_population(params: &HerdParams, rng: &mut ChaCha8Rng) -> HerdPopulation {
    let g = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let sizes = LogNormal::new(params.herd_meanlog, params.herd_sdlog).expect("finite log-normal");
    let tau_g = params.tau2_gene.sqrt();
    let sire_effect: Vec<f64> = (0..params.sires).map(|_| tau_g * g(rng)).collect();
    let mut pop = HerdPopulation {
        herd: vec![],
        cow: vec![],
        lactation: vec![],
        log_days: vec![],
        y: vec![],
        sire: vec![],
        n_herds: params.herds,
    };
    for h in 0..params.herds {
        let u = params.tau2_herd.sqrt() * g(rng);
        let n_cows = (sizes.sample(rng).round() as usize).clamp(1, params.max_cows);
        for _ in 0..n_cows {
            let cow = pop.sire.len();
            let sire = rng.gen_range(0..params.sires);
            pop.sire.push(sire);
            let a = 0.5 * sire_effect[sire] + (0.75 * params.tau2_gene).sqrt() * g(rng);
            let records = rng.gen_range(1..=4);
            for lact in 1..=records {
                let ld = rng.gen_range(150.0f64..400.0).ln();
                let mu = params.beta[0] + params.beta[1] * lact as f64 + params.beta[2] * ld;
                pop.herd.push(h);
                pop.cow.push(cow);
                pop.lactation.push(lact as f64);
                pop.log_days.push(ld);
                pop.y.push(mu + u + a + params.sigma2.sqrt() * g(rng));
            }
        }
    }
    pop
}

/// Half-sib kinship over cows: 1 on the diagonal, 1/4 for a shared sire.
pub fn half_sib_kinship(sire: &[usize], cows: &[usize]) -> Result<Relatedness> {
    let mut r = Relatedness::new();
    for (a, &ca) in cows.iter().enumerate() {
        for &cb in &cows[a + 1..] {
            if ca != cb && sire[ca] == sire[cb] {
                r.insert(ca, cb, 0.25)?;
            }
        }
    }
    Ok(r)
}

/// Inclusion probabilities proportional to `size` with expected total `n`,
/// units whose share would exceed 1 taken with certainty.
pub fn pps_probabilities(size: &[f64], n: f64) -> Result<Vec<f64>> {
    if size.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Design("PPS size measures must be positive".into()));
    }
    if !(n > 0.0 && n <= size.len() as f64) {
        return Err(Error::Design(format!(
            "expected sample size {n} outside (0, {}]",
            size.len()
        )));
    }
    let mut certain = vec![false; size.len()];
    loop {
        let left = n - certain.iter().filter(|&&c| c).count() as f64;
        let total: f64 = size
            .iter()
            .zip(&certain)
            .filter(|(_, &c)| !c)
            .map(|(s, _)| s)
            .sum();
        let mut changed = false;
        for (k, s) in size.iter().enumerate() {
            if !certain[k] && left * s / total >= 1.0 {
                certain[k] = true;
                changed = true;
            }
        }
        if !changed {
            return Ok(size
                .iter()
                .zip(&certain)
                .map(|(s, &c)| if c { 1.0 } else { left * s / total })
                .collect());
        }
    }
}

/// Independent Bernoulli draws with the given probabilities.
pub fn poisson_sample(probs: &[f64], rng: &mut ChaCha8Rng) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .filter_map(|(k, &p)| {
            let u: f64 = rng.gen();
            (u < p).then_some(k)
        })
        .collect()
}

/// Exact and Hájek-approximated joint probabilities for every pair of
/// sampled herds; under Poisson sampling the exact value is `pi_h * pi_k`.
pub fn hajek_comparison(probs: &[f64], sampled: &[usize]) -> Vec<(usize, usize, f64, f64)> {
    let d: f64 = sampled.iter().map(|&h| 1.0 - probs[h]).sum();
    let mut out = Vec::new();
    for (a, &h) in sampled.iter().enumerate() {
        for &k in &sampled[a + 1..] {
            out.push((
                h,
                k,
                probs[h] * probs[k],
                hajek_joint(probs[h], probs[k], d).0,
            ));
        }
    }
    out
}

/// Sample plus the herd-level probabilities used to draw it.
#[derive(Clone, Debug)]
pub struct HerdSample {
    pub sample: Sample,
    pub herd_probs: Vec<f64>,
    pub herds: Vec<usize>,
}

pub fn sample_herds(
    pop: &HerdPopulation,
    expected: f64,
    rng: &mut ChaCha8Rng,
) -> Result<HerdSample> {
    let totals = pop.herd_totals();
    let probs = pps_probabilities(&totals, expected)?;
    let herds = poisson_sample(&probs, rng);
    if herds.len() < 2 {
        return Err(Error::Design(format!(
            "PPS draw selected {} herds",
            herds.len()
        )));
    }
    let sample = herd_sample(pop, &herds, &probs)?;
    Ok(HerdSample {
        sample,
        herd_probs: probs,
        herds,
    })
}

/// Every record of `herds`, drawn with herd probabilities `probs`.
pub fn herd_sample(pop: &HerdPopulation, herds: &[usize], probs: &[f64]) -> Result<Sample> {
    let mut chosen = vec![false; pop.n_herds];
    herds.iter().for_each(|&h| chosen[h] = true);
    let rows: Vec<usize> = (0..pop.len()).filter(|&r| chosen[pop.herd[r]]).collect();
    let mut herd_size = vec![0; pop.n_herds];
    rows.iter().for_each(|&r| herd_size[pop.herd[r]] += 1);
    let elements = rows
        .iter()
        .map(|&r| {
            let h = pop.herd[r];
            ElementPath::new(
                0,
                vec![
                    StageUnit {
                        unit: h,
                        draw: StageDraw::Bernoulli { prob: probs[h] },
                    },
                    StageUnit {
                        unit: r,
                        draw: StageDraw::Srs {
                            sampled: herd_size[h],
                            population: herd_size[h],
                        },
                    },
                ],
            )
        })
        .collect();
    let design = SurveyDesign::multistage(elements)?;
    let pick = |v: &[f64]| -> Vec<f64> { rows.iter().map(|&r| v[r]).collect() };
    let data = ModelData::from_columns(
        pick(&pop.y),
        true,
        vec![
            ("lactation".into(), pick(&pop.lactation)),
            ("log_days".into(), pick(&pop.log_days)),
        ],
    )?;
    let cows: Vec<usize> = rows.iter().map(|&r| pop.cow[r]).collect();
    let mut distinct = cows.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let structure = preset(
        Preset::HerdKinship,
        &PresetInputs {
            groups: Some(rows.iter().map(|&r| pop.herd[r]).collect()),
            individuals: Some(cows),
            kinship: Some(half_sib_kinship(&pop.sire, &distinct)?),
            ..Default::default()
        },
    )?;
    Ok(Sample {
        data,
        structure,
        design,
    })
}

/// `(intercept, lactation, log days, tau2_herd, tau2_gene, sigma2)`.
fn herd_params(_: &RandomStructure, theta: &ParameterVector) -> Vec<f64> {
    let mut v = theta.beta.clone();
    v.push(theta.sigma2 * theta.nu[0] * theta.nu[0]);
    v.push(theta.sigma2 * theta.nu[1] * theta.nu[1]);
    v.push(theta.sigma2);
    v
}

#[derive(Default)]
pub(crate) struct HerdProtocol {
    params: HerdParams,
}

impl Protocol for HerdProtocol {
    type Population = HerdPopulation;

    fn parameters(&self) -> Vec<String> {
        [
            "intercept",
            "lactation",
            "log_days",
            "tau2_herd",
            "tau2_gene",
            "sigma2",
        ]
        .map(String::from)
        .to_vec()
    }

    fn truth(&self) -> Vec<f64> {
        let p = &self.params;
        vec![
            p.beta[0],
            p.beta[1],
            p.beta[2],
            p.tau2_herd,
            p.tau2_gene,
            p.sigma2,
        ]
    }

    fn estimators(&self) -> Vec<Estimator> {
        vec![
            Estimator::NaiveUnweighted,
            Estimator::PairwiseCorrelated,
            Estimator::PairwiseAll,
        ]
    }

    fn params(&self) -> ParamMap {
        herd_params
    }

    fn population(&self, rng: &mut ChaCha8Rng) -> Result<HerdPopulation> {
        Ok(gen_herd_population(&self.params, rng))
    }

    /// Unweighted correlated-pairs fit to the complete population.
    fn population_truth(&self, population: &HerdPopulation) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..population.n_herds).collect();
        let census = herd_sample(population, &all, &vec![1.0; population.n_herds])?;
        let plan = FitPlan {
            settings: Settings::default(),
            sandwich: false,
            jackknife: false,
        };
        let out = run_estimator(&census, Estimator::NaiveUnweighted, herd_params, 6, &plan)
            .map_err(|e| e.context("complete-data fit"))?;
        Ok(out.estimates)
    }

    fn sample(&self, population: &HerdPopulation, rng: &mut ChaCha8Rng) -> Result<Sample> {
        sample_herds(population, self.params.expected_herds, rng).map(|s| s.sample)
    }
}

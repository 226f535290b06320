//! Twin-pair populations with shared-environment and additive genetic
//! effects, sampled by stratifying pairs on the absolute within-pair outcome
//! difference.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Estimator, ParamMap, Protocol, Sample};
use crate::data::ModelData;
use crate::design::{ElementPath, StageDraw, StageUnit, SurveyDesign};
use crate::error::{Error, Result};
use crate::varstruct::{preset, ParameterVector, Preset, PresetInputs, RandomStructure};

/// Pair counts of the reference population and the per-stratum takes.
pub const POPULATION_PAIRS: usize = 6917;
pub const TAKES: [usize; 4] = [50, 50, 150, 400];
/// Upper percentile of each stratum of |difference|.
pub const CUTS: [f64; 3] = [0.4, 0.6, 0.8];

#[derive(Clone, Debug, PartialEq)]
pub struct TwinParams {
    /// Intercept, male, age.
    pub beta: [f64; 3],
    pub tau_e: f64,
    pub tau_a: f64,
    pub sigma: f64,
    pub mz_fraction: f64,
}

impl Default for TwinParams {
    fn default() -> Self {
        TwinParams {
            beta: [18.68, 0.12, 1.41],
            tau_e: 1.81,
            tau_a: 1.23,
            sigma: 2.60,
            mz_fraction: 2.0 / 3.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TwinPopulation {
    pub mz: Vec<bool>,
    pub male: Vec<f64>,
    /// Age in decades, shared within the pair.
    pub age: Vec<f64>,
    pub y: Vec<[f64; 2]>,
}

impl TwinPopulation {
    pub fn n_pairs(&self) -> usize {
        self.y.len()
    }
}

pub fn gen_twin_population(
    n_pairs: usize,
    params: &TwinParams,
    rng: &mut ChaCha8Rng,
) -> TwinPopulation {
    let mut pop = TwinPopulation {
        mz: Vec::with_capacity(n_pairs),
        male: Vec::with_capacity(n_pairs),
        age: Vec::with_capacity(n_pairs),
        y: Vec::with_capacity(n_pairs),
    };
    let g = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    for _ in 0..n_pairs {
        let mz = rng.gen::<f64>() < params.mz_fraction;
        let male = if rng.gen::<bool>() { 1.0 } else { 0.0 };
        let age = rng.gen_range(2.0..5.0);
        let e = params.tau_e * g(rng);
        let shared = g(rng);
        let (a1, a2) = if mz {
            (params.tau_a * shared, params.tau_a * shared)
        } else {
            let h = 0.5f64.sqrt();
            (
                params.tau_a * h * (shared + g(rng)),
                params.tau_a * h * (shared + g(rng)),
            )
        };
        let mu = params.beta[0] + params.beta[1] * male + params.beta[2] * age;
        let y1 = mu + e + a1 + params.sigma * g(rng);
        let y2 = mu + e + a2 + params.sigma * g(rng);
        pop.mz.push(mz);
        pop.male.push(male);
        pop.age.push(age);
        pop.y.push([y1, y2]);
    }
    pop
}

/// Stratum (0..4) of every pair by |y1 - y2| percentile.
pub fn strata(pop: &TwinPopulation) -> Vec<usize> {
    let n = pop.n_pairs();
    let mut order: Vec<usize> = (0..n).collect();
    let diff = |k: usize| (pop.y[k][0] - pop.y[k][1]).abs();
    order.sort_by(|&a, &b| diff(a).total_cmp(&diff(b)).then(a.cmp(&b)));
    let mut out = vec![0; n];
    for (rank, &k) in order.iter().enumerate() {
        let q = (rank as f64 + 0.5) / n as f64;
        out[k] = CUTS.iter().filter(|&&c| q >= c).count();
    }
    out
}

/// Which individuals of the sampled pairs are kept: both, or each
/// independently with probability `keep`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SecondStage {
    Both,
    Bernoulli(f64),
}

/// Sample plus the population pair index of each element.
#[derive(Clone, Debug)]
pub struct TwinSample {
    pub sample: Sample,
    pub pairs: Vec<usize>,
}

/// Stratified SRS of pairs with `takes[k]` pairs from stratum `k`.
pub fn sample_twin(
    pop: &TwinPopulation,
    takes: [usize; 4],
    second: SecondStage,
    rng: &mut ChaCha8Rng,
) -> Result<TwinSample> {
    let st = strata(pop);
    let mut members: [Vec<usize>; 4] = Default::default();
    for (k, &s) in st.iter().enumerate() {
        members[s].push(k);
    }
    let mut elements = Vec::new();
    let (mut y, mut male, mut age, mut groups, mut mz) = (vec![], vec![], vec![], vec![], vec![]);
    for (s, pool) in members.iter().enumerate() {
        if pool.len() < takes[s] {
            return Err(Error::Design(format!(
                "twin stratum {s} has {} pairs, {} requested",
                pool.len(),
                takes[s]
            )));
        }
        let mut chosen: Vec<usize> = index::sample(rng, pool.len(), takes[s])
            .into_iter()
            .map(|i| pool[i])
            .collect();
        chosen.sort_unstable();
        for pair in chosen {
            for member in 0..2 {
                let draw = match second {
                    SecondStage::Both => StageDraw::Srs {
                        sampled: 2,
                        population: 2,
                    },
                    SecondStage::Bernoulli(p) => {
                        if rng.gen::<f64>() >= p {
                            continue;
                        }
                        StageDraw::Bernoulli { prob: p }
                    }
                };
                elements.push(ElementPath::new(
                    s,
                    vec![
                        StageUnit {
                            unit: pair,
                            draw: StageDraw::Srs {
                                sampled: takes[s],
                                population: pool.len(),
                            },
                        },
                        StageUnit {
                            unit: 2 * pair + member,
                            draw,
                        },
                    ],
                ));
                y.push(pop.y[pair][member]);
                male.push(pop.male[pair]);
                age.push(pop.age[pair]);
                groups.push(pair);
                mz.push(pop.mz[pair]);
            }
        }
    }
    let names = (1..=4).map(|k| format!("D{k}")).collect();
    let design = SurveyDesign::multistage_named(names, elements)?;
    let data = ModelData::from_columns(y, true, vec![("male".into(), male), ("age".into(), age)])?;
    let structure = preset(
        Preset::TwinAE,
        &PresetInputs {
            groups: Some(groups.clone()),
            monozygotic: Some(mz),
            ..Default::default()
        },
    )?;
    Ok(TwinSample {
        sample: Sample {
            data,
            structure,
            design,
        },
        pairs: groups,
    })
}

/// `(intercept, male, age, tau_e, tau_a, sigma)`.
fn twin_params(_: &RandomStructure, theta: &ParameterVector) -> Vec<f64> {
    let sigma = theta.sigma2.sqrt();
    let mut v = theta.beta.clone();
    v.push(sigma * theta.nu[0].abs());
    v.push(sigma * theta.nu[1].abs());
    v.push(sigma);
    v
}

pub(crate) struct TwinProtocol {
    scale: usize,
    subsample: bool,
    params: TwinParams,
}

impl TwinProtocol {
    pub fn new(scale: usize, subsample: bool) -> Self {
        TwinProtocol {
            scale: scale.max(1),
            subsample,
            params: TwinParams::default(),
        }
    }
}

impl Protocol for TwinProtocol {
    type Population = TwinPopulation;

    fn parameters(&self) -> Vec<String> {
        ["intercept", "male", "age", "tau_e", "tau_a", "sigma"]
            .map(String::from)
            .to_vec()
    }

    fn truth(&self) -> Vec<f64> {
        let p = &self.params;
        vec![p.beta[0], p.beta[1], p.beta[2], p.tau_e, p.tau_a, p.sigma]
    }

    fn estimators(&self) -> Vec<Estimator> {
        if self.subsample {
            vec![Estimator::PairwiseCorrelated, Estimator::PairwiseAll]
        } else {
            vec![Estimator::NaiveUnweighted, Estimator::PairwiseCorrelated]
        }
    }

    fn params(&self) -> ParamMap {
        twin_params
    }

    fn population(&self, rng: &mut ChaCha8Rng) -> Result<TwinPopulation> {
        Ok(gen_twin_population(
            POPULATION_PAIRS * self.scale,
            &self.params,
            rng,
        ))
    }

    fn sample(&self, population: &TwinPopulation, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let takes = TAKES.map(|t| t * self.scale);
        let second = if self.subsample {
            SecondStage::Bernoulli(0.5)
        } else {
            SecondStage::Both
        };
        sample_twin(population, takes, second, rng).map(|s| s.sample)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn population() -> TwinPopulation {
        gen_twin_population(
            POPULATION_PAIRS,
            &TwinParams::default(),
            &mut ChaCha8Rng::seed_from_u64(5),
        )
    }

    #[test]
    fn first_stage_has_650_pairs() {
        let pop = population();
        let s = sample_twin(
            &pop,
            TAKES,
            SecondStage::Both,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap()
        .sample;
        assert_eq!(s.data.n(), 1300);
        assert_eq!(s.structure.correlated_pairs().len(), 650);
    }

    #[test]
    fn strata_follow_the_percentiles() {
        let pop = population();
        let st = strata(&pop);
        let counts: Vec<usize> = (0..4)
            .map(|k| st.iter().filter(|&&s| s == k).count())
            .collect();
        let n = pop.n_pairs() as f64;
        for (c, want) in counts.iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((*c as f64 / n - want).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn subsample_thins_individuals() {
        let pop = population();
        let s = sample_twin(
            &pop,
            TAKES,
            SecondStage::Bernoulli(0.5),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap()
        .sample;
        let n = s.data.n() as f64;
        assert!((n / 1300.0 - 0.5).abs() < 0.06, "{n}");
        // retained pairs intact with probability 1/4 each, so about half of
        // the retained individuals are singletons
        let pairs = s.structure.correlated_pairs().len() as f64;
        let singletons = n - 2.0 * pairs;
        assert!((singletons / n - 0.5).abs() < 0.08, "{singletons} of {n}");
    }

    #[test]
    fn zygosity_weights_in_xi() {
        let pop = population();
        let s = sample_twin(
            &pop,
            TAKES,
            SecondStage::Both,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let nu = [0.0, 1.0];
        let mut seen = [false; 2];
        for (i, j) in s.sample.structure.correlated_pairs() {
            assert_eq!(s.pairs[i], s.pairs[j]);
            let mz = pop.mz[s.pairs[i]];
            let b = s.sample.structure.xi_entry(&nu, i, j);
            assert_eq!(b, if mz { 1.0 } else { 0.5 });
            seen[usize::from(mz)] = true;
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn oversized_take_is_refused() {
        let pop = gen_twin_population(
            100,
            &TwinParams::default(),
            &mut ChaCha8Rng::seed_from_u64(4),
        );
        assert!(sample_twin(
            &pop,
            TAKES,
            SecondStage::Both,
            &mut ChaCha8Rng::seed_from_u64(1)
        )
        .is_err());
    }
}

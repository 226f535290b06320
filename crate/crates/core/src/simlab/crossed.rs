//! Random intercepts partially crossed with the sampling design.
//!
//! The population is a 400 x 400 grid whose columns are PSUs. For the first
//! `overlap` rows cluster `c` sits in column `c`; below that, row `r` shifts
//! every cluster right by `r - overlap + 1` columns, wrapping at the edge.
//! Cluster intercepts are sorted, so clusters with small indices sit in the
//! heavily sampled first stratum.

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Estimator, ParamMap, Protocol, Sample};
use crate::data::ModelData;
use crate::design::{ElementPath, StageDraw, StageUnit, SurveyDesign};
use crate::error::Result;
use crate::varstruct::{ParameterVector, RandomStructure, VarianceTerm};

pub const GRID: usize = 400;
pub const STRATUM_WIDTH: usize = 40;
/// PSUs sampled per stratum.
pub const PSU_TAKE: [usize; 10] = [20, 5, 4, 3, 2, 2, 3, 4, 5, 20];
pub const BETA: [f64; 3] = [0.0, 1.0, 1.0];

#[derive(Clone, Debug)]
pub struct CrossedPopulation {
    pub overlap_rows: usize,
    /// Sorted cluster intercepts.
    pub u: Vec<f64>,
    /// Row-major `row * GRID + column`.
    pub z: Vec<f64>,
    pub y: Vec<f64>,
}

impl CrossedPopulation {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn cluster(&self, row: usize, col: usize) -> usize {
        cluster_of(row, col, self.overlap_rows)
    }

    pub fn x(col: usize) -> f64 {
        (col % STRATUM_WIDTH) as f64
    }
}

pub fn cluster_of(row: usize, col: usize, overlap_rows: usize) -> usize {
    if row < overlap_rows {
        col
    } else {
        let shift = (row - overlap_rows + 1) % GRID;
        (col + GRID - shift) % GRID
    }
}

pub fn overlap_rows(overlap_pct: f64) -> usize {
    if !(overlap_pct == 25.0 || overlap_pct == 75.0) {
        log::warn!("overlap {overlap_pct}% is not one of the standard settings (25, 75)");
    }
    ((overlap_pct / 100.0) * GRID as f64)
        .round()
        .clamp(0.0, GRID as f64) as usize
}

pub fn gen_crossed_population(
    overlap_pct: f64,
    tau2: f64,
    sigma2: f64,
    rng: &mut ChaCha8Rng,
) -> CrossedPopulation {
    let ov = overlap_rows(overlap_pct);
    let nu = Normal::new(0.0, tau2.sqrt()).expect("finite tau");
    let ne = Normal::new(0.0, sigma2.sqrt()).expect("finite sigma");
    let mut u: Vec<f64> = (0..GRID).map(|_| nu.sample(rng)).collect();
    u.sort_by(|a, b| a.total_cmp(b));
    let n = GRID * GRID;
    let z: Vec<f64> = (0..n)
        .map(|_| rand_distr::StandardNormal.sample(rng))
        .collect();
    let mut y = Vec::with_capacity(n);
    for r in 0..GRID {
        for c in 0..GRID {
            let k = r * GRID + c;
            let eps: f64 = ne.sample(rng);
            y.push(
                BETA[0]
                    + BETA[1] * CrossedPopulation::x(c)
                    + BETA[2] * z[k]
                    + u[cluster_of(r, c, ov)]
                    + eps,
            );
        }
    }
    CrossedPopulation {
        overlap_rows: ov,
        u,
        z,
        y,
    }
}

/// Sample plus the grid coordinates of its elements.
#[derive(Clone, Debug)]
pub struct CrossedSample {
    pub sample: Sample,
    pub cells: Vec<(usize, usize)>,
    pub psus: Vec<usize>,
}

/// Stratified SRS of columns, then SRS of rows within each sampled column:
/// 20 in the first and last sampled columns and 8 in the rest.
pub fn sample_crossed(pop: &CrossedPopulation, rng: &mut ChaCha8Rng) -> Result<CrossedSample> {
    let mut psus: Vec<(usize, usize)> = Vec::new();
    for (k, &take) in PSU_TAKE.iter().enumerate() {
        let mut cols: Vec<usize> = index::sample(rng, STRATUM_WIDTH, take)
            .into_iter()
            .map(|c| k * STRATUM_WIDTH + c)
            .collect();
        cols.sort_unstable();
        psus.extend(cols.into_iter().map(|c| (k, c)));
    }
    let last = psus.len() - 1;
    let mut cells = Vec::new();
    let mut elements = Vec::new();
    for (idx, &(k, c)) in psus.iter().enumerate() {
        let m = if idx == 0 || idx == last { 20 } else { 8 };
        let mut rows: Vec<usize> = index::sample(rng, GRID, m).into_iter().collect();
        rows.sort_unstable();
        for r in rows {
            cells.push((r, c));
            elements.push(ElementPath::new(
                k,
                vec![
                    StageUnit {
                        unit: c,
                        draw: StageDraw::Srs {
                            sampled: PSU_TAKE[k],
                            population: STRATUM_WIDTH,
                        },
                    },
                    StageUnit {
                        unit: r * GRID + c,
                        draw: StageDraw::Srs {
                            sampled: m,
                            population: GRID,
                        },
                    },
                ],
            ));
        }
    }
    let names = (1..=PSU_TAKE.len()).map(|k| format!("S{k}")).collect();
    let design = SurveyDesign::multistage_named(names, elements)?;
    let y = cells.iter().map(|&(r, c)| pop.y[r * GRID + c]).collect();
    let x = cells
        .iter()
        .map(|&(_, c)| CrossedPopulation::x(c))
        .collect();
    let z = cells.iter().map(|&(r, c)| pop.z[r * GRID + c]).collect();
    let data = ModelData::from_columns(y, true, vec![("x".into(), x), ("z".into(), z)])?;
    let groups = cells.iter().map(|&(r, c)| pop.cluster(r, c)).collect();
    let structure =
        RandomStructure::new(vec![VarianceTerm::grouping("cluster", groups, Vec::new())?])?;
    Ok(CrossedSample {
        sample: Sample {
            data,
            structure,
            design,
        },
        cells,
        psus: psus.into_iter().map(|(_, c)| c).collect(),
    })
}

/// `(beta_0, beta_x, beta_z, tau^2, sigma^2)`.
fn crossed_params(_: &RandomStructure, theta: &ParameterVector) -> Vec<f64> {
    let mut v = theta.beta.clone();
    v.push(theta.sigma2 * theta.nu[0] * theta.nu[0]);
    v.push(theta.sigma2);
    v
}

pub(crate) struct CrossedProtocol {
    overlap_pct: f64,
}

impl CrossedProtocol {
    pub fn new(overlap_pct: f64) -> Self {
        CrossedProtocol { overlap_pct }
    }
}

impl Protocol for CrossedProtocol {
    type Population = CrossedPopulation;

    fn parameters(&self) -> Vec<String> {
        ["beta_0", "beta_x", "beta_z", "tau2", "sigma2"]
            .map(String::from)
            .to_vec()
    }

    fn truth(&self) -> Vec<f64> {
        vec![BETA[0], BETA[1], BETA[2], 1.0, 1.0]
    }

    fn estimators(&self) -> Vec<Estimator> {
        vec![
            Estimator::NaiveUnweighted,
            Estimator::PairwiseCorrelated,
            Estimator::WeightedLs,
        ]
    }

    fn params(&self) -> ParamMap {
        crossed_params
    }

    fn population(&self, rng: &mut ChaCha8Rng) -> Result<CrossedPopulation> {
        Ok(gen_crossed_population(self.overlap_pct, 1.0, 1.0, rng))
    }

    fn sample(&self, population: &CrossedPopulation, rng: &mut ChaCha8Rng) -> Result<Sample> {
        sample_crossed(population, rng).map(|s| s.sample)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::BTreeSet;

    #[test]
    fn full_overlap_aligns_clusters_with_columns() {
        let ov = overlap_rows(100.0);
        for r in [0, 17, 399] {
            for c in [0, 5, 399] {
                assert_eq!(cluster_of(r, c, ov), c);
            }
        }
    }

    #[test]
    fn clusters_wrap_below_the_overlap() {
        let ov = overlap_rows(25.0);
        assert_eq!(ov, 100);
        assert_eq!(cluster_of(99, 7, ov), 7);
        assert_eq!(cluster_of(100, 8, ov), 7);
        assert_eq!(cluster_of(100, 0, ov), 399);
        // every cluster has one cell per row
        for r in [0, 150, 399] {
            let s: BTreeSet<usize> = (0..GRID).map(|c| cluster_of(r, c, ov)).collect();
            assert_eq!(s.len(), GRID);
        }
    }

    #[test]
    fn population_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pop = gen_crossed_population(25.0, 1.0, 1.0, &mut rng);
        assert_eq!(pop.len(), 160_000);
        assert!(pop.u.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sample_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pop = gen_crossed_population(25.0, 1.0, 1.0, &mut rng);
        let s = sample_crossed(&pop, &mut rng).unwrap();
        assert_eq!(s.sample.data.n(), 568);
        assert_eq!(s.psus.len(), 68);
        assert_eq!(PSU_TAKE.iter().sum::<usize>(), 68);
        // strata are contiguous 40-column blocks covering the grid
        let blocks: BTreeSet<usize> = (0..GRID).map(|c| c / STRATUM_WIDTH).collect();
        assert_eq!(blocks.len(), 10);
        for (i, &(_, c)) in s.cells.iter().enumerate() {
            assert_eq!(s.sample.design.stratum_of(i), c / STRATUM_WIDTH);
        }
        let first = s.sample.design.unit_prob(0).unwrap();
        assert!((first - 20.0 / 40.0 * 20.0 / 400.0).abs() < 1e-15);
    }
}

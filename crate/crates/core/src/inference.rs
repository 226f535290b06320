//! Design-based standard errors: a sandwich for the fixed effects and a
//! stratified delete-one-PSU jackknife for every reported parameter.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{JackknifeReplicates, PairProbability};
use crate::error::{Error, Result};
use crate::pairobj::{Objective, WeightMatrix};

/// Pieces of the fixed-effect sandwich.
#[derive(Clone, Debug, PartialEq)]
pub struct SandwichParts {
    pub bread: DMatrix<f64>,
    pub meat: DMatrix<f64>,
    pub weights: WeightMatrix,
}

/// Weight matrix of the estimating equations for the fixed effects.
pub fn assemble_w(obj: &Objective, nu: &[f64]) -> Result<WeightMatrix> {
    obj.assemble(nu)
}

/// Per-observation contributions `a_i = (sum_k W_ik x_k) e_i` to the
/// fixed-effect estimating function.
pub fn score_contributions(obj: &Objective, w: &WeightMatrix, beta: &[f64]) -> Vec<Vec<f64>> {
    let data = obj.data();
    let p = data.p();
    let e = obj.residuals(beta);
    let mut g: Vec<Vec<f64>> = (0..data.n())
        .map(|i| data.row(i).iter().map(|x| w.diag[i] * x).collect())
        .collect();
    for (pr, &wij) in obj.pairs().pairs().iter().zip(&w.off) {
        if wij == 0.0 {
            continue;
        }
        for a in 0..p {
            g[pr.i][a] += wij * data.row(pr.j)[a];
            g[pr.j][a] += wij * data.row(pr.i)[a];
        }
    }
    for (gi, ei) in g.iter_mut().zip(&e) {
        gi.iter_mut().for_each(|v| *v *= ei);
    }
    g
}

pub fn sandwich_parts(
    obj: &Objective,
    nu: &[f64],
    beta: &[f64],
    design_pairs: &[PairProbability],
) -> Result<SandwichParts> {
    let w = obj.assemble(nu)?;
    let (bread, _) = obj.normal_equations(&w);
    let a = score_contributions(obj, &w, beta);
    let p = obj.data().p();
    let probs = obj.pairs().unit_probs();
    let mut meat = DMatrix::zeros(p, p);
    for (i, ai) in a.iter().enumerate() {
        // Delta_ii / pi_i
        let f = 1.0 - probs[i];
        if f == 0.0 {
            continue;
        }
        for r in 0..p {
            for c in 0..p {
                meat[(r, c)] += f * ai[r] * ai[c];
            }
        }
    }
    for dp in design_pairs {
        let f = dp.delta_ij / dp.pi_ij;
        let (ai, aj) = (&a[dp.i], &a[dp.j]);
        for r in 0..p {
            for c in 0..p {
                meat[(r, c)] += f * (ai[r] * aj[c] + aj[r] * ai[c]);
            }
        }
    }
    Ok(SandwichParts {
        bread,
        meat,
        weights: w,
    })
}

/// `B^-1 M B^-1`, symmetrized with negative eigenvalues clipped to zero.
pub fn sandwich_beta(
    obj: &Objective,
    nu: &[f64],
    beta: &[f64],
    design_pairs: &[PairProbability],
) -> Result<DMatrix<f64>> {
    let parts = sandwich_parts(obj, nu, beta, design_pairs)?;
    let inv = parts
        .bread
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Inference("sandwich bread X'WX is not positive definite".into()))?
        .inverse();
    let v = &inv * &parts.meat * &inv;
    Ok(nearest_psd(&v))
}

fn nearest_psd(v: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (v + v.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Jackknife standard errors for a flat parameter summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JackknifeSe {
    pub se: Vec<f64>,
    pub replicates_used: usize,
    pub replicates_dropped: usize,
}

/// Refits `refit` under every replicate's multipliers and combines
/// `sum_r scale_r (theta_r - theta_full)^2`. Replicates whose refit fails are
/// dropped with a warning. Results do not depend on the worker count.
pub fn jackknife_se<F>(
    full: &[f64],
    replicates: &JackknifeReplicates,
    refit: F,
) -> Result<JackknifeSe>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if replicates.is_empty() {
        return Err(Error::Inference("no jackknife replicates".into()));
    }
    let fits: Vec<Result<Vec<f64>>> = (0..replicates.len())
        .into_par_iter()
        .map(|r| refit(&replicates.multipliers(r)))
        .collect();
    let mut ss = vec![0.0; full.len()];
    let mut used = 0;
    let mut dropped = 0;
    for (r, fit) in fits.into_iter().enumerate() {
        match fit {
            Ok(theta) if theta.len() == full.len() && theta.iter().all(|v| v.is_finite()) => {
                let scale = replicates.replicates[r].scale;
                for (s, (t, f)) in ss.iter_mut().zip(theta.iter().zip(full)) {
                    *s += scale * (t - f).powi(2);
                }
                used += 1;
            }
            Ok(_) => {
                log::warn!("jackknife replicate {r} returned an invalid estimate; dropped");
                dropped += 1;
            }
            Err(e) => {
                log::warn!("jackknife replicate {r} failed: {e}; dropped");
                dropped += 1;
            }
        }
    }
    if used == 0 {
        return Err(Error::Inference("every jackknife replicate failed".into()));
    }
    Ok(JackknifeSe {
        se: ss.into_iter().map(f64::sqrt).collect(),
        replicates_used: used,
        replicates_dropped: dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ModelData;
    use crate::design::{ElementPath, StageDraw, StageUnit, SurveyDesign};
    use crate::pairobj::{PairMode, PairSet};
    use crate::varstruct::{RandomStructure, VarianceTerm};

    fn pair_structure() -> RandomStructure {
        RandomStructure::new(vec![
            VarianceTerm::grouping("g", vec![0, 0], Vec::new()).unwrap()
        ])
        .unwrap()
    }

    #[test]
    fn identity_block_weights() {
        let s = pair_structure();
        let d = ModelData::from_columns(vec![1.0, 2.0], true, vec![]).unwrap();
        let ps = PairSet::enumerate(
            &s,
            &SurveyDesign::census(2).unwrap(),
            PairMode::Correlated,
            None,
        )
        .unwrap();
        let obj = Objective::new(&s, &d, &ps, ps.weights()).unwrap();
        let w = assemble_w(&obj, &[0.0]).unwrap();
        assert_eq!(w.off, vec![0.0]);
        assert_eq!(w.diag, vec![1.0, 1.0]);
    }

    #[test]
    fn off_diagonal_weight_divides_by_pi_ij() {
        let s = pair_structure();
        let d = ModelData::from_columns(vec![1.0, 2.0], true, vec![]).unwrap();
        let design = SurveyDesign::independent(&[0.8, 0.8])
            .unwrap()
            .with_supplied_pairs([(0, 1, 0.5)])
            .unwrap();
        let ps = PairSet::enumerate(&s, &design, PairMode::Correlated, None).unwrap();
        let obj = Objective::new(&s, &d, &ps, ps.weights()).unwrap();
        // nu = 1 gives Xi = [[2, 1], [1, 2]]
        let w = assemble_w(&obj, &[1.0]).unwrap();
        assert!((w.off[0] + 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn diagonal_weight_sums_over_pairs() {
        let s = RandomStructure::new(vec![VarianceTerm::grouping(
            "g",
            vec![0, 0, 0, 0],
            Vec::new(),
        )
        .unwrap()])
        .unwrap();
        let d = ModelData::from_columns(vec![1.0, 2.0, 0.0, 5.0], true, vec![]).unwrap();
        let ps = PairSet::enumerate(
            &s,
            &SurveyDesign::census(4).unwrap(),
            PairMode::Correlated,
            None,
        )
        .unwrap();
        let obj = Objective::new(&s, &d, &ps, ps.weights()).unwrap();
        let w = assemble_w(&obj, &[0.0]).unwrap();
        assert_eq!(w.diag, vec![3.0; 4]);
    }

    #[test]
    fn census_has_no_sampling_variance() {
        let s = RandomStructure::new(vec![VarianceTerm::grouping(
            "g",
            vec![0, 0, 1, 1, 2, 2],
            Vec::new(),
        )
        .unwrap()])
        .unwrap();
        let d = ModelData::from_columns(vec![1.0, 2.0, 0.0, 5.0, 3.0, 1.0], true, vec![]).unwrap();
        let design = SurveyDesign::census(6).unwrap();
        let ps = PairSet::enumerate(&s, &design, PairMode::Correlated, None).unwrap();
        let obj = Objective::new(&s, &d, &ps, ps.weights()).unwrap();
        let beta = obj.beta_hat(&[0.5]).unwrap();
        let v = sandwich_beta(&obj, &[0.5], &beta, &design.correlated_pairs().unwrap()).unwrap();
        assert_eq!(v[(0, 0)], 0.0);
    }

    #[test]
    fn bernoulli_mean_matches_horvitz_thompson() {
        let probs = [0.5, 0.25, 0.8, 0.4];
        let y = [3.0, -1.0, 2.0, 6.0];
        let design = SurveyDesign::independent(&probs).unwrap();
        let s = RandomStructure::independent(4);
        let ps = PairSet::enumerate(&s, &design, PairMode::All, None).unwrap();
        let d = ModelData::from_columns(y.to_vec(), true, vec![]).unwrap();
        let obj = Objective::new(&s, &d, &ps, ps.weights()).unwrap();
        let beta = obj.beta_hat(&[]).unwrap();
        let v = sandwich_beta(&obj, &[], &beta, &design.correlated_pairs().unwrap()).unwrap();
        // Linearized variance of the ratio mean sum(y/pi) / sum(1/pi):
        // sum (1 - pi) / pi^2 e_i^2 / Nhat^2.
        let nhat: f64 = probs.iter().map(|p| 1.0 / p).sum();
        let mean = y.iter().zip(&probs).map(|(v, p)| v / p).sum::<f64>() / nhat;
        let ht: f64 = y
            .iter()
            .zip(&probs)
            .map(|(v, p)| (1.0 - p) / (p * p) * (v - mean).powi(2))
            .sum::<f64>()
            / (nhat * nhat);
        assert!((beta[0] - mean).abs() < 1e-12);
        assert!((v[(0, 0)] - ht).abs() < 1e-12 * ht, "{} vs {ht}", v[(0, 0)]);
    }

    #[test]
    fn sandwich_ignores_pair_order() {
        let groups = vec![0, 0, 0, 1, 1, 2, 2, 2];
        let s = RandomStructure::new(vec![
            VarianceTerm::grouping("g", groups, Vec::new()).unwrap()
        ])
        .unwrap();
        let elements: Vec<ElementPath> = (0..8)
            .map(|i| {
                ElementPath::new(
                    0,
                    vec![
                        StageUnit {
                            unit: i / 4,
                            draw: StageDraw::Srs {
                                sampled: 2,
                                population: 5,
                            },
                        },
                        StageUnit {
                            unit: i,
                            draw: StageDraw::Srs {
                                sampled: 4,
                                population: 7,
                            },
                        },
                    ],
                )
            })
            .collect();
        let design = SurveyDesign::multistage(elements).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos() + x[i]).collect();
        let d = ModelData::from_columns(y, true, vec![("x".into(), x)]).unwrap();
        let ps = PairSet::enumerate(&s, &design, PairMode::Correlated, None).unwrap();
        let obj = Objective::new(&s, &d, &ps, ps.weights()).unwrap();
        let beta = obj.beta_hat(&[0.4]).unwrap();
        let mut sp = design.correlated_pairs().unwrap();
        let v1 = sandwich_beta(&obj, &[0.4], &beta, &sp).unwrap();
        sp.reverse();
        let v2 = sandwich_beta(&obj, &[0.4], &beta, &sp).unwrap();
        assert!((&v1 - &v2).abs().max() < 1e-14);
        assert_eq!(v1, v1.transpose());
    }

    #[test]
    fn jackknife_two_psus() {
        let design = SurveyDesign::multistage(
            (0..2)
                .map(|i| {
                    ElementPath::new(
                        0,
                        vec![StageUnit {
                            unit: i,
                            draw: StageDraw::Srs {
                                sampled: 2,
                                population: 10,
                            },
                        }],
                    )
                })
                .collect(),
        )
        .unwrap();
        let reps = design.jackknife_replicates(&[]).unwrap();
        let d = 0.3;
        let se = jackknife_se(&[1.0], &reps, |m| {
            Ok(vec![if m[0] == 0.0 { 1.0 + d } else { 1.0 - d }])
        })
        .unwrap();
        assert!((se.se[0] - d).abs() < 1e-15);
        let same = jackknife_se(&[1.0], &reps, |_| Ok(vec![1.0])).unwrap();
        assert_eq!(same.se, vec![0.0]);
        let partial = jackknife_se(&[1.0], &reps, |m| {
            if m[0] == 0.0 {
                Err(Error::Degenerate("x".into()))
            } else {
                Ok(vec![1.0])
            }
        })
        .unwrap();
        assert_eq!(
            (partial.replicates_used, partial.replicates_dropped),
            (1, 1)
        );
    }
}

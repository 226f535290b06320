//! Invariants of exact multistage inclusion probabilities.

use pairlmm::design::{ElementPath, StageDraw, StageUnit, SurveyDesign};
use proptest::prelude::*;

/// A two-stage sample: `psus` PSUs drawn from `big_n`, each contributing
/// `m` elements drawn from `big_m`.
fn two_stage(psus: usize, big_n: usize, m: usize, big_m: usize) -> SurveyDesign {
    let mut elements = Vec::new();
    for p in 0..psus {
        for e in 0..m {
            elements.push(ElementPath::new(
                0,
                vec![
                    StageUnit {
                        unit: p,
                        draw: StageDraw::Srs {
                            sampled: psus,
                            population: big_n,
                        },
                    },
                    StageUnit {
                        unit: e,
                        draw: StageDraw::Srs {
                            sampled: m,
                            population: big_m,
                        },
                    },
                ],
            ));
        }
    }
    SurveyDesign::multistage(elements).unwrap()
}

fn srs(n: usize, big_n: usize) -> SurveyDesign {
    let elements = (0..n)
        .map(|k| {
            ElementPath::new(
                0,
                vec![StageUnit {
                    unit: k,
                    draw: StageDraw::Srs {
                        sampled: n,
                        population: big_n,
                    },
                }],
            )
        })
        .collect();
    SurveyDesign::multistage(elements).unwrap()
}

fn choose2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

proptest! {
    #[test]
    fn delta_is_symmetric_and_joint_bounded(psus in 2usize..5, extra_n in 0usize..6, m in 1usize..4, extra_m in 0usize..4) {
        let d = two_stage(psus, psus + extra_n, m, m + extra_m);
        for i in 0..d.len() {
            for j in 0..d.len() {
                if i == j {
                    continue;
                }
                prop_assert_eq!(d.delta(i, j).unwrap(), d.delta(j, i).unwrap());
                let pij = d.pair_prob(i, j).unwrap();
                let (pi, pj) = (d.unit_prob(i).unwrap(), d.unit_prob(j).unwrap());
                prop_assert!(pij <= pi.min(pj) + 1e-15);
                prop_assert!(pij > 0.0);
            }
        }
    }

    #[test]
    fn srs_joint_probabilities_sum_to_pair_count(n in 2usize..9, extra in 0usize..20) {
        let big_n = n + extra;
        let d = srs(n, big_n);
        // Horvitz-Thompson estimate of the number of population pairs is exact.
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                total += 1.0 / d.pair_prob(i, j).unwrap();
            }
        }
        prop_assert!((total - choose2(big_n as f64)).abs() < 1e-9 * choose2(big_n as f64));
    }

    #[test]
    fn srs_joint_probability_closed_form(n in 2usize..9, extra in 0usize..20) {
        let big_n = (n + extra) as f64;
        let d = srs(n, n + extra);
        let expected = n as f64 * (n as f64 - 1.0) / (big_n * (big_n - 1.0));
        prop_assert!((d.pair_prob(0, 1).unwrap() - expected).abs() < 1e-15);
    }
}

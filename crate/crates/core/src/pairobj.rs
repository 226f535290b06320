//! Pair sets and the weighted pairwise Gaussian objective.
//!
//! Both pair modes reduce to the same profiled form. With a sparse symmetric
//! weight matrix `W` (diagonal plus one entry per model pair), a weighted
//! log-determinant total `L` and a weighted count `A` of stacked Gaussian
//! terms, minus twice the objective is
//!
//! ```text
//! A ln(2 pi sigma^2) + L + (Y - X b)' W (Y - X b) / sigma^2
//! ```
//!
//! so `b` is a GLS solution in `W`, `sigma^2 = Q / A`, and the profile
//! deviance is `L + A ln(2 Q / A)`.
//!
//! In correlated mode the sum runs over model-correlated pairs only. In
//! all-pairs mode every population pair is represented through the
//! decomposition `(N - 1) sum_i w_i l_i + sum_P w_ij (l_ij - l_i - l_j)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ModelData;
use crate::design::SurveyDesign;
use crate::error::{Error, Result};
use crate::varstruct::{Block2, ParameterVector, RandomStructure};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    Correlated,
    All,
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairMode::Correlated => "correlated",
            PairMode::All => "all",
        })
    }
}

impl FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correlated" => Ok(PairMode::Correlated),
            "all" => Ok(PairMode::All),
            other => Err(Error::Model(format!(
                "unknown pair mode '{other}' (expected correlated|all)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub pi_ij: f64,
}

/// Model-correlated pairs of sampled observations with their joint
/// inclusion probabilities, plus the unit probabilities.
#[derive(Clone, Debug)]
pub struct PairSet {
    mode: PairMode,
    pairs: Vec<Pair>,
    unit_probs: Vec<f64>,
    population_size: Option<f64>,
}

impl PairSet {
    /// `population_size` is the N of the all-pairs decomposition; when absent
    /// it is estimated by the weighted unit count.
    pub fn enumerate(
        structure: &RandomStructure,
        design: &SurveyDesign,
        mode: PairMode,
        population_size: Option<f64>,
    ) -> Result<Self> {
        if structure.n_obs() != design.len() {
            return Err(Error::Model(format!(
                "variance structure covers {} observations but the design has {}",
                structure.n_obs(),
                design.len()
            )));
        }
        if let Some(n) = population_size {
            if !(n >= 2.0 && n.is_finite()) {
                return Err(Error::Model(format!(
                    "population size must be at least 2, got {n}"
                )));
            }
        }
        let pairs = structure
            .correlated_pairs()
            .into_iter()
            .map(|(i, j)| {
                let pi_ij = design.pair_prob(i, j).map_err(|e| {
                    e.context(format!("joint probability for model pair ({i}, {j})"))
                })?;
                if !(pi_ij > 0.0 && pi_ij <= 1.0) {
                    return Err(Error::Design(format!(
                        "joint probability for model pair ({i}, {j}) is {pi_ij}"
                    )));
                }
                Ok(Pair { i, j, pi_ij })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PairSet {
            mode,
            pairs,
            unit_probs: design.unit_probs().to_vec(),
            population_size,
        })
    }

    pub fn mode(&self) -> PairMode {
        self.mode
    }

    pub fn with_mode(&self, mode: PairMode) -> Self {
        PairSet {
            mode,
            ..self.clone()
        }
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn n_units(&self) -> usize {
        self.unit_probs.len()
    }

    pub fn unit_probs(&self) -> &[f64] {
        &self.unit_probs
    }

    pub fn population_size(&self) -> Option<f64> {
        self.population_size
    }

    /// Estimated number of model pairs in the population.
    pub fn nhat_pairs(&self) -> f64 {
        self.pairs.iter().map(|p| 1.0 / p.pi_ij).sum()
    }

    /// Estimated population size.
    pub fn nhat_units(&self) -> f64 {
        self.unit_probs.iter().map(|p| 1.0 / p).sum()
    }

    /// Inverse-probability weights.
    pub fn weights(&self) -> Weights {
        self.replicate_weights(&vec![1.0; self.n_units()])
    }

    /// Every unit and pair weighted 1, the sample standing in for the
    /// population.
    pub fn unit_weights(&self) -> Weights {
        let n = self.n_units();
        Weights {
            unit: vec![1.0; n],
            pair: vec![1.0; self.pairs.len()],
            population: n as f64,
        }
    }

    /// Inverse-probability weights scaled by per-unit multipliers; a pair
    /// takes the product of its two multipliers.
    pub fn replicate_weights(&self, multipliers: &[f64]) -> Weights {
        assert_eq!(multipliers.len(), self.n_units(), "one multiplier per unit");
        let unit: Vec<f64> = self
            .unit_probs
            .iter()
            .zip(multipliers)
            .map(|(p, m)| m / p)
            .collect();
        let pair = self
            .pairs
            .iter()
            .map(|p| multipliers[p.i] * multipliers[p.j] / p.pi_ij)
            .collect();
        let population = self.population_size.unwrap_or_else(|| unit.iter().sum());
        Weights {
            unit,
            pair,
            population,
        }
    }
}

/// Unit and pair weights for one evaluation of the objective. `population`
/// is the N of the all-pairs decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub unit: Vec<f64>,
    pub pair: Vec<f64>,
    pub population: f64,
}

/// Sparse symmetric weight matrix of the stacked quadratic form, with the
/// weighted log-determinant total and term count at the same nu.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    pub diag: Vec<f64>,
    /// One entry per pair of the pair set, in pair order.
    pub off: Vec<f64>,
    pub logdet: f64,
    pub count: f64,
}

impl WeightMatrix {
    /// `r' W r`.
    pub fn quad(&self, pairs: &[Pair], r: &[f64]) -> f64 {
        let mut q: f64 = self.diag.iter().zip(r).map(|(w, v)| w * v * v).sum();
        for (p, w) in pairs.iter().zip(&self.off) {
            q += 2.0 * w * r[p.i] * r[p.j];
        }
        q
    }
}

/// Profiled quantities at one nu.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub deviance: f64,
}

/// Evaluator of the weighted pairwise objective for fixed data, structure,
/// pair set and weights. Basis products are computed once.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    structure: &'a RandomStructure,
    data: &'a ModelData,
    pairs: &'a PairSet,
    weights: Weights,
    ncoef: usize,
    unit_basis: Vec<f64>,
    pair_basis: Vec<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(
        structure: &'a RandomStructure,
        data: &'a ModelData,
        pairs: &'a PairSet,
        weights: Weights,
    ) -> Result<Self> {
        let n = data.n();
        if structure.n_obs() != n || pairs.n_units() != n {
            return Err(Error::Model(format!(
                "data has {n} rows, structure {} and pair set {}",
                structure.n_obs(),
                pairs.n_units()
            )));
        }
        if weights.unit.len() != n || weights.pair.len() != pairs.pairs().len() {
            return Err(Error::Model("weights do not match the pair set".into()));
        }
        if pairs.mode() == PairMode::All && !(weights.population > 1.0) {
            return Err(Error::Model(format!(
                "all-pairs mode needs a population size above 1, got {}",
                weights.population
            )));
        }
        let ncoef = structure.coef_len();
        let mut unit_basis = vec![0.0; n * ncoef];
        for i in 0..n {
            structure.basis(i, i, &mut unit_basis[i * ncoef..(i + 1) * ncoef]);
        }
        let np = pairs.pairs().len();
        let mut pair_basis = vec![0.0; np * ncoef];
        for (k, p) in pairs.pairs().iter().enumerate() {
            structure.basis(p.i, p.j, &mut pair_basis[k * ncoef..(k + 1) * ncoef]);
        }
        let obj = Objective {
            structure,
            data,
            pairs,
            weights,
            ncoef,
            unit_basis,
            pair_basis,
        };
        let rows = obj.active_rows();
        if rows.is_empty() {
            return Err(Error::Model(
                "no observation carries weight in the objective".into(),
            ));
        }
        data.check_rank(rows.iter().copied())?;
        Ok(obj)
    }

    pub fn structure(&self) -> &RandomStructure {
        self.structure
    }

    pub fn data(&self) -> &ModelData {
        self.data
    }

    pub fn pairs(&self) -> &PairSet {
        self.pairs
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Observations that enter the objective with nonzero weight.
    pub fn active_rows(&self) -> Vec<usize> {
        let n = self.data.n();
        let mut on = vec![false; n];
        match self.pairs.mode() {
            PairMode::All => {
                for (i, w) in self.weights.unit.iter().enumerate() {
                    on[i] = *w > 0.0;
                }
            }
            PairMode::Correlated => {
                for (p, w) in self.pairs.pairs().iter().zip(&self.weights.pair) {
                    if *w > 0.0 {
                        on[p.i] = true;
                        on[p.j] = true;
                    }
                }
            }
        }
        (0..n).filter(|&i| on[i]).collect()
    }

    fn dot(coef: &[f64], basis: &[f64]) -> f64 {
        coef.iter().zip(basis).map(|(a, b)| a * b).sum()
    }

    fn unit_xi(&self, coef: &[f64], i: usize) -> f64 {
        1.0 + Self::dot(coef, &self.unit_basis[i * self.ncoef..(i + 1) * self.ncoef])
    }

    /// `Xi_[ij]` for the `k`-th pair.
    pub fn pair_block(&self, coef: &[f64], k: usize) -> Block2 {
        let p = self.pairs.pairs()[k];
        Block2 {
            a: self.unit_xi(coef, p.i),
            b: Self::dot(coef, &self.pair_basis[k * self.ncoef..(k + 1) * self.ncoef]),
            d: self.unit_xi(coef, p.j),
        }
    }

    fn inverse(&self, coef: &[f64], k: usize) -> Result<(f64, Block2)> {
        let block = self.pair_block(coef, k);
        block.det_inv().ok_or_else(|| {
            let p = self.pairs.pairs()[k];
            Error::SingularBlock {
                i: p.i,
                j: p.j,
                det: block.det(),
            }
        })
    }

    /// Weight matrix, log-determinant total and term count at `nu`.
    pub fn assemble(&self, nu: &[f64]) -> Result<WeightMatrix> {
        let coef = self.structure.coefficients(nu);
        let n = self.data.n();
        let mut diag = vec![0.0; n];
        let mut off = vec![0.0; self.pairs.pairs().len()];
        let mut logdet = 0.0;
        let mut count = 0.0;
        let all = self.pairs.mode() == PairMode::All;
        let mut xi = Vec::new();
        if all {
            let m = self.weights.population - 1.0;
            xi = (0..n).map(|i| self.unit_xi(&coef, i)).collect();
            for i in 0..n {
                let w = m * self.weights.unit[i];
                if w == 0.0 {
                    continue;
                }
                diag[i] = w / xi[i];
                logdet += w * xi[i].ln();
                count += w;
            }
        }
        for (k, p) in self.pairs.pairs().iter().enumerate() {
            let w = self.weights.pair[k];
            if w == 0.0 {
                continue;
            }
            let (det, inv) = self.inverse(&coef, k)?;
            off[k] = w * inv.b;
            if all {
                diag[p.i] += w * (inv.a - 1.0 / xi[p.i]);
                diag[p.j] += w * (inv.d - 1.0 / xi[p.j]);
                logdet += w * (det.ln() - xi[p.i].ln() - xi[p.j].ln());
            } else {
                diag[p.i] += w * inv.a;
                diag[p.j] += w * inv.d;
                logdet += w * det.ln();
                count += 2.0 * w;
            }
        }
        if !(count > 0.0) {
            return Err(Error::Degenerate("objective has no weighted terms".into()));
        }
        Ok(WeightMatrix {
            diag,
            off,
            logdet,
            count,
        })
    }

    /// `(X' W X, X' W Y)`.
    pub fn normal_equations(&self, w: &WeightMatrix) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.data.p();
        let y = self.data.y();
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwy = DVector::zeros(p);
        for (i, &wi) in w.diag.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            let xi = self.data.row(i);
            for a in 0..p {
                xtwy[a] += wi * xi[a] * y[i];
                for b in 0..=a {
                    xtwx[(a, b)] += wi * xi[a] * xi[b];
                }
            }
        }
        for (pr, &wij) in self.pairs.pairs().iter().zip(&w.off) {
            if wij == 0.0 {
                continue;
            }
            let (xi, xj) = (self.data.row(pr.i), self.data.row(pr.j));
            for a in 0..p {
                xtwy[a] += wij * (xi[a] * y[pr.j] + xj[a] * y[pr.i]);
                for b in 0..=a {
                    xtwx[(a, b)] += wij * (xi[a] * xj[b] + xj[a] * xi[b]);
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(b, a)] = xtwx[(a, b)];
            }
        }
        (xtwx, xtwy)
    }

    fn solve_beta(&self, w: &WeightMatrix) -> Result<Vec<f64>> {
        let (xtwx, xtwy) = self.normal_equations(w);
        let chol = xtwx.cholesky().ok_or_else(|| {
            Error::Degenerate(
                "weighted normal equations for the fixed effects are not positive definite".into(),
            )
        })?;
        Ok(chol.solve(&xtwy).iter().copied().collect())
    }

    pub fn residuals(&self, beta: &[f64]) -> Vec<f64> {
        let y = self.data.y();
        (0..self.data.n())
            .map(|i| {
                y[i] - self
                    .data
                    .row(i)
                    .iter()
                    .zip(beta)
                    .map(|(x, b)| x * b)
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn beta_hat(&self, nu: &[f64]) -> Result<Vec<f64>> {
        let w = self.assemble(nu)?;
        self.solve_beta(&w)
    }

    pub fn sigma2_hat(&self, nu: &[f64], beta: &[f64]) -> Result<f64> {
        let w = self.assemble(nu)?;
        let q = w.quad(self.pairs.pairs(), &self.residuals(beta));
        sigma2_from(q, w.count, self.response_scale(&w))
    }

    /// `Y' W Y`, against which a vanishing residual sum is judged.
    fn response_scale(&self, w: &WeightMatrix) -> f64 {
        w.quad(self.pairs.pairs(), self.data.y())
    }

    /// Profiled fixed effects, residual variance and deviance at `nu`.
    pub fn profile(&self, nu: &[f64]) -> Result<Profile> {
        let w = self.assemble(nu)?;
        let beta = self.solve_beta(&w)?;
        let q = w.quad(self.pairs.pairs(), &self.residuals(&beta));
        let sigma2 = sigma2_from(q, w.count, self.response_scale(&w))?;
        let deviance = w.logdet + w.count * (2.0 * sigma2).ln();
        if !deviance.is_finite() {
            return Err(Error::NonFinite(format!("profile deviance at nu = {nu:?}")));
        }
        Ok(Profile {
            beta,
            sigma2,
            deviance,
        })
    }

    pub fn deviance(&self, nu: &[f64]) -> Result<f64> {
        self.profile(nu).map(|p| p.deviance)
    }

    /// The weighted objective (a log composite likelihood) at an arbitrary
    /// parameter vector. At the profile optimum it equals
    /// `-(deviance + A (ln pi + 1)) / 2`.
    pub fn loglik(&self, theta: &ParameterVector) -> Result<f64> {
        if !(theta.sigma2 > 0.0) {
            return Err(Error::Model(format!(
                "sigma^2 must be positive, got {}",
                theta.sigma2
            )));
        }
        let w = self.assemble(&theta.nu)?;
        let q = w.quad(self.pairs.pairs(), &self.residuals(&theta.beta));
        Ok(-0.5 * (w.count * (LN_2PI + theta.sigma2.ln()) + w.logdet + q / theta.sigma2))
    }

    /// Weighted term count `A`: twice the weighted pair count in correlated
    /// mode, `(N - 1) sum w_i` in all-pairs mode.
    pub fn term_count(&self) -> f64 {
        match self.pairs.mode() {
            PairMode::Correlated => 2.0 * self.weights.pair.iter().sum::<f64>(),
            PairMode::All => {
                (self.weights.population - 1.0) * self.weights.unit.iter().sum::<f64>()
            }
        }
    }
}

fn sigma2_from(q: f64, count: f64, scale: f64) -> Result<f64> {
    let s = q / count;
    if !(q > 1e-24 * scale.abs()) || !s.is_finite() {
        return Err(Error::Degenerate(format!(
            "weighted residual sum of squares is {q:e}; residuals are degenerate"
        )));
    }
    Ok(s)
}

/// Bivariate Gaussian loglikelihood of observations `i` and `j`.
pub fn pair_loglik(
    theta: &ParameterVector,
    structure: &RandomStructure,
    data: &ModelData,
    i: usize,
    j: usize,
) -> Result<f64> {
    let block = structure.xi_block(&theta.nu, i, j);
    let (det, inv) = block.det_inv().ok_or(Error::SingularBlock {
        i,
        j,
        det: block.det(),
    })?;
    let r = |k: usize| {
        data.y()[k]
            - data
                .row(k)
                .iter()
                .zip(&theta.beta)
                .map(|(x, b)| x * b)
                .sum::<f64>()
    };
    let rv = [r(i), r(j)];
    let q = inv.quad(rv, rv);
    Ok(-0.5 * (2.0 * (LN_2PI + theta.sigma2.ln()) + det.ln() + q / theta.sigma2))
}

/// Univariate Gaussian loglikelihood of observation `i`.
pub fn unit_loglik(
    theta: &ParameterVector,
    structure: &RandomStructure,
    data: &ModelData,
    i: usize,
) -> f64 {
    let xi = structure.xi_entry(&theta.nu, i, i);
    let r = data.y()[i]
        - data
            .row(i)
            .iter()
            .zip(&theta.beta)
            .map(|(x, b)| x * b)
            .sum::<f64>();
    -0.5 * (LN_2PI + (theta.sigma2 * xi).ln() + r * r / (theta.sigma2 * xi))
}

/// Weighted correlated-pairs loglikelihood `sum_P w_ij l_ij`, summed pair by
/// pair.
pub fn pairwise_loglik(
    theta: &ParameterVector,
    structure: &RandomStructure,
    data: &ModelData,
    pairs: &PairSet,
    weights: &Weights,
) -> Result<f64> {
    let mut s = 0.0;
    for (p, w) in pairs.pairs().iter().zip(&weights.pair) {
        if *w != 0.0 {
            s += w * pair_loglik(theta, structure, data, p.i, p.j)?;
        }
    }
    Ok(s)
}

/// All-pairs objective `(N - 1) sum_i w_i l_i + sum_P w_ij (l_ij - l_i - l_j)`,
/// summed term by term.
pub fn all_pairs_objective(
    theta: &ParameterVector,
    structure: &RandomStructure,
    data: &ModelData,
    pairs: &PairSet,
    weights: &Weights,
) -> Result<f64> {
    let li: Vec<f64> = (0..data.n())
        .map(|i| unit_loglik(theta, structure, data, i))
        .collect();
    let mut s = (weights.population - 1.0)
        * li.iter()
            .zip(&weights.unit)
            .map(|(l, w)| l * w)
            .sum::<f64>();
    for (p, w) in pairs.pairs().iter().zip(&weights.pair) {
        if *w != 0.0 {
            s += w * (pair_loglik(theta, structure, data, p.i, p.j)? - li[p.i] - li[p.j]);
        }
    }
    Ok(s)
}

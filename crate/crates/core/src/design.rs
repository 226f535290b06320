//! Sampling designs and inclusion probabilities.
//!
//! A design is stored as one path per sampled element: the stratum, then the
//! unit drawn at each stage (PSU, secondary unit, ..., element). Single and
//! joint inclusion probabilities follow from comparing paths: stages where the
//! two elements share a unit contribute that unit's marginal probability, the
//! stage where the paths split contributes a joint draw probability, and the
//! remaining stages contribute each element's own marginal probability.
//!
//! Nothing of size n x n is stored. Joint probabilities cost O(depth) per
//! pair, so callers that need them repeatedly cache them in their pair lists.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a unit was drawn at one stage, relative to its parent unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StageDraw {
    /// Equal-probability sampling without replacement: `sampled` of `population`.
    Srs { sampled: usize, population: usize },
    /// Independent (Poisson) inclusion with the given probability.
    Bernoulli { prob: f64 },
    /// Fixed-size unequal-probability draw; joint probabilities use the
    /// sample-based Hájek approximation.
    Pps { prob: f64 },
}

impl StageDraw {
    pub fn marginal(&self) -> f64 {
        match *self {
            StageDraw::Srs {
                sampled,
                population,
            } => sampled as f64 / population as f64,
            StageDraw::Bernoulli { prob } | StageDraw::Pps { prob } => prob,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match *self {
            StageDraw::Srs {
                sampled,
                population,
            } => {
                if population == 0 {
                    return Err(Error::Design("zero population count at a stage".into()));
                }
                if sampled == 0 || sampled > population {
                    return Err(Error::Design(format!(
                        "stage sample count {sampled} outside 1..={population}"
                    )));
                }
            }
            StageDraw::Bernoulli { prob } | StageDraw::Pps { prob } => {
                if !(prob > 0.0 && prob <= 1.0) {
                    return Err(Error::Design(format!(
                        "stage probability {prob} outside (0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageUnit {
    /// Unit identifier, unique within its parent unit.
    pub unit: usize,
    pub draw: StageDraw,
}

/// Stratum plus the sequence of units containing one sampled element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementPath {
    pub stratum: usize,
    pub stages: Vec<StageUnit>,
}

impl ElementPath {
    pub fn new(stratum: usize, stages: Vec<StageUnit>) -> Self {
        ElementPath { stratum, stages }
    }

    pub fn psu(&self) -> usize {
        self.stages[0].unit
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DesignMode {
    /// Every stage is SRS or Bernoulli: joint probabilities are exact.
    MultistageSrs,
    /// At least one PPS stage: joint probabilities use the Hájek approximation.
    Pps,
    /// Joint probabilities come from a user table.
    Supplied,
}

/// Covariance of two sampling indicators together with the joint probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairProbability {
    pub i: usize,
    pub j: usize,
    pub pi_ij: f64,
    pub delta_ij: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HajekFlag {
    Ok,
    /// Sum of (1 - pi_k) was zero; independence was returned.
    Census,
    /// Formula left (0, min(pi_i, pi_j)] and was clamped.
    Clamped,
}

/// Hájek approximation to a joint inclusion probability given the
/// denominator `d` (sample version: sum of 1 - pi_k over the sample).
pub fn hajek_joint(pi_i: f64, pi_j: f64, d: f64) -> (f64, HajekFlag) {
    let indep = pi_i * pi_j;
    if d <= 0.0 {
        return (indep, HajekFlag::Census);
    }
    let value = indep * (1.0 - (1.0 - pi_i) * (1.0 - pi_j) / d);
    let upper = pi_i.min(pi_j);
    if value > upper {
        log::warn!("Hájek joint probability {value} exceeds min(pi_i, pi_j) = {upper}; clamped");
        (upper, HajekFlag::Clamped)
    } else if value <= 0.0 {
        let floor = indep * f64::EPSILON;
        log::warn!("Hájek joint probability {value} is not positive; clamped to {floor:e}");
        (floor, HajekFlag::Clamped)
    } else {
        (value, HajekFlag::Ok)
    }
}

/// Sample-based Hájek approximation for units `i` and `j` of `sample_probs`.
pub fn pair_prob_hajek(sample_probs: &[f64], i: usize, j: usize) -> Result<(f64, HajekFlag)> {
    if sample_probs.len() < 2 {
        return Err(Error::Design(
            "Hájek approximation needs at least 2 sampled units".into(),
        ));
    }
    for &p in sample_probs {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Design(format!(
                "inclusion probability {p} outside (0, 1]"
            )));
        }
    }
    let pi_i = *sample_probs.get(i).ok_or(Error::UnknownElement(i))?;
    let pi_j = *sample_probs.get(j).ok_or(Error::UnknownElement(j))?;
    let d: f64 = sample_probs.iter().map(|p| 1.0 - p).sum();
    Ok(hajek_joint(pi_i, pi_j, d))
}

/// Key for a user-supplied joint probability table; always `(min, max)`.
fn pair_key(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

#[derive(Clone, Debug)]
pub struct SurveyDesign {
    strata_names: Vec<String>,
    elements: Vec<ElementPath>,
    unit_probs: Vec<f64>,
    /// Sum of (1 - pi) over sampled units of a PPS stage, keyed by the parent
    /// prefix `[stratum, unit_0, ..., unit_{s-1}, s]`.
    hajek_denominators: HashMap<Vec<usize>, f64>,
    supplied: Option<HashMap<(usize, usize), f64>>,
}

impl SurveyDesign {
    /// Multistage design from element paths. Strata are named by index.
    pub fn multistage(elements: Vec<ElementPath>) -> Result<Self> {
        let n_strata = elements.iter().map(|e| e.stratum + 1).max().unwrap_or(0);
        let names = (0..n_strata).map(|k| k.to_string()).collect();
        Self::multistage_named(names, elements)
    }

    pub fn multistage_named(strata_names: Vec<String>, elements: Vec<ElementPath>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::Design("design has no elements".into()));
        }
        let mut draws: HashMap<Vec<usize>, StageDraw> = HashMap::new();
        let mut children: HashMap<Vec<usize>, BTreeMap<usize, f64>> = HashMap::new();
        let mut full_paths: HashMap<Vec<usize>, usize> = HashMap::new();
        for (idx, e) in elements.iter().enumerate() {
            if e.stages.is_empty() {
                return Err(Error::Design(format!(
                    "element {idx} has no sampling stages"
                )));
            }
            if e.stratum >= strata_names.len() {
                return Err(Error::Design(format!(
                    "element {idx} has unknown stratum {}",
                    e.stratum
                )));
            }
            let mut prefix = vec![e.stratum];
            for (s, st) in e.stages.iter().enumerate() {
                st.draw
                    .validate()
                    .map_err(|err| err.context(format!("element {idx}, stage {}", s + 1)))?;
                let mut parent = prefix.clone();
                parent.push(s);
                children
                    .entry(parent)
                    .or_default()
                    .insert(st.unit, 1.0 - st.draw.marginal());
                prefix.push(st.unit);
                match draws.get(&prefix) {
                    Some(d) if *d != st.draw => {
                        return Err(Error::Design(format!(
                            "element {idx}: stage {} unit {} has inconsistent sampling counts",
                            s + 1,
                            st.unit
                        )))
                    }
                    Some(_) => {}
                    None => {
                        draws.insert(prefix.clone(), st.draw);
                    }
                }
            }
            if let Some(other) = full_paths.insert(prefix, idx) {
                return Err(Error::Design(format!(
                    "elements {other} and {idx} have identical sampling paths"
                )));
            }
        }
        // Sampled units per parent may not exceed the declared SRS sample size.
        for (parent, units) in &children {
            let stage = *parent.last().unwrap();
            let mut key = parent[..parent.len() - 1].to_vec();
            key.push(*units.keys().next().unwrap());
            if let Some(StageDraw::Srs { sampled, .. }) = draws.get(&key) {
                if units.len() > *sampled {
                    return Err(Error::Design(format!(
                        "stage {} has {} distinct sampled units but declares n = {}",
                        stage + 1,
                        units.len(),
                        sampled
                    )));
                }
            }
        }
        let mut hajek_denominators = HashMap::new();
        for (parent, units) in children {
            let mut key = parent[..parent.len() - 1].to_vec();
            key.push(*units.keys().next().unwrap());
            if matches!(draws.get(&key), Some(StageDraw::Pps { .. })) {
                hajek_denominators.insert(parent, units.values().sum());
            }
        }
        let unit_probs = elements
            .iter()
            .map(|e| e.stages.iter().map(|s| s.draw.marginal()).product())
            .collect();
        Ok(SurveyDesign {
            strata_names,
            elements,
            unit_probs,
            hajek_denominators,
            supplied: None,
        })
    }

    /// Design whose joint probabilities come from a table of `(i, j, pi_ij)`;
    /// missing pairs default to `pi_i * pi_j`.
    pub fn with_supplied_pairs(
        mut self,
        table: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut map = HashMap::new();
        for (i, j, p) in table {
            let n = self.len();
            if i >= n {
                return Err(Error::UnknownElement(i));
            }
            if j >= n {
                return Err(Error::UnknownElement(j));
            }
            if i == j {
                return Err(Error::Design(format!(
                    "supplied pair ({i}, {i}) is not a pair"
                )));
            }
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Design(format!(
                    "supplied pi_ij = {p} for ({i}, {j}) outside (0, 1]"
                )));
            }
            let bound = self.unit_probs[i].min(self.unit_probs[j]);
            if p > bound * (1.0 + 1e-12) {
                return Err(Error::Design(format!(
                    "supplied pi_ij = {p} for ({i}, {j}) exceeds min(pi_i, pi_j) = {bound}"
                )));
            }
            map.insert(pair_key(i, j), p);
        }
        self.supplied = Some(map);
        Ok(self)
    }

    /// Single-stratum independent (Poisson) sampling of elements.
    pub fn independent(probs: &[f64]) -> Result<Self> {
        let elements = probs
            .iter()
            .enumerate()
            .map(|(i, &prob)| {
                ElementPath::new(
                    0,
                    vec![StageUnit {
                        unit: i,
                        draw: StageDraw::Bernoulli { prob },
                    }],
                )
            })
            .collect();
        Self::multistage(elements)
    }

    /// Every element sampled with certainty.
    pub fn census(n: usize) -> Result<Self> {
        let elements = (0..n)
            .map(|i| {
                ElementPath::new(
                    0,
                    vec![StageUnit {
                        unit: i,
                        draw: StageDraw::Srs {
                            sampled: n,
                            population: n,
                        },
                    }],
                )
            })
            .collect();
        Self::multistage(elements)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn mode(&self) -> DesignMode {
        if self.supplied.is_some() {
            DesignMode::Supplied
        } else if self.elements.iter().any(|e| {
            e.stages
                .iter()
                .any(|s| matches!(s.draw, StageDraw::Pps { .. }))
        }) {
            DesignMode::Pps
        } else {
            DesignMode::MultistageSrs
        }
    }

    pub fn elements(&self) -> &[ElementPath] {
        &self.elements
    }

    pub fn strata_names(&self) -> &[String] {
        &self.strata_names
    }

    pub fn stratum_of(&self, i: usize) -> usize {
        self.elements[i].stratum
    }

    pub fn unit_probs(&self) -> &[f64] {
        &self.unit_probs
    }

    pub fn unit_prob(&self, i: usize) -> Result<f64> {
        self.unit_probs
            .get(i)
            .copied()
            .ok_or(Error::UnknownElement(i))
    }

    /// Joint inclusion probability by whichever route the design supports.
    pub fn pair_prob(&self, i: usize, j: usize) -> Result<f64> {
        let n = self.len();
        if i >= n {
            return Err(Error::UnknownElement(i));
        }
        if j >= n {
            return Err(Error::UnknownElement(j));
        }
        if i == j {
            return Ok(self.unit_probs[i]);
        }
        if let Some(table) = &self.supplied {
            return Ok(table
                .get(&pair_key(i, j))
                .copied()
                .unwrap_or(self.unit_probs[i] * self.unit_probs[j]));
        }
        self.path_joint(i, j)
    }

    /// Exact joint probability; only defined for SRS/Bernoulli designs.
    pub fn pair_prob_exact(&self, i: usize, j: usize) -> Result<PairProbability> {
        if self.mode() != DesignMode::MultistageSrs {
            return Err(Error::Design(format!(
                "exact joint probabilities need a multistage SRS design, found {:?}",
                self.mode()
            )));
        }
        if i == j {
            return Err(Error::Design(
                "exact joint probability requested for i == j".into(),
            ));
        }
        let pi_ij = self.pair_prob(i, j)?;
        Ok(PairProbability {
            i,
            j,
            pi_ij,
            delta_ij: pi_ij - self.unit_probs[i] * self.unit_probs[j],
        })
    }

    /// Covariance of the sampling indicators; `pi_i (1 - pi_i)` on the diagonal.
    pub fn delta(&self, i: usize, j: usize) -> Result<f64> {
        let pi_i = self.unit_prob(i)?;
        if i == j {
            return Ok(pi_i * (1.0 - pi_i));
        }
        let pi_j = self.unit_prob(j)?;
        Ok(self.pair_prob(i, j)? - pi_i * pi_j)
    }

    fn path_joint(&self, i: usize, j: usize) -> Result<f64> {
        let a = &self.elements[i];
        let b = &self.elements[j];
        if a.stratum != b.stratum {
            return Ok(self.unit_probs[i] * self.unit_probs[j]);
        }
        let mut prob = 1.0;
        for s in 0..a.stages.len().min(b.stages.len()) {
            let (ua, ub) = (&a.stages[s], &b.stages[s]);
            if ua.unit == ub.unit {
                prob *= ua.draw.marginal();
                continue;
            }
            let joint = match (ua.draw, ub.draw) {
                (
                    StageDraw::Srs {
                        sampled,
                        population,
                    },
                    _,
                ) => {
                    if sampled < 2 || population < 2 {
                        return Err(Error::Design(format!(
                            "elements {i} and {j} are in different units at stage {} where only {sampled} of {population} units are drawn",
                            s + 1
                        )));
                    }
                    (sampled * (sampled - 1)) as f64 / (population * (population - 1)) as f64
                }
                (StageDraw::Bernoulli { prob: p }, StageDraw::Bernoulli { prob: q }) => p * q,
                (StageDraw::Pps { prob: p }, StageDraw::Pps { prob: q }) => {
                    let mut parent = Vec::with_capacity(s + 2);
                    parent.push(a.stratum);
                    parent.extend(a.stages[..s].iter().map(|u| u.unit));
                    parent.push(s);
                    let d = self.hajek_denominators.get(&parent).copied().unwrap_or(0.0);
                    hajek_joint(p, q, d).0
                }
                _ => {
                    return Err(Error::Design(format!(
                        "elements {i} and {j} were drawn by different methods at stage {}",
                        s + 1
                    )))
                }
            };
            let rest_a: f64 = a.stages[s + 1..]
                .iter()
                .map(|u| u.draw.marginal())
                .product();
            let rest_b: f64 = b.stages[s + 1..]
                .iter()
                .map(|u| u.draw.marginal())
                .product();
            return Ok(prob * joint * rest_a * rest_b);
        }
        Err(Error::Design(format!(
            "elements {i} and {j} have nested sampling paths of different depth"
        )))
    }

    /// Pairs of sampled elements whose indicators are correlated by the
    /// design, with their joint probability and covariance. Only pairs in the
    /// same stratum can qualify; elements in different strata are independent.
    pub fn correlated_pairs(&self) -> Result<Vec<PairProbability>> {
        let mut by_stratum: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.elements.iter().enumerate() {
            by_stratum.entry(e.stratum).or_default().push(i);
        }
        let mut out = Vec::new();
        if let Some(table) = &self.supplied {
            let mut keys: Vec<_> = table.iter().map(|(&k, &v)| (k, v)).collect();
            keys.sort_by(|a, b| a.0.cmp(&b.0));
            for ((i, j), p) in keys {
                let delta = p - self.unit_probs[i] * self.unit_probs[j];
                if delta != 0.0 {
                    out.push(PairProbability {
                        i,
                        j,
                        pi_ij: p,
                        delta_ij: delta,
                    });
                }
            }
            return Ok(out);
        }
        for members in by_stratum.values() {
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[a + 1..] {
                    let pi_ij = self.path_joint(i, j)?;
                    let delta = pi_ij - self.unit_probs[i] * self.unit_probs[j];
                    if delta.abs() > 1e-15 * pi_ij {
                        out.push(PairProbability {
                            i,
                            j,
                            pi_ij,
                            delta_ij: delta,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Stratum-merging relabel used for replication: `merges` maps a stratum
    /// name onto another.
    pub fn jackknife_replicates(&self, merges: &[(String, String)]) -> Result<JackknifeReplicates> {
        let mut relabel: Vec<usize> = (0..self.strata_names.len()).collect();
        for (from, into) in merges {
            let f = self.stratum_index(from)?;
            let t = self.stratum_index(into)?;
            relabel[f] = t;
        }
        // Resolve chains a -> b -> c.
        for k in 0..relabel.len() {
            let mut t = relabel[k];
            let mut steps = 0;
            while relabel[t] != t && steps < relabel.len() {
                t = relabel[t];
                steps += 1;
            }
            relabel[k] = t;
        }
        let mut psus: BTreeMap<usize, BTreeMap<(usize, usize), usize>> = BTreeMap::new();
        for e in &self.elements {
            psus.entry(relabel[e.stratum])
                .or_default()
                .insert((e.stratum, e.psu()), 0);
        }
        let mut psu_index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut replicates = Vec::new();
        for (&stratum, members) in psus.iter_mut() {
            let n_k = members.len();
            if n_k < 2 {
                return Err(Error::LonelyPsu {
                    stratum: self.strata_names[stratum].clone(),
                });
            }
            for (key, slot) in members.iter_mut() {
                let idx = psu_index.len();
                *slot = idx;
                psu_index.insert(*key, idx);
                replicates.push(Replicate {
                    stratum,
                    psu: idx,
                    inflation: n_k as f64 / (n_k as f64 - 1.0),
                    scale: (n_k as f64 - 1.0) / n_k as f64,
                });
            }
        }
        let element_stratum = self.elements.iter().map(|e| relabel[e.stratum]).collect();
        let element_psu = self
            .elements
            .iter()
            .map(|e| psu_index[&(e.stratum, e.psu())])
            .collect();
        Ok(JackknifeReplicates {
            element_stratum,
            element_psu,
            replicates,
        })
    }

    fn stratum_index(&self, name: &str) -> Result<usize> {
        self.strata_names
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::Design(format!("unknown stratum '{name}'")))
    }
}

/// One delete-a-PSU replicate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Replicate {
    pub stratum: usize,
    pub psu: usize,
    /// Multiplier n_k / (n_k - 1) for the retained PSUs of the stratum.
    pub inflation: f64,
    /// Variance factor (n_k - 1) / n_k.
    pub scale: f64,
}

/// Stratified JKn replicates over sampled PSUs.
#[derive(Clone, Debug)]
pub struct JackknifeReplicates {
    element_stratum: Vec<usize>,
    element_psu: Vec<usize>,
    pub replicates: Vec<Replicate>,
}

impl JackknifeReplicates {
    pub fn len(&self) -> usize {
        self.replicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicates.is_empty()
    }

    /// Element weight multipliers for replicate `r`.
    pub fn multipliers(&self, r: usize) -> Vec<f64> {
        let rep = self.replicates[r];
        self.element_stratum
            .iter()
            .zip(&self.element_psu)
            .map(|(&k, &psu)| {
                if psu == rep.psu {
                    0.0
                } else if k == rep.stratum {
                    rep.inflation
                } else {
                    1.0
                }
            })
            .collect()
    }
}

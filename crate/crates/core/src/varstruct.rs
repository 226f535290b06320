//! Random-effect covariance structures.
//!
//! The scaled covariance of the outcome is `Xi = I + sum_g R_g .* (Z_g V_g Z_g')`
//! where `R_g` is either a same-group indicator or an explicit relatedness
//! matrix, and `V_g = L_g L_g'` with `L_g` lower triangular. The flat variance
//! parameter `nu` lists the lower-triangular entries of every `L_g`, row by row.
//!
//! Only individual entries of `Xi` are ever formed.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse symmetric relatedness matrix over individual keys. Diagonal entries
/// default to 1 unless overridden.
#[derive(Clone, Debug, Default)]
pub struct Relatedness {
    off: HashMap<(usize, usize), f64>,
    diag: HashMap<usize, f64>,
}

impl Relatedness {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build from `(a, b, value)` triplets; `a == b` overrides the diagonal.
    pub fn from_triplets(triplets: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut r = Relatedness::new();
        for (a, b, v) in triplets {
            r.insert(a, b, v)?;
        }
        Ok(r)
    }

    pub fn insert(&mut self, a: usize, b: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Model(format!(
                "relatedness entry ({a}, {b}) is not finite"
            )));
        }
        if a == b {
            if value <= 0.0 {
                return Err(Error::Model(format!(
                    "relatedness diagonal entry for {a} must be positive, got {value}"
                )));
            }
            self.diag.insert(a, value);
            return Ok(());
        }
        let key = if a < b { (a, b) } else { (b, a) };
        if let Some(old) = self.off.get(&key) {
            if *old != value {
                return Err(Error::Model(format!(
                    "relatedness entry ({a}, {b}) given twice with different values"
                )));
            }
        }
        if value != 0.0 {
            self.off.insert(key, value);
        }
        Ok(())
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return self.diag.get(&a).copied().unwrap_or(1.0);
        }
        let key = if a < b { (a, b) } else { (b, a) };
        self.off.get(&key).copied().unwrap_or(0.0)
    }

    /// Nonzero off-diagonal entries in key order.
    pub fn off_diagonal(&self) -> Vec<((usize, usize), f64)> {
        let mut v: Vec<_> = self.off.iter().map(|(&k, &x)| (k, x)).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }
}

#[derive(Clone, Debug)]
pub enum TermKind {
    /// Observations sharing a group index share the random effect.
    Grouping { groups: Vec<usize> },
    /// Random effects correlated through `matrix` between the observations'
    /// individual keys.
    Relatedness {
        keys: Vec<usize>,
        matrix: Relatedness,
    },
}

/// One block of the random-effect structure.
#[derive(Clone, Debug)]
pub struct VarianceTerm {
    pub name: String,
    /// Labels of the q random-effect columns, e.g. `["(Intercept)", "z"]`.
    pub effects: Vec<String>,
    pub kind: TermKind,
    /// Row-major n x q random-effect design rows.
    z: Vec<f64>,
}

impl VarianceTerm {
    /// Random intercept (plus optional slopes) by grouping factor.
    pub fn grouping(
        name: impl Into<String>,
        groups: Vec<usize>,
        slopes: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        let n = groups.len();
        Self::build(name.into(), TermKind::Grouping { groups }, n, true, slopes)
    }

    /// Random intercept whose correlation across observations follows `matrix`.
    pub fn relatedness(
        name: impl Into<String>,
        keys: Vec<usize>,
        matrix: Relatedness,
    ) -> Result<Self> {
        let n = keys.len();
        Self::build(
            name.into(),
            TermKind::Relatedness { keys, matrix },
            n,
            true,
            Vec::new(),
        )
    }

    /// General constructor: `intercept` adds a column of ones before `slopes`.
    pub fn build(
        name: String,
        kind: TermKind,
        n: usize,
        intercept: bool,
        slopes: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        let q = usize::from(intercept) + slopes.len();
        if q == 0 {
            return Err(Error::Model(format!(
                "term '{name}' has no random-effect columns"
            )));
        }
        for (label, col) in &slopes {
            if col.len() != n {
                return Err(Error::Model(format!(
                    "term '{name}': slope column '{label}' has {} rows, expected {n}",
                    col.len()
                )));
            }
        }
        let mut effects = Vec::with_capacity(q);
        if intercept {
            effects.push("(Intercept)".to_string());
        }
        effects.extend(slopes.iter().map(|(l, _)| l.clone()));
        let mut z = Vec::with_capacity(n * q);
        for i in 0..n {
            if intercept {
                z.push(1.0);
            }
            for (_, col) in &slopes {
                z.push(col[i]);
            }
        }
        Ok(VarianceTerm {
            name,
            effects,
            kind,
            z,
        })
    }

    pub fn q(&self) -> usize {
        self.effects.len()
    }

    pub fn n_obs(&self) -> usize {
        match &self.kind {
            TermKind::Grouping { groups } => groups.len(),
            TermKind::Relatedness { keys, .. } => keys.len(),
        }
    }

    pub fn z_row(&self, i: usize) -> &[f64] {
        let q = self.q();
        &self.z[i * q..(i + 1) * q]
    }

    /// Basis weight r_g(i, j).
    pub fn relation(&self, i: usize, j: usize) -> f64 {
        match &self.kind {
            TermKind::Grouping { groups } => {
                if groups[i] == groups[j] {
                    1.0
                } else {
                    0.0
                }
            }
            TermKind::Relatedness { keys, matrix } => matrix.get(keys[i], keys[j]),
        }
    }

    /// Structurally nonzero off-diagonal pairs (i < j) contributed by this term.
    fn pairs(&self, out: &mut Vec<(usize, usize)>) {
        match &self.kind {
            TermKind::Grouping { groups } => {
                for members in buckets(groups).values() {
                    push_within(members, out);
                }
            }
            TermKind::Relatedness { keys, matrix } => {
                let by_key = buckets(keys);
                for members in by_key.values() {
                    push_within(members, out);
                }
                for ((a, b), _) in matrix.off_diagonal() {
                    if let (Some(ma), Some(mb)) = (by_key.get(&a), by_key.get(&b)) {
                        for &i in ma {
                            for &j in mb {
                                out.push((i.min(j), i.max(j)));
                            }
                        }
                    }
                }
            }
        }
    }
}

fn buckets(keys: &[usize]) -> HashMap<usize, Vec<usize>> {
    let mut m: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &k) in keys.iter().enumerate() {
        m.entry(k).or_default().push(i);
    }
    m
}

fn push_within(members: &[usize], out: &mut Vec<(usize, usize)>) {
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            out.push((i, j));
        }
    }
}

/// Symmetric 2x2 block `[[a, b], [b, d]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block2 {
    pub a: f64,
    pub b: f64,
    pub d: f64,
}

impl Block2 {
    pub const IDENTITY: Block2 = Block2 {
        a: 1.0,
        b: 0.0,
        d: 1.0,
    };

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.b
    }

    /// Determinant and inverse, or `None` if the block is numerically singular.
    #[inline]
    pub fn det_inv(&self) -> Option<(f64, Block2)> {
        let det = self.det();
        let tol = 1e-12 * self.a.abs().max(self.d.abs()).max(1.0);
        if !(det > tol) {
            return None;
        }
        let s = 1.0 / det;
        Some((
            det,
            Block2 {
                a: self.d * s,
                b: -self.b * s,
                d: self.a * s,
            },
        ))
    }

    /// `u' B v` for 2-vectors.
    #[inline]
    pub fn quad(&self, u: [f64; 2], v: [f64; 2]) -> f64 {
        u[0] * (self.a * v[0] + self.b * v[1]) + u[1] * (self.b * v[0] + self.d * v[1])
    }
}

/// Determinants and inverses of a batch of blocks. On failure returns the
/// index of the first singular block.
pub fn det2_inv2(blocks: &[Block2]) -> std::result::Result<Vec<(f64, Block2)>, usize> {
    let mut out = Vec::with_capacity(blocks.len());
    for (k, b) in blocks.iter().enumerate() {
        match b.det_inv() {
            Some(v) => out.push(v),
            None => return Err(k),
        }
    }
    Ok(out)
}

/// Which lower-triangular entry of which `L_g` a `nu` coordinate sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NuSlot {
    pub term: usize,
    pub row: usize,
    pub col: usize,
}

impl NuSlot {
    pub fn is_diagonal(&self) -> bool {
        self.row == self.col
    }
}

/// Full parameter vector (beta, sigma^2, nu).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub nu: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RandomStructure {
    terms: Vec<VarianceTerm>,
    layout: Vec<NuSlot>,
    /// Offset of each term's vec(V_g) in the flat coefficient vector.
    coef_offsets: Vec<usize>,
    n_obs: usize,
}

impl RandomStructure {
    pub fn new(terms: Vec<VarianceTerm>) -> Result<Self> {
        let n_obs = terms.first().map(|t| t.n_obs()).unwrap_or(0);
        Self::with_n_obs(terms, n_obs)
    }

    /// Structure with no random terms over `n_obs` observations.
    pub fn independent(n_obs: usize) -> Self {
        RandomStructure {
            terms: Vec::new(),
            layout: Vec::new(),
            coef_offsets: Vec::new(),
            n_obs,
        }
    }

    pub fn with_n_obs(terms: Vec<VarianceTerm>, n_obs: usize) -> Result<Self> {
        let mut layout = Vec::new();
        let mut coef_offsets = Vec::new();
        let mut off = 0;
        for (g, t) in terms.iter().enumerate() {
            if t.n_obs() != n_obs {
                return Err(Error::Model(format!(
                    "term '{}' covers {} observations, expected {n_obs}",
                    t.name,
                    t.n_obs()
                )));
            }
            if let TermKind::Relatedness { keys: _, matrix } = &t.kind {
                if matrix.diag.values().any(|&v| v <= 0.0) {
                    return Err(Error::Model(format!(
                        "term '{}': nonpositive relatedness diagonal",
                        t.name
                    )));
                }
            }
            let q = t.q();
            for row in 0..q {
                for col in 0..=row {
                    layout.push(NuSlot { term: g, row, col });
                }
            }
            coef_offsets.push(off);
            off += q * q;
        }
        let s = RandomStructure {
            terms,
            layout,
            coef_offsets,
            n_obs,
        };
        s.check_layout()?;
        Ok(s)
    }

    /// Each nu coordinate must feed exactly one Cholesky entry.
    fn check_layout(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for slot in &self.layout {
            if !seen.insert(*slot) {
                return Err(Error::Model(format!(
                    "variance parameter layout ties two parameters to L[{}][{}] of term {}",
                    slot.row, slot.col, slot.term
                )));
            }
        }
        Ok(())
    }

    pub fn terms(&self) -> &[VarianceTerm] {
        &self.terms
    }

    pub fn layout(&self) -> &[NuSlot] {
        &self.layout
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn nu_len(&self) -> usize {
        self.layout.len()
    }

    pub fn coef_len(&self) -> usize {
        self.terms.iter().map(|t| t.q() * t.q()).sum()
    }

    /// Lower bounds: 0 for Cholesky diagonals, unbounded otherwise.
    pub fn nu_lower_bounds(&self) -> Vec<f64> {
        self.layout
            .iter()
            .map(|s| {
                if s.is_diagonal() {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }

    /// Cholesky factors L_g (row-major q x q) for each term.
    pub fn cholesky_factors(&self, nu: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(nu.len(), self.nu_len(), "nu has wrong length");
        let mut ls: Vec<Vec<f64>> = self
            .terms
            .iter()
            .map(|t| vec![0.0; t.q() * t.q()])
            .collect();
        for (slot, &v) in self.layout.iter().zip(nu) {
            let q = self.terms[slot.term].q();
            ls[slot.term][slot.row * q + slot.col] = v;
        }
        ls
    }

    /// Coefficient blocks V_g = L_g L_g' (row-major), one per term.
    pub fn coefficient_blocks(&self, nu: &[f64]) -> Vec<Vec<f64>> {
        self.cholesky_factors(nu)
            .into_iter()
            .zip(&self.terms)
            .map(|(l, t)| {
                let q = t.q();
                let mut v = vec![0.0; q * q];
                for r in 0..q {
                    for c in 0..q {
                        let mut s = 0.0;
                        for k in 0..=r.min(c) {
                            s += l[r * q + k] * l[c * q + k];
                        }
                        v[r * q + c] = s;
                    }
                }
                v
            })
            .collect()
    }

    /// All V_g concatenated; pairs with [`RandomStructure::basis`].
    pub fn coefficients(&self, nu: &[f64]) -> Vec<f64> {
        self.coefficient_blocks(nu).concat()
    }

    /// Writes r_g(i,j) * z_i z_j' for every term so that
    /// `Xi_ij = [i == j] + coefficients . basis`.
    pub fn basis(&self, i: usize, j: usize, out: &mut [f64]) {
        for (t, &off) in self.terms.iter().zip(&self.coef_offsets) {
            let q = t.q();
            let r = t.relation(i, j);
            let (zi, zj) = (t.z_row(i), t.z_row(j));
            for a in 0..q {
                for b in 0..q {
                    out[off + a * q + b] = r * zi[a] * zj[b];
                }
            }
        }
    }

    pub fn xi_entry(&self, nu: &[f64], i: usize, j: usize) -> f64 {
        let vs = self.coefficient_blocks(nu);
        self.xi_entry_with(&vs, i, j)
    }

    fn xi_entry_with(&self, vs: &[Vec<f64>], i: usize, j: usize) -> f64 {
        let mut x = if i == j { 1.0 } else { 0.0 };
        for (t, v) in self.terms.iter().zip(vs) {
            let r = t.relation(i, j);
            if r == 0.0 {
                continue;
            }
            let q = t.q();
            let (zi, zj) = (t.z_row(i), t.z_row(j));
            let mut s = 0.0;
            for a in 0..q {
                for b in 0..q {
                    s += zi[a] * v[a * q + b] * zj[b];
                }
            }
            x += r * s;
        }
        x
    }

    pub fn xi_block(&self, nu: &[f64], i: usize, j: usize) -> Block2 {
        let vs = self.coefficient_blocks(nu);
        Block2 {
            a: self.xi_entry_with(&vs, i, i),
            b: self.xi_entry_with(&vs, i, j),
            d: self.xi_entry_with(&vs, j, j),
        }
    }

    /// Union over terms of structurally correlated pairs, sorted, i < j.
    pub fn correlated_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for t in &self.terms {
            t.pairs(&mut out);
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Random-effect standard deviations relative to sigma (sqrt of diag V_g),
    /// labelled `term:effect`.
    pub fn relative_sds(&self, nu: &[f64]) -> Vec<(String, f64)> {
        let vs = self.coefficient_blocks(nu);
        let mut out = Vec::new();
        for (t, v) in self.terms.iter().zip(&vs) {
            let q = t.q();
            for (a, eff) in t.effects.iter().enumerate() {
                out.push((format!("{}:{}", t.name, eff), v[a * q + a].max(0.0).sqrt()));
            }
        }
        out
    }
}

/// Named structures used in the worked examples and simulations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    TwinE,
    TwinAE,
    TwinADE,
    HerdKinship,
    InterceptByGroup,
    InterceptSlopeByGroup,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Preset::TwinE => "twin-E",
            Preset::TwinAE => "twin-AE",
            Preset::TwinADE => "twin-ADE",
            Preset::HerdKinship => "herd-kinship",
            Preset::InterceptByGroup => "intercept-by-group",
            Preset::InterceptSlopeByGroup => "intercept-slope-by-group",
        };
        f.write_str(s)
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "twin-E" => Preset::TwinE,
            "twin-AE" => Preset::TwinAE,
            "twin-ADE" => Preset::TwinADE,
            "herd-kinship" => Preset::HerdKinship,
            "intercept-by-group" => Preset::InterceptByGroup,
            "intercept-slope-by-group" => Preset::InterceptSlopeByGroup,
            other => return Err(Error::Model(format!("unknown preset '{other}'"))),
        })
    }
}

/// Per-observation inputs for [`preset`]. Each preset reads only what it needs.
#[derive(Clone, Debug, Default)]
pub struct PresetInputs {
    /// Twin pair (or generic group) index per observation.
    pub groups: Option<Vec<usize>>,
    /// Monozygotic flag per observation (twin presets).
    pub monozygotic: Option<Vec<bool>>,
    /// Individual key per observation and its relatedness matrix (herd-kinship).
    pub individuals: Option<Vec<usize>>,
    pub kinship: Option<Relatedness>,
    /// Random-slope covariate (intercept-slope-by-group).
    pub slope: Option<(String, Vec<f64>)>,
}

/// Within-pair relatedness over observation indices: `mz_weight` for
/// monozygotic pairs, `dz_weight` otherwise.
pub fn twin_relatedness(
    pairs: &[usize],
    monozygotic: &[bool],
    mz_weight: f64,
    dz_weight: f64,
) -> Result<Relatedness> {
    let mut r = Relatedness::new();
    for members in buckets(pairs).values() {
        if members.len() > 2 {
            return Err(Error::Model(format!(
                "twin pair has {} members",
                members.len()
            )));
        }
        if members.len() == 2 {
            let (i, j) = (members[0], members[1]);
            if monozygotic[i] != monozygotic[j] {
                return Err(Error::Model(format!(
                    "twin pair ({i}, {j}) has mixed zygosity"
                )));
            }
            let w = if monozygotic[i] { mz_weight } else { dz_weight };
            r.insert(i, j, w)?;
        }
    }
    Ok(r)
}

pub fn preset(name: Preset, inputs: &PresetInputs) -> Result<RandomStructure> {
    let need = |what: &str| Error::Model(format!("preset {name} needs {what}"));
    let groups = || inputs.groups.clone().ok_or_else(|| need("group indices"));
    match name {
        Preset::TwinE => {
            RandomStructure::new(vec![VarianceTerm::grouping("pair", groups()?, Vec::new())?])
        }
        Preset::TwinAE | Preset::TwinADE => {
            let g = groups()?;
            let mz = inputs
                .monozygotic
                .as_ref()
                .ok_or_else(|| need("zygosity"))?;
            let keys: Vec<usize> = (0..g.len()).collect();
            let mut terms = vec![
                VarianceTerm::grouping("pair", g.clone(), Vec::new())?,
                VarianceTerm::relatedness(
                    "additive",
                    keys.clone(),
                    twin_relatedness(&g, mz, 1.0, 0.5)?,
                )?,
            ];
            if name == Preset::TwinADE {
                terms.push(VarianceTerm::relatedness(
                    "dominant",
                    keys,
                    twin_relatedness(&g, mz, 1.0, 0.25)?,
                )?);
            }
            RandomStructure::new(terms)
        }
        Preset::HerdKinship => {
            let herd = groups()?;
            let ind = inputs
                .individuals
                .clone()
                .ok_or_else(|| need("individual keys"))?;
            let kin = inputs
                .kinship
                .clone()
                .ok_or_else(|| need("a kinship matrix"))?;
            RandomStructure::new(vec![
                VarianceTerm::grouping("herd", herd, Vec::new())?,
                VarianceTerm::relatedness("genetic", ind, kin)?,
            ])
        }
        Preset::InterceptByGroup => RandomStructure::new(vec![VarianceTerm::grouping(
            "group",
            groups()?,
            Vec::new(),
        )?]),
        Preset::InterceptSlopeByGroup => {
            let slope = inputs.slope.clone().ok_or_else(|| need("a slope column"))?;
            RandomStructure::new(vec![VarianceTerm::grouping(
                "group",
                groups()?,
                vec![slope],
            )?])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept(groups: Vec<usize>) -> RandomStructure {
        RandomStructure::new(vec![
            VarianceTerm::grouping("g", groups, Vec::new()).unwrap()
        ])
        .unwrap()
    }

    #[test]
    fn zero_nu_is_identity() {
        let s = intercept(vec![0, 0, 1]);
        assert_eq!(s.xi_entry(&[0.0], 0, 0), 1.0);
        assert_eq!(s.xi_entry(&[0.0], 0, 1), 0.0);
    }

    #[test]
    fn random_intercept_entries() {
        let s = intercept(vec![0, 0, 1]);
        let tau = 1.7;
        assert!((s.xi_entry(&[tau], 0, 1) - tau * tau).abs() < 1e-14);
        assert!((s.xi_entry(&[tau], 1, 1) - (1.0 + tau * tau)).abs() < 1e-14);
        assert_eq!(s.xi_entry(&[tau], 0, 2), 0.0);
    }

    #[test]
    fn dizygotic_additive_weight() {
        let s = preset(
            Preset::TwinAE,
            &PresetInputs {
                groups: Some(vec![0, 0]),
                monozygotic: Some(vec![false, false]),
                ..Default::default()
            },
        )
        .unwrap();
        let tau_a = 0.8;
        // pair term off, additive on
        assert!((s.xi_entry(&[0.0, tau_a], 0, 1) - 0.5 * tau_a * tau_a).abs() < 1e-14);
        assert!((s.xi_entry(&[0.0, tau_a], 0, 0) - (1.0 + tau_a * tau_a)).abs() < 1e-14);
    }

    #[test]
    fn twin_environment_block() {
        let s = preset(
            Preset::TwinE,
            &PresetInputs {
                groups: Some(vec![0, 0, 1]),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(
            s.xi_block(&[2.0], 0, 1),
            Block2 {
                a: 5.0,
                b: 4.0,
                d: 5.0
            }
        );
        assert_eq!(s.xi_block(&[2.0], 0, 2).b, 0.0);
        assert_eq!(s.nu_len(), 1);
    }

    #[test]
    fn det_inv_examples() {
        let (d, inv) = Block2::IDENTITY.det_inv().unwrap();
        assert_eq!((d, inv), (1.0, Block2::IDENTITY));
        let (d, inv) = Block2 {
            a: 2.0,
            b: 1.0,
            d: 2.0,
        }
        .det_inv()
        .unwrap();
        assert!((d - 3.0).abs() < 1e-15);
        assert!((inv.a - 2.0 / 3.0).abs() < 1e-15 && (inv.b + 1.0 / 3.0).abs() < 1e-15);
        let out = det2_inv2(&[Block2 {
            a: 5.0,
            b: 4.0,
            d: 5.0,
        }])
        .unwrap();
        assert!((out[0].0 - 9.0).abs() < 1e-14);
        assert!((out[0].1.a - 5.0 / 9.0).abs() < 1e-15 && (out[0].1.b + 4.0 / 9.0).abs() < 1e-15);
        let bad = [
            Block2::IDENTITY,
            Block2 {
                a: 1.0,
                b: 1.0,
                d: 1.0,
            },
        ];
        assert_eq!(det2_inv2(&bad).unwrap_err(), 1);
    }

    #[test]
    fn ade_preset_shape() {
        let inputs = PresetInputs {
            groups: Some(vec![0, 0, 1, 1]),
            monozygotic: Some(vec![true, true, false, false]),
            ..Default::default()
        };
        let s = preset(Preset::TwinADE, &inputs).unwrap();
        assert_eq!(s.terms().len(), 3);
        assert_eq!(s.terms()[2].relation(2, 3), 0.25);
        assert_eq!(s.terms()[2].relation(0, 1), 1.0);
        assert_eq!(s.terms()[1].relation(2, 3), 0.5);
    }

    #[test]
    fn slope_preset_layout() {
        let inputs = PresetInputs {
            groups: Some(vec![0, 0, 1]),
            slope: Some(("z".into(), vec![0.5, -1.0, 2.0])),
            ..Default::default()
        };
        let s = preset(Preset::InterceptSlopeByGroup, &inputs).unwrap();
        assert_eq!(s.terms()[0].q(), 2);
        assert_eq!(s.nu_len(), 3);
        assert_eq!(s.nu_lower_bounds()[1], f64::NEG_INFINITY);
        // L = [[1,0],[0.5,2]] -> V = [[1,0.5],[0.5,4.25]]
        let nu = [1.0, 0.5, 2.0];
        let v = &s.coefficient_blocks(&nu)[0];
        assert_eq!(v, &vec![1.0, 0.5, 0.5, 4.25]);
        // z_0 = (1, 0.5), z_1 = (1, -1): z0' V z1
        let expect = 1.0 * (1.0 * 1.0 + 0.5 * -1.0) + 0.5 * (0.5 * 1.0 + 4.25 * -1.0);
        assert!((s.xi_entry(&nu, 0, 1) - expect).abs() < 1e-14);
    }

    #[test]
    fn unknown_preset() {
        assert!("twin-X".parse::<Preset>().is_err());
        assert_eq!(
            "herd-kinship".parse::<Preset>().unwrap(),
            Preset::HerdKinship
        );
    }

    #[test]
    fn pair_union_dedups() {
        let mut kin = Relatedness::new();
        kin.insert(0, 1, 0.5).unwrap();
        kin.insert(2, 3, 0.25).unwrap();
        let s = RandomStructure::new(vec![
            VarianceTerm::grouping("g", vec![0, 0, 1, 2], Vec::new()).unwrap(),
            VarianceTerm::relatedness("k", vec![0, 1, 2, 3], kin).unwrap(),
        ])
        .unwrap();
        assert_eq!(s.correlated_pairs(), vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn basis_reproduces_entries() {
        let inputs = PresetInputs {
            groups: Some(vec![0, 0, 1]),
            slope: Some(("z".into(), vec![0.3, 1.5, -0.7])),
            ..Default::default()
        };
        let s = preset(Preset::InterceptSlopeByGroup, &inputs).unwrap();
        let nu = [0.7, -0.4, 1.1];
        let c = s.coefficients(&nu);
        let mut b = vec![0.0; s.coef_len()];
        for (i, j) in [(0, 0), (0, 1), (1, 2)] {
            s.basis(i, j, &mut b);
            let v: f64 =
                c.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
            assert!((v - s.xi_entry(&nu, i, j)).abs() < 1e-14);
        }
    }
}

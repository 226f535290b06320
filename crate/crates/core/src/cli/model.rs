//! Turns a table, a formula and design flags into model inputs.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::formula::{Formula, Grouping};
use super::table::{intern, Table};
use crate::data::ModelData;
use crate::design::{ElementPath, StageDraw, StageUnit, SurveyDesign};
use crate::error::{Error, Result, ResultExt};
use crate::varstruct::{RandomStructure, Relatedness, TermKind, VarianceTerm};

/// A per-row value: a column name or a constant.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Column(String),
    Value(f64),
}

impl Source {
    fn parse(s: &str) -> Source {
        match s.parse::<f64>() {
            Ok(v) => Source::Value(v),
            Err(_) => Source::Column(s.to_string()),
        }
    }

    fn column(&self) -> Option<&str> {
        match self {
            Source::Column(c) => Some(c),
            Source::Value(_) => None,
        }
    }

    fn values(&self, table: &Table, rows: &[usize]) -> Result<Vec<f64>> {
        match self {
            Source::Column(c) => table.numeric(c, rows),
            Source::Value(v) => Ok(vec![*v; rows.len()]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageMethod {
    Srs,
    Bernoulli,
    Pps,
}

/// One sampling stage: `UNIT:srs:N_SAMPLED:N_POP`, `UNIT:bernoulli:PROB` or
/// `UNIT:pps:PROB`, where counts and probabilities are columns or constants.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub unit: String,
    pub method: StageMethod,
    pub sources: Vec<Source>,
}

impl FromStr for StageSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let bad = || {
            Error::Design(format!(
                "stage '{s}' should be UNIT:srs:N_SAMPLED:N_POP, UNIT:bernoulli:PROB or UNIT:pps:PROB"
            ))
        };
        if parts.len() < 3 || parts[0].is_empty() || parts.iter().any(|p| p.is_empty()) {
            return Err(bad());
        }
        let (method, arity) = match parts[1] {
            "srs" => (StageMethod::Srs, 2),
            "bernoulli" => (StageMethod::Bernoulli, 1),
            "pps" => (StageMethod::Pps, 1),
            _ => return Err(bad()),
        };
        if parts.len() != 2 + arity {
            return Err(bad());
        }
        Ok(StageSpec {
            unit: parts[0].to_string(),
            method,
            sources: parts[2..].iter().map(|p| Source::parse(p)).collect(),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct DesignSpec {
    pub strata: Option<String>,
    pub stages: Vec<StageSpec>,
    /// Triplet file `id_i,id_j,pi_ij` keyed by `id`.
    pub pair_probs: Option<PathBuf>,
    pub id: Option<String>,
}

impl DesignSpec {
    fn columns(&self) -> Vec<String> {
        let mut v: Vec<String> = self.strata.iter().cloned().collect();
        for st in &self.stages {
            v.push(st.unit.clone());
            v.extend(
                st.sources
                    .iter()
                    .filter_map(|s| s.column().map(String::from)),
            );
        }
        v.extend(self.id.iter().cloned());
        v
    }
}

/// Everything needed to fit, plus the row bookkeeping.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: ModelData,
    pub structure: RandomStructure,
    pub design: SurveyDesign,
    pub rows_read: usize,
    /// Rows dropped for a missing value, by the first offending column.
    pub rows_rejected: BTreeMap<String, usize>,
    /// Element label (the id column, else the 1-based source line).
    pub labels: Vec<String>,
}

pub fn prepare(
    table: &Table,
    formula: &Formula,
    design: &DesignSpec,
    kin_id: &str,
    base: &Path,
) -> Result<Prepared> {
    let mut cols = vec![formula.response.clone()];
    cols.extend(formula.fixed.iter().cloned());
    let mut uses_kin = false;
    for t in &formula.random {
        cols.extend(t.slopes.iter().cloned());
        match &t.grouping {
            Grouping::Column(g) => cols.push(g.clone()),
            Grouping::Kinship(_) => uses_kin = true,
        }
    }
    if uses_kin {
        cols.push(kin_id.to_string());
    }
    cols.extend(design.columns());
    let mut unique = Vec::new();
    for c in cols {
        if !unique.contains(&c) {
            unique.push(c);
        }
    }
    let (rows, rows_rejected) = table.complete_rows(&unique)?;
    for (col, n) in &rows_rejected {
        log::warn!("{n} rows rejected for a missing value in '{col}'");
    }
    if rows.is_empty() {
        return Err(Error::Data("no complete rows remain".into()));
    }

    let y = table.numeric(&formula.response, &rows)?;
    let fixed = formula
        .fixed
        .iter()
        .map(|c| Ok((c.clone(), table.numeric(c, &rows)?)))
        .collect::<Result<Vec<_>>>()?;
    let data =
        ModelData::from_columns(y, formula.intercept, fixed).context("fixed-effect design")?;

    let mut terms = Vec::new();
    for t in &formula.random {
        let term = match &t.grouping {
            Grouping::Column(g) => {
                let (groups, _) = intern(&table.text(g, &rows)?);
                let slopes = t
                    .slopes
                    .iter()
                    .map(|s| Ok((s.clone(), table.numeric(s, &rows)?)))
                    .collect::<Result<Vec<_>>>()?;
                let n = groups.len();
                VarianceTerm::build(
                    g.clone(),
                    TermKind::Grouping { groups },
                    n,
                    t.intercept,
                    slopes,
                )?
            }
            Grouping::Kinship(file) => {
                let path = base.join(file);
                let ids = table.text(kin_id, &rows)?;
                let (keys, matrix) = read_kinship(&path, &ids)
                    .context(format!("kinship file {}", path.display()))?;
                let name = Path::new(file)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "kin".into());
                VarianceTerm::relatedness(name, keys, matrix)?
            }
        };
        terms.push(term);
    }
    let structure = if terms.is_empty() {
        RandomStructure::independent(rows.len())
    } else {
        RandomStructure::new(terms)?
    };

    let labels = match &design.id {
        Some(id) => table.text(id, &rows)?,
        None => rows.iter().map(|&r| table.line(r).to_string()).collect(),
    };
    let survey = build_design(table, &rows, design, &labels).context("survey design")?;

    Ok(Prepared {
        data,
        structure,
        design: survey,
        rows_read: table.len(),
        rows_rejected,
        labels,
    })
}

/// The design alone, over rows complete in the design columns.
pub fn design_only(table: &Table, spec: &DesignSpec) -> Result<(SurveyDesign, Vec<String>)> {
    let (rows, rejected) = table.complete_rows(&spec.columns())?;
    for (col, n) in &rejected {
        log::warn!("{n} rows rejected for a missing value in '{col}'");
    }
    if rows.is_empty() {
        return Err(Error::Data("no complete rows remain".into()));
    }
    let labels: Vec<String> = match &spec.id {
        Some(id) => table.text(id, &rows)?,
        None => rows.iter().map(|&r| table.line(r).to_string()).collect(),
    };
    let design = build_design(table, &rows, spec, &labels).context("survey design")?;
    Ok((design, labels))
}

fn build_design(
    table: &Table,
    rows: &[usize],
    spec: &DesignSpec,
    labels: &[String],
) -> Result<SurveyDesign> {
    let n = rows.len();
    if spec.stages.is_empty() {
        if spec.strata.is_some() || spec.pair_probs.is_some() {
            return Err(Error::Design(
                "strata and pair probabilities need at least one --stage".into(),
            ));
        }
        return SurveyDesign::census(n);
    }
    let (strata, strata_names) = match &spec.strata {
        Some(c) => intern(&table.text(c, rows)?),
        None => (vec![0; n], vec!["all".to_string()]),
    };
    let mut paths: Vec<Vec<StageUnit>> = vec![Vec::new(); n];
    for (s, st) in spec.stages.iter().enumerate() {
        let (units, _) = intern(&table.text(&st.unit, rows)?);
        let vals: Vec<Vec<f64>> = st
            .sources
            .iter()
            .map(|src| src.values(table, rows))
            .collect::<Result<_>>()?;
        for (i, path) in paths.iter_mut().enumerate() {
            let at = || format!("line {}, stage {}", table.line(rows[i]), s + 1);
            let draw = match st.method {
                StageMethod::Srs => {
                    let count = |v: f64, what: &str| -> Result<usize> {
                        if v >= 1.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(Error::Design(format!(
                                "{}: {what} {v} is not a positive integer",
                                at()
                            )))
                        }
                    };
                    StageDraw::Srs {
                        sampled: count(vals[0][i], "sample count")?,
                        population: count(vals[1][i], "population count")?,
                    }
                }
                StageMethod::Bernoulli => StageDraw::Bernoulli { prob: vals[0][i] },
                StageMethod::Pps => StageDraw::Pps { prob: vals[0][i] },
            };
            draw.validate().map_err(|e| e.context(at()))?;
            path.push(StageUnit {
                unit: units[i],
                draw,
            });
        }
    }
    // Final census stage inside the last unit so every element has its own path.
    let mut within: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
    for (i, path) in paths.iter().enumerate() {
        let key = (strata[i], path.iter().map(|u| u.unit).collect());
        *within.entry(key).or_insert(0) += 1;
    }
    let elements = paths
        .into_iter()
        .enumerate()
        .map(|(i, mut path)| {
            let key = (strata[i], path.iter().map(|u| u.unit).collect::<Vec<_>>());
            let m = within[&key];
            path.push(StageUnit {
                unit: i,
                draw: StageDraw::Srs {
                    sampled: m,
                    population: m,
                },
            });
            ElementPath::new(strata[i], path)
        })
        .collect();
    let design = SurveyDesign::multistage_named(strata_names, elements)?;
    match &spec.pair_probs {
        None => Ok(design),
        Some(path) => {
            if spec.id.is_none() {
                return Err(Error::Design(
                    "--pair-probs needs --id to match rows".into(),
                ));
            }
            let table = read_pair_probs(path, labels)?;
            design.with_supplied_pairs(table)
        }
    }
}

/// `(i, j, pi_ij)` triplets with ids mapped to element indices. Rows naming
/// ids outside the retained data are skipped.
fn read_pair_probs(path: &Path, labels: &[String]) -> Result<Vec<(usize, usize, f64)>> {
    let t = Table::read(path)?;
    if t.headers().len() != 3 {
        return Err(Error::Data(format!(
            "{}: expected 3 columns (id_i, id_j, pi_ij), found {}",
            path.display(),
            t.headers().len()
        )));
    }
    let index: HashMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(k, l)| (l.as_str(), k))
        .collect();
    if index.len() != labels.len() {
        return Err(Error::Data("id column has duplicate values".into()));
    }
    let all: Vec<usize> = (0..t.len()).collect();
    let h = t.headers().to_vec();
    let a = t.text(&h[0], &all)?;
    let b = t.text(&h[1], &all)?;
    let p = t.numeric(&h[2], &all)?;
    let mut out = Vec::new();
    let mut skipped = 0;
    for k in 0..t.len() {
        match (index.get(a[k].as_str()), index.get(b[k].as_str())) {
            (Some(&i), Some(&j)) => out.push((i, j, p[k])),
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} pair-probability rows name ids outside the data and were skipped");
    }
    Ok(out)
}

/// Reads `id_a,id_b,value` triplets; observation keys index the sorted
/// distinct ids of the data.
fn read_kinship(path: &Path, ids: &[String]) -> Result<(Vec<usize>, Relatedness)> {
    let mut distinct: Vec<&String> = ids.iter().collect();
    distinct.sort();
    distinct.dedup();
    let index: HashMap<&str, usize> = distinct
        .iter()
        .enumerate()
        .map(|(k, s)| (s.as_str(), k))
        .collect();
    let keys = ids.iter().map(|s| index[s.as_str()]).collect();
    let t = Table::read(path)?;
    if t.headers().len() != 3 {
        return Err(Error::Data(format!(
            "expected 3 columns (id_a, id_b, value), found {}",
            t.headers().len()
        )));
    }
    let all: Vec<usize> = (0..t.len()).collect();
    let h = t.headers().to_vec();
    let a = t.text(&h[0], &all)?;
    let b = t.text(&h[1], &all)?;
    let v = t.numeric(&h[2], &all)?;
    let mut m = Relatedness::new();
    for k in 0..t.len() {
        if let (Some(&i), Some(&j)) = (index.get(a[k].as_str()), index.get(b[k].as_str())) {
            m.insert(i, j, v[k])
                .map_err(|e| e.context(format!("line {}", t.line(k))))?;
        }
    }
    Ok((keys, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::formula::parse_formula;

    fn table(text: &str) -> Table {
        Table::from_reader(text.as_bytes()).unwrap()
    }

    #[test]
    fn stage_specs_parse() {
        let s: StageSpec = "psu:srs:n:40".parse().unwrap();
        assert_eq!(s.method, StageMethod::Srs);
        assert_eq!(
            s.sources,
            vec![Source::Column("n".into()), Source::Value(40.0)]
        );
        assert!("psu:pps:p".parse::<StageSpec>().is_ok());
        assert!("psu:srs:n".parse::<StageSpec>().is_err());
        assert!("psu:tille:p".parse::<StageSpec>().is_err());
        assert!("psu:bernoulli:".parse::<StageSpec>().is_err());
    }

    #[test]
    fn two_stage_probabilities() {
        let t = table("y,st,psu,n1,N1\n1,a,1,2,4\n2,a,1,2,4\n3,a,2,2,4\n4,b,3,1,2\n");
        let f = parse_formula("y ~ 1").unwrap();
        let spec = DesignSpec {
            strata: Some("st".into()),
            stages: vec![
                "psu:srs:n1:N1".parse().unwrap(),
                "y:srs:2:2".parse().unwrap(),
            ],
            ..Default::default()
        };
        let p = prepare(&t, &f, &spec, "id", Path::new(".")).unwrap();
        assert_eq!(p.design.unit_probs(), &[0.5, 0.5, 0.5, 0.5]);
        // same PSU, both second-stage units taken: joint = pi_psu
        assert!((p.design.pair_prob(0, 1).unwrap() - 0.5).abs() < 1e-15);
        assert!((p.design.pair_prob(0, 2).unwrap() - 2.0 / 4.0 * 1.0 / 3.0).abs() < 1e-15);
        assert!((p.design.pair_prob(0, 3).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn elements_sharing_a_psu_get_a_census_stage() {
        let t = table("y,psu\n1,1\n2,1\n3,2\n");
        let f = parse_formula("y ~ 1").unwrap();
        let spec = DesignSpec {
            stages: vec!["psu:srs:2:10".parse().unwrap()],
            ..Default::default()
        };
        let p = prepare(&t, &f, &spec, "id", Path::new(".")).unwrap();
        assert!((p.design.pair_prob(0, 1).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn missing_values_are_rejected_and_counted() {
        let t = table("y,x,g\n1,1,a\nNA,2,a\n3,,b\n4,4,b\n5,5,c\n");
        let f = parse_formula("y ~ x + (1|g)").unwrap();
        let p = prepare(&t, &f, &DesignSpec::default(), "id", Path::new(".")).unwrap();
        assert_eq!(p.data.n(), 3);
        assert_eq!(p.rows_read, 5);
        assert_eq!(p.rows_rejected.values().sum::<usize>(), 2);
        assert_eq!(p.labels, vec!["2", "5", "6"]);
    }

    #[test]
    fn bad_probability_names_the_line() {
        let t = table("y,psu,p\n1,1,0.5\n2,2,1.5\n");
        let f = parse_formula("y ~ 1").unwrap();
        let spec = DesignSpec {
            stages: vec!["psu:bernoulli:p".parse().unwrap()],
            ..Default::default()
        };
        let e = prepare(&t, &f, &spec, "id", Path::new("."))
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 3"), "{e}");
    }

    #[test]
    fn kinship_and_pair_files() {
        let dir = std::env::temp_dir().join(format!("pairlmm-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("phi.csv"), "a,b,value\nA,B,0.5\nA,Z,0.5\n").unwrap();
        std::fs::write(dir.join("pp.csv"), "i,j,p\nA,B,0.2\n").unwrap();
        let t = table("y,id,pair,p\n1,A,1,0.5\n2,B,1,0.5\n3,C,2,0.5\n");
        let f = parse_formula("y ~ (1|pair) + (1|kin:phi.csv)").unwrap();
        let spec = DesignSpec {
            stages: vec!["pair:bernoulli:p".parse().unwrap()],
            pair_probs: Some(dir.join("pp.csv")),
            id: Some("id".into()),
            ..Default::default()
        };
        let p = prepare(&t, &f, &spec, "id", &dir).unwrap();
        assert_eq!(p.structure.terms()[1].name, "phi");
        assert_eq!(p.structure.xi_entry(&[0.0, 1.0], 0, 1), 0.5);
        assert_eq!(p.structure.xi_entry(&[0.0, 1.0], 0, 2), 0.0);
        assert_eq!(p.design.pair_prob(0, 1).unwrap(), 0.2);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}

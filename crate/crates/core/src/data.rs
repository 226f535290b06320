//! Response and fixed-effect design held in row-major order.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelData {
    y: Vec<f64>,
    x: Vec<f64>,
    p: usize,
    columns: Vec<String>,
}

impl ModelData {
    /// `x` is row-major with one row per element of `y`.
    pub fn new(y: Vec<f64>, x: Vec<f64>, columns: Vec<String>) -> Result<Self> {
        let p = columns.len();
        if x.len() != y.len() * p {
            return Err(Error::Data(format!(
                "design has {} entries, expected {} rows x {p} columns",
                x.len(),
                y.len()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("response is not finite in row {i}")));
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "column '{}' is not finite in row {}",
                columns[k % p.max(1)],
                k / p.max(1)
            )));
        }
        Ok(ModelData { y, x, p, columns })
    }

    /// Build from named columns; `intercept` prepends a column of ones.
    pub fn from_columns(
        y: Vec<f64>,
        intercept: bool,
        cols: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        let n = y.len();
        let mut names = Vec::new();
        if intercept {
            names.push("(Intercept)".to_string());
        }
        for (name, c) in &cols {
            if c.len() != n {
                return Err(Error::Data(format!(
                    "column '{name}' has {} rows, expected {n}",
                    c.len()
                )));
            }
            names.push(name.clone());
        }
        let mut x = Vec::with_capacity(n * names.len());
        for i in 0..n {
            if intercept {
                x.push(1.0);
            }
            for (_, c) in &cols {
                x.push(c[i]);
            }
        }
        Self::new(y, x, names)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    /// Copy with the response replaced.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(y, self.x.clone(), self.columns.clone())
    }

    /// Fails naming the first column that is (numerically) a linear
    /// combination of the earlier ones, over the rows in `rows`.
    pub fn check_rank(&self, rows: impl Iterator<Item = usize> + Clone) -> Result<()> {
        // Modified Gram-Schmidt on the columns.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for k in 0..self.p {
            let mut v: Vec<f64> = rows.clone().map(|i| self.x[i * self.p + k]).collect();
            let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                v.iter_mut().zip(b).for_each(|(a, c)| *a -= dot * c);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm0 == 0.0 || norm <= 1e-10 * norm0 {
                return Err(Error::RankDeficient {
                    column: self.columns[k].clone(),
                });
            }
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
        Ok(())
    }
}

//! Strict CSV ingestion for observed panels.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scm::Panel;

/// Maps CSV columns onto the outcome, covariate and treatment roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub target: String,
    pub covariates: Vec<String>,
    pub treatments: Vec<String>,
    pub time: String,
    /// Informational only.
    #[serde(default)]
    pub frequency: Option<String>,
}

impl DatasetManifest {
    pub fn from_json_file(path: &Path) -> Result<DatasetManifest> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.covariates.is_empty() {
            return Err(Error::config("covariates", "at least one column is required"));
        }
        if self.treatments.is_empty() {
            return Err(Error::config("treatments", "at least one column is required"));
        }
        if self.covariates.contains(&self.target) || self.treatments.contains(&self.target) {
            return Err(Error::config(
                "target",
                format!("`{}` cannot also be a covariate or treatment", self.target),
            ));
        }
        if self.covariates.contains(&self.time) || self.treatments.contains(&self.time) || self.time == self.target {
            return Err(Error::config("time", format!("`{}` cannot also be a data column", self.time)));
        }
        Ok(())
    }

    /// Covariates and treatments name some of the same columns, so the
    /// covariates are read as the previous row's values.
    pub fn shares_columns(&self) -> bool {
        self.covariates.iter().any(|c| self.treatments.contains(c))
    }
}

/// Reads the manifest's file into a panel without a ground-truth
/// confounder. Rows stay in file order; blank, non-numeric and non-finite
/// cells are rejected. Row numbers in errors count data rows from 1.
///
/// When covariate and treatment columns overlap, row `t` of the panel has
/// covariates from file row `t−1` and everything else from file row `t`;
/// the first file row is consumed as history.
pub fn load_csv(manifest: &DatasetManifest) -> Result<Panel> {
    manifest.validate()?;
    let path = &manifest.path;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers.iter().all(String::is_empty) {
        return Err(Error::EmptyFile(path.clone()));
    }
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let find = |name: &String| index.get(name.as_str()).copied().ok_or_else(|| Error::MissingColumn(name.clone()));
    find(&manifest.time)?;
    let target = find(&manifest.target)?;
    let cov = manifest.covariates.iter().map(find).collect::<Result<Vec<_>>>()?;
    let treat = manifest.treatments.iter().map(find).collect::<Result<Vec<_>>>()?;

    let (mut x, mut a, mut y) = (Vec::new(), Vec::new(), Vec::new());
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("");
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::NonNumeric {
                    row: i + 1,
                    column: headers[c].clone(),
                    value: raw.to_string(),
                }),
            }
        };
        for &c in &cov {
            x.push(cell(c)?);
        }
        for &c in &treat {
            a.push(cell(c)?);
        }
        y.push(cell(target)?);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyFile(path.clone()));
    }
    let (kx, ka) = (cov.len(), treat.len());
    if manifest.shares_columns() {
        if rows < 2 {
            return Err(Error::EmptyFile(path.clone()));
        }
        let t = rows - 1;
        x.truncate(t * kx);
        return Panel::new(
            Tensor::matrix(t, kx, x)?,
            Tensor::matrix(t, ka, a[ka..].to_vec())?,
            y[1..].to_vec(),
            None,
        );
    }
    Panel::new(Tensor::matrix(rows, kx, x)?, Tensor::matrix(rows, ka, a)?, y, None)
}

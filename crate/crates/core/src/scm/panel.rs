use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Time-aligned covariates `x`, treatments `a` and outcome `y`.
///
/// `y[t]` is the outcome realized by the step-`t−1` outcome equation, so for a
/// fully confounded outcome `y[t + 1] == z_true[t]`. `z_true` is present only
/// for simulated panels.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    x: Tensor,
    a: Tensor,
    y: Vec<f64>,
    z_true: Option<Vec<f64>>,
}

impl Panel {
    pub fn new(x: Tensor, a: Tensor, y: Vec<f64>, z_true: Option<Vec<f64>>) -> Result<Self> {
        let t = y.len();
        if x.shape().len() != 2 || a.shape().len() != 2 {
            return Err(Error::Dimension("panel x and a must be matrices".into()));
        }
        if x.rows() != t || a.rows() != t {
            return Err(Error::Dimension(format!(
                "panel rows disagree: x {}, a {}, y {t}",
                x.rows(),
                a.rows()
            )));
        }
        if let Some(z) = &z_true {
            if z.len() != t {
                return Err(Error::LengthMismatch { left: z.len(), right: t });
            }
        }
        let finite = x.is_finite()
            && a.is_finite()
            && y.iter().all(|v| v.is_finite())
            && z_true.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite { op: "panel" });
        }
        Ok(Panel { x, a, y, z_true })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn z_true(&self) -> Option<&[f64]> {
        self.z_true.as_deref()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.cols()
    }

    pub fn n_treatments(&self) -> usize {
        self.a.cols()
    }

    pub fn is_synthetic(&self) -> bool {
        self.z_true.is_some()
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Panel {
        Panel {
            x: self.x.slice_rows(start, end),
            a: self.a.slice_rows(start, end),
            y: self.y[start..end].to_vec(),
            z_true: self.z_true.as_ref().map(|z| z[start..end].to_vec()),
        }
    }

    /// Rows of `self` followed by rows of `next`.
    pub fn concat(&self, next: &Panel) -> Result<Panel> {
        if self.n_covariates() != next.n_covariates() || self.n_treatments() != next.n_treatments() {
            return Err(Error::Dimension("cannot concatenate panels of different widths".into()));
        }
        let stack = |a: &Tensor, b: &Tensor| {
            let mut d = a.data().to_vec();
            d.extend_from_slice(b.data());
            Tensor::matrix(a.rows() + b.rows(), a.cols(), d)
        };
        let z_true = match (&self.z_true, &next.z_true) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            (None, None) => None,
            _ => return Err(Error::Dimension("cannot mix synthetic and observed panels".into())),
        };
        Panel::new(
            stack(&self.x, &next.x)?,
            stack(&self.a, &next.a)?,
            self.y.iter().chain(&next.y).copied().collect(),
            z_true,
        )
    }

    /// Same panel with treatment rows replaced by `a`.
    pub fn with_treatments(&self, a: Tensor) -> Result<Panel> {
        Panel::new(self.x.clone(), a, self.y.clone(), self.z_true.clone())
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((1..=self.n_covariates()).map(|j| format!("x_{j}")));
        h.extend((1..=self.n_treatments()).map(|j| format!("a_{j}")));
        h.push("y".into());
        if self.z_true.is_some() {
            h.push("z".into());
        }
        h
    }

    /// Writes `t,x_1..x_k,a_1..a_k,y[,z]` with 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}", self.header().join(","))?;
        for t in 0..self.len() {
            let mut line = t.to_string();
            let values = self
                .x
                .row(t)
                .iter()
                .chain(self.a.row(t))
                .chain(std::iter::once(&self.y[t]))
                .chain(self.z_true.as_ref().map(|z| &z[t]));
            for v in values {
                line.push(',');
                line.push_str(&fmt_f64(*v));
            }
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`Panel::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Panel> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let kx = headers.iter().filter(|h| h.starts_with("x_")).count();
        let ka = headers.iter().filter(|h| h.starts_with("a_")).count();
        let has_z = headers.last().is_some_and(|h| h == "z");
        let expected = 1 + kx + ka + 1 + usize::from(has_z);
        if headers.len() != expected || headers.first().map(String::as_str) != Some("t") {
            return Err(Error::Dimension(format!("unexpected panel header {headers:?}")));
        }
        let (mut x, mut a, mut y, mut z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |c: usize| -> Result<f64> {
                let cell = rec.get(c).unwrap_or("");
                cell.parse::<f64>().map_err(|_| Error::NonNumeric {
                    row: i + 1,
                    column: headers[c].clone(),
                    value: cell.to_string(),
                })
            };
            for c in 1..=kx {
                x.push(parse(c)?);
            }
            for c in 1 + kx..1 + kx + ka {
                a.push(parse(c)?);
            }
            y.push(parse(1 + kx + ka)?);
            if has_z {
                z.push(parse(2 + kx + ka)?);
            }
        }
        if y.is_empty() {
            return Err(Error::EmptyFile(path.to_path_buf()));
        }
        let t = y.len();
        Panel::new(
            Tensor::matrix(t, kx, x)?,
            Tensor::matrix(t, ka, a)?,
            y,
            has_z.then_some(z),
        )
    }
}

/// 17 significant digits, round-trip exact.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Contiguous train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train_frac", self.train_frac),
            ("val_frac", self.val_frac),
            ("test_frac", self.test_frac),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(name, "must lie in (0, 1)"));
            }
        }
        let total = self.train_frac + self.val_frac + self.test_frac;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", format!("fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Segment lengths: floor for train and validation, remainder to test.
    pub fn lengths(&self, t: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let floor = |f: f64| (t as f64 * f + 1e-9).floor() as usize;
        let train = floor(self.train_frac);
        let val = floor(self.val_frac);
        Ok((train, val, t - train - val))
    }
}

/// Three contiguous, time-ordered segments.
pub fn split(panel: &Panel, spec: &SplitSpec) -> Result<(Panel, Panel, Panel)> {
    let (train, val, _) = spec.lengths(panel.len())?;
    Ok((
        panel.slice(0, train),
        panel.slice(train, train + val),
        panel.slice(train + val, panel.len()),
    ))
}

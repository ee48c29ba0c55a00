use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scm::fmt_f64;

/// Which input channels a forecaster saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Covariates and treatments only.
    Without,
    /// Plus the learned confounder channel(s).
    With,
    /// Plus the simulator's true confounder (synthetic panels only).
    Oracle,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Without => "without",
            Setting::With => "with",
            Setting::Oracle => "oracle",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "without" => Ok(Setting::Without),
            "with" => Ok(Setting::With),
            "oracle" => Ok(Setting::Oracle),
            other => Err(Error::config("setting", format!("unknown setting {other:?}"))),
        }
    }
}

/// One forecast grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub pred_len: usize,
    pub setting: Setting,
    pub forecaster: String,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
}

pub const GRID_HEADER: &str = "pred_len,setting,forecaster,seed,mse,mae";

pub fn write_grid_csv(rows: &[GridRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{GRID_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.pred_len,
            r.setting,
            r.forecaster,
            r.seed,
            fmt_f64(r.mse),
            fmt_f64(r.mae)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid_csv(path: &Path) -> Result<Vec<GridRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize, name: &str| -> Result<&str> {
            rec.get(c).ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let bad = |c: usize, name: &str| Error::NonNumeric {
            row: i + 1,
            column: name.to_string(),
            value: rec.get(c).unwrap_or("").to_string(),
        };
        rows.push(GridRow {
            pred_len: field(0, "pred_len")?.parse().map_err(|_| bad(0, "pred_len"))?,
            setting: field(1, "setting")?.parse()?,
            forecaster: field(2, "forecaster")?.to_string(),
            seed: field(3, "seed")?.parse().map_err(|_| bad(3, "seed"))?,
            mse: field(4, "mse")?.parse().map_err(|_| bad(4, "mse"))?,
            mae: field(5, "mae")?.parse().map_err(|_| bad(5, "mae"))?,
        });
    }
    Ok(rows)
}

/// Mean and range of a per-seed quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    fn of(v: &[f64]) -> Spread {
        Spread {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// With-vs-without contrast for one (pred_len, forecaster) pair, over seeds.
/// Positive deltas mean the confounder channel helped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub pred_len: usize,
    pub forecaster: String,
    pub seeds: Vec<u64>,
    pub mse_without: Spread,
    pub mse_with: Spread,
    pub mae_without: Spread,
    pub mae_with: Spread,
    /// MSE_without − MSE_with
    pub delta_mse: Spread,
    /// 100 · delta / MSE_without
    pub rel_mse_pct: Spread,
    pub delta_mae: Spread,
    pub rel_mae_pct: Spread,
}

/// Relative change formatted to 0.1 %.
pub fn format_pct(v: f64) -> String {
    format!("{v:.1}%")
}

pub fn relative_improvement_pct(without: f64, with: f64) -> f64 {
    100.0 * (without - with) / without
}

pub fn improvement_summary(grid: &[GridRow]) -> Result<Vec<ImprovementRow>> {
    type Key = (usize, String, u64);
    let mut without: BTreeMap<Key, &GridRow> = BTreeMap::new();
    let mut with: BTreeMap<Key, &GridRow> = BTreeMap::new();
    for r in grid {
        let target = match r.setting {
            Setting::Without => &mut without,
            Setting::With => &mut with,
            Setting::Oracle => continue,
        };
        let key = (r.pred_len, r.forecaster.clone(), r.seed);
        if target.insert(key, r).is_some() {
            return Err(Error::Dimension(format!(
                "duplicate grid row pred_len={} setting={} forecaster={} seed={}",
                r.pred_len, r.setting, r.forecaster, r.seed
            )));
        }
    }
    for key in with.keys() {
        if !without.contains_key(key) {
            return Err(Error::MissingCounterpart(format!(
                "pred_len={} forecaster={} seed={} (no `without` row)",
                key.0, key.1, key.2
            )));
        }
    }

    let mut groups: BTreeMap<(usize, String), Vec<(u64, &GridRow, &GridRow)>> = BTreeMap::new();
    for (key, wo) in &without {
        let w = with.get(key).ok_or_else(|| {
            Error::MissingCounterpart(format!(
                "pred_len={} forecaster={} seed={} (no `with` row)",
                key.0, key.1, key.2
            ))
        })?;
        groups.entry((key.0, key.1.clone())).or_default().push((key.2, wo, w));
    }

    Ok(groups
        .into_iter()
        .map(|((pred_len, forecaster), cells)| {
            let col = |f: &dyn Fn(&GridRow, &GridRow) -> f64| -> Vec<f64> {
                cells.iter().map(|(_, wo, w)| f(wo, w)).collect()
            };
            ImprovementRow {
                pred_len,
                forecaster,
                seeds: cells.iter().map(|c| c.0).collect(),
                mse_without: Spread::of(&col(&|wo, _| wo.mse)),
                mse_with: Spread::of(&col(&|_, w| w.mse)),
                mae_without: Spread::of(&col(&|wo, _| wo.mae)),
                mae_with: Spread::of(&col(&|_, w| w.mae)),
                delta_mse: Spread::of(&col(&|wo, w| wo.mse - w.mse)),
                rel_mse_pct: Spread::of(&col(&|wo, w| relative_improvement_pct(wo.mse, w.mse))),
                delta_mae: Spread::of(&col(&|wo, w| wo.mae - w.mae)),
                rel_mae_pct: Spread::of(&col(&|wo, w| relative_improvement_pct(wo.mae, w.mae))),
            }
        })
        .collect())
}

pub fn write_summary_csv(rows: &[ImprovementRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "pred_len,forecaster,n_seeds,mse_without,mse_with,delta_mse_mean,delta_mse_min,delta_mse_max,\
         rel_mse_pct_mean,rel_mse_pct_min,rel_mse_pct_max,mae_without,mae_with,delta_mae_mean,\
         rel_mae_pct_mean"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{:.1},{:.1},{:.1},{},{},{},{:.1}",
            r.pred_len,
            r.forecaster,
            r.seeds.len(),
            fmt_f64(r.mse_without.mean),
            fmt_f64(r.mse_with.mean),
            fmt_f64(r.delta_mse.mean),
            fmt_f64(r.delta_mse.min),
            fmt_f64(r.delta_mse.max),
            r.rel_mse_pct.mean,
            r.rel_mse_pct.min,
            r.rel_mse_pct.max,
            fmt_f64(r.mae_without.mean),
            fmt_f64(r.mae_with.mean),
            fmt_f64(r.delta_mae.mean),
            r.rel_mae_pct.mean,
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(setting: Setting, seed: u64, mse: f64, mae: f64) -> GridRow {
        GridRow {
            pred_len: 12,
            setting,
            forecaster: "ridge".into(),
            seed,
            mse,
            mae,
        }
    }

    #[test]
    fn table_style_relative_improvement() {
        let s = improvement_summary(&[row(Setting::Without, 0, 0.309, 0.432), row(Setting::With, 0, 0.210, 0.350)])
            .unwrap();
        assert_eq!(format_pct(s[0].rel_mse_pct.mean), "32.0%");
    }

    #[test]
    fn identical_settings_give_zero() {
        let s = improvement_summary(&[row(Setting::Without, 0, 0.5, 0.4), row(Setting::With, 0, 0.5, 0.4)]).unwrap();
        assert_eq!(s[0].delta_mse.mean, 0.0);
        assert_eq!(s[0].rel_mae_pct.mean, 0.0);
    }

    #[test]
    fn worse_with_is_negative_not_clipped() {
        let s = improvement_summary(&[row(Setting::Without, 0, 0.2, 0.3), row(Setting::With, 0, 0.3, 0.4)]).unwrap();
        assert!(s[0].delta_mse.mean < 0.0);
        assert!((s[0].rel_mse_pct.mean + 50.0).abs() < 1e-9);
    }

    #[test]
    fn aggregates_over_seeds() {
        let s = improvement_summary(&[
            row(Setting::Without, 0, 1.0, 1.0),
            row(Setting::With, 0, 0.5, 0.5),
            row(Setting::Without, 1, 1.0, 1.0),
            row(Setting::With, 1, 0.9, 0.9),
            row(Setting::Oracle, 1, 0.1, 0.1),
        ])
        .unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].seeds, vec![0, 1]);
        assert!((s[0].delta_mse.mean - 0.3).abs() < 1e-12);
        assert!((s[0].delta_mse.min - 0.1).abs() < 1e-12);
        assert!((s[0].delta_mse.max - 0.5).abs() < 1e-12);
    }

    #[test]
    fn missing_counterpart_is_an_error() {
        let err = improvement_summary(&[row(Setting::Without, 0, 1.0, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::MissingCounterpart(_)));
        let err = improvement_summary(&[row(Setting::With, 3, 1.0, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::MissingCounterpart(_)));
    }

    #[test]
    fn grid_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        let rows = vec![row(Setting::Without, 4, 0.123456789, 0.2), row(Setting::With, 4, 0.1, 1.0 / 3.0)];
        write_grid_csv(&rows, &path).unwrap();
        assert_eq!(read_grid_csv(&path).unwrap(), rows);
    }
}

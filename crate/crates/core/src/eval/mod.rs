//! Forecast metrics, confounder alignment, and the with/without summary.

mod align;
mod metrics;
mod summary;

pub use align::{affine_align, AlignmentReport};
pub use metrics::{mae, mse, r2_score};
pub use summary::{
    format_pct, improvement_summary, read_grid_csv, relative_improvement_pct, write_grid_csv, write_summary_csv,
    GridRow, ImprovementRow, Setting, Spread, GRID_HEADER,
};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::scm::fmt_f64;

/// Plot-ready `t,z_true,z_hat,z_true_aligned`; `t` counts from `offset`.
pub fn write_alignment_csv(
    report: &AlignmentReport,
    z_true: &[f64],
    z_hat: &[f64],
    offset: usize,
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,z_true,z_hat,z_true_aligned")?;
    for (i, ((zt, zh), za)) in z_true.iter().zip(z_hat).zip(&report.aligned).enumerate() {
        writeln!(w, "{},{},{},{}", offset + i, fmt_f64(*zt), fmt_f64(*zh), fmt_f64(*za))?;
    }
    w.flush()?;
    Ok(())
}

//! Synthetic confounded panels and the panel data model.

mod overlap;
mod panel;
mod simulate;

pub use overlap::{overlap_diagnostic, BinFlag, ColumnOverlap, OverlapReport, DEGENERATE_RATIO, MIN_BIN_COUNT};
pub use panel::{fmt_f64, split, Panel, SplitSpec};
pub use simulate::{
    simulate, simulate_detailed, vector_to_scalar_reduce, LagCoefficients, Simulation, SimulationConfig, Z_LIMIT,
};

use nalgebra::{Cholesky, DMatrix};

use super::{check_layout, Forecaster, WindowSet};
use crate::error::{Error, Result};
use crate::forecast::ChannelManifest;
use crate::numerics::Tensor;

/// Relative diagonal floor used when `lambda == 0`.
const ZERO_LAMBDA_FLOOR: f64 = 1e-12;
/// Smallest acceptable squared-pivot ratio for an unregularized solve.
const MIN_PIVOT_RATIO: f64 = 1e-10;

/// Linear map from a flattened window (plus bias) to the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeForecaster {
    pub manifest: ChannelManifest,
    pub seq_len: usize,
    pub pred_len: usize,
    pub lambda: f64,
    /// `(D+1) × pred_len`; the last row is the bias.
    pub weights: Tensor,
    /// `‖(GᵀG + λI)W − GᵀY‖∞` after the solve.
    pub residual: f64,
    /// Magnitude the residual is judged against.
    pub residual_scale: f64,
}

impl RidgeForecaster {
    pub fn residual_ok(&self) -> bool {
        self.residual < 1e-8 * self.residual_scale
    }
}

fn design(inputs: &Tensor) -> DMatrix<f64> {
    let (n, d) = (inputs.rows(), inputs.cols());
    DMatrix::from_fn(n, d + 1, |r, c| if c < d { inputs.get(r, c) } else { 1.0 })
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Closed-form solve of `(GᵀG + λI)W = GᵀY` with `G = [inputs, 1]`.
///
/// The bias column is penalized like every other column. With `lambda = 0`
/// a tiny diagonal floor keeps the factorization defined; a system whose
/// pivots still collapse is reported as singular.
pub fn fit_ridge(train: &WindowSet, lambda: f64) -> Result<RidgeForecaster> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config("ridge_lambda", format!("must be finite and ≥ 0, got {lambda}")));
    }
    if train.is_empty() {
        return Err(Error::Empty("ridge training windows".into()));
    }
    let g = design(&train.inputs);
    let y = DMatrix::from_row_slice(train.targets.rows(), train.targets.cols(), train.targets.data());
    let gt = g.transpose();
    let gtg = &gt * &g;
    let gty = &gt * &y;
    let p = gtg.nrows();

    let mean_diag = gtg.diagonal().mean().max(f64::MIN_POSITIVE);
    let effective = if lambda == 0.0 { ZERO_LAMBDA_FLOOR * mean_diag } else { lambda };
    let mut system = gtg.clone();
    for i in 0..p {
        system[(i, i)] += effective;
    }
    let chol = Cholesky::new(system.clone()).ok_or(Error::SingularSystem)?;
    if lambda == 0.0 {
        let pivots = chol.l_dirty().diagonal();
        let max = pivots.iter().fold(0.0f64, |m, v| m.max(v * v));
        let min = pivots.iter().fold(f64::INFINITY, |m, v| m.min(v * v));
        if min < MIN_PIVOT_RATIO * max {
            return Err(Error::SingularSystem);
        }
    }
    let w = chol.solve(&gty);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "fit_ridge" });
    }

    let residual = (&system * &w - &gty).amax();
    let residual_scale = 1f64.max(gty.amax()).max(inf_norm(&system) * w.amax());

    let mut data = Vec::with_capacity(w.len());
    for r in 0..w.nrows() {
        data.extend(w.row(r).iter());
    }
    Ok(RidgeForecaster {
        manifest: train.manifest.clone(),
        seq_len: train.spec.seq_len,
        pred_len: train.spec.pred_len,
        lambda,
        weights: Tensor::matrix(w.nrows(), w.ncols(), data)?,
        residual,
        residual_scale,
    })
}

impl Forecaster for RidgeForecaster {
    fn name(&self) -> &str {
        "ridge"
    }

    fn manifest(&self) -> &ChannelManifest {
        &self.manifest
    }

    fn predict(&self, windows: &WindowSet) -> Result<Tensor> {
        check_layout(self, self.seq_len, self.pred_len, windows)?;
        let d = windows.inputs.cols();
        let mut out = windows.inputs.matmul(&self.weights.slice_rows(0, d))?;
        let bias = self.weights.row(d).to_vec();
        for r in 0..out.rows() {
            for (c, b) in bias.iter().enumerate() {
                out.set(r, c, out.get(r, c) + b);
            }
        }
        Ok(out)
    }
}

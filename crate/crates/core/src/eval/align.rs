use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Least-squares fit `z_hat ≈ slope · z_true + intercept` and its quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub slope: f64,
    pub intercept: f64,
    pub pearson_r: f64,
    pub r2_affine: f64,
    /// True when the learned series runs opposite to the true one.
    pub sign_flipped: bool,
    /// `slope · z_true + intercept`, on the scale of `z_hat`.
    pub aligned: Vec<f64>,
}

impl AlignmentReport {
    pub fn abs_r(&self) -> f64 {
        self.pearson_r.abs()
    }
}

pub fn affine_align(z_hat: &[f64], z_true: &[f64]) -> Result<AlignmentReport> {
    if z_hat.len() != z_true.len() {
        return Err(Error::LengthMismatch {
            left: z_hat.len(),
            right: z_true.len(),
        });
    }
    let n = z_hat.len();
    if n < 3 {
        return Err(Error::Empty(format!("alignment needs at least 3 points, got {n}")));
    }
    let nf = n as f64;
    let mh = z_hat.iter().sum::<f64>() / nf;
    let mt = z_true.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (h, t) in z_hat.iter().zip(z_true) {
        let (dh, dt) = (h - mh, t - mt);
        sxy += dh * dt;
        sxx += dt * dt;
        syy += dh * dh;
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateVariance("z_true is constant".into()));
    }
    if syy == 0.0 {
        return Err(Error::DegenerateVariance("z_hat is constant".into()));
    }
    let slope = sxy / sxx;
    let intercept = mh - slope * mt;
    let pearson_r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let aligned: Vec<f64> = z_true.iter().map(|t| slope * t + intercept).collect();
    let ss_res: f64 = z_hat.iter().zip(&aligned).map(|(h, a)| (h - a) * (h - a)).sum();
    Ok(AlignmentReport {
        slope,
        intercept,
        pearson_r,
        r2_affine: 1.0 - ss_res / syy,
        sign_flipped: pearson_r < 0.0,
        aligned,
    })
}

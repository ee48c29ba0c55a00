//! Sliding-window forecasting with and without confounder channels.

mod recurrent;
mod ridge;
mod scale;
mod windows;

pub use recurrent::{
    fit_recurrent_forecaster, recurrent_loss, recurrent_loss_and_grad, RecurrentEpoch, RecurrentForecaster,
    RecurrentParams, RecurrentSpec,
};
pub use ridge::{fit_ridge, RidgeForecaster};
pub use scale::PanelScaler;
pub use windows::{
    build_panel_windows, build_windows, Channel, ChannelManifest, ChannelRole, WindowSet, WindowSpec,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{mae, mse};
use crate::numerics::Tensor;

pub trait Forecaster {
    fn name(&self) -> &str;
    fn manifest(&self) -> &ChannelManifest;
    /// `N × pred_len` predictions for `windows`.
    fn predict(&self, windows: &WindowSet) -> Result<Tensor>;
}

/// Windows must carry exactly the channels, input length and horizon the
/// forecaster was fitted on.
pub(crate) fn check_layout(
    model: &dyn Forecaster,
    seq_len: usize,
    pred_len: usize,
    windows: &WindowSet,
) -> Result<()> {
    if model.manifest() != &windows.manifest || seq_len != windows.spec.seq_len || pred_len != windows.spec.pred_len
    {
        return Err(Error::ManifestMismatch {
            fitted: format!("{} (seq_len {seq_len}, pred_len {pred_len})", model.manifest().names().join(",")),
            given: format!(
                "{} (seq_len {}, pred_len {})",
                windows.manifest.names().join(","),
                windows.spec.seq_len,
                windows.spec.pred_len
            ),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub mse: f64,
    pub mae: f64,
}

/// MSE and MAE over every window and horizon step.
pub fn window_metrics(pred: &Tensor, targets: &Tensor) -> Result<ForecastMetrics> {
    if pred.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "window_metrics",
            left: pred.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    Ok(ForecastMetrics {
        mse: mse(pred.data(), targets.data())?,
        mae: mae(pred.data(), targets.data())?,
    })
}

pub fn evaluate_forecaster(model: &dyn Forecaster, test: &WindowSet) -> Result<ForecastMetrics> {
    let pred = model.predict(test)?;
    window_metrics(&pred, &test.targets)
}

fn default_lambda() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeSpec {
    #[serde(default = "default_lambda")]
    pub ridge_lambda: f64,
}

impl Default for RidgeSpec {
    fn default() -> Self {
        RidgeSpec {
            ridge_lambda: default_lambda(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ForecasterSpec {
    Ridge(RidgeSpec),
    Recurrent(RecurrentSpec),
}

impl ForecasterSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ForecasterSpec::Ridge(_) => "ridge",
            ForecasterSpec::Recurrent(_) => "recurrent",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ForecasterSpec::Ridge(r) if !(r.ridge_lambda >= 0.0 && r.ridge_lambda.is_finite()) => {
                Err(Error::config("ridge_lambda", format!("must be finite and ≥ 0, got {}", r.ridge_lambda)))
            }
            ForecasterSpec::Ridge(_) => Ok(()),
            ForecasterSpec::Recurrent(r) => r.validate(),
        }
    }

    /// Same spec with its seed replaced (ridge has none).
    pub fn with_seed(&self, seed: u64) -> ForecasterSpec {
        match self {
            ForecasterSpec::Recurrent(r) => ForecasterSpec::Recurrent(RecurrentSpec { seed, ..r.clone() }),
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedForecaster {
    Ridge(RidgeForecaster),
    Recurrent(RecurrentForecaster),
}

impl FittedForecaster {
    fn inner(&self) -> &dyn Forecaster {
        match self {
            FittedForecaster::Ridge(m) => m,
            FittedForecaster::Recurrent(m) => m,
        }
    }
}

impl Forecaster for FittedForecaster {
    fn name(&self) -> &str {
        self.inner().name()
    }

    fn manifest(&self) -> &ChannelManifest {
        self.inner().manifest()
    }

    fn predict(&self, windows: &WindowSet) -> Result<Tensor> {
        self.inner().predict(windows)
    }
}

pub fn fit_forecaster(spec: &ForecasterSpec, train: &WindowSet, val: &WindowSet) -> Result<FittedForecaster> {
    spec.validate()?;
    match spec {
        ForecasterSpec::Ridge(r) => fit_ridge(train, r.ridge_lambda).map(FittedForecaster::Ridge),
        ForecasterSpec::Recurrent(r) => fit_recurrent_forecaster(train, val, r).map(FittedForecaster::Recurrent),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::augment_panel;
    use crate::scm::Panel;

    #[test]
    fn metric_hand_examples() {
        let t = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let m = window_metrics(&t, &t).unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        let m = window_metrics(&t.map(|v| v + 1.0), &t).unwrap();
        assert_eq!((m.mse, m.mae), (1.0, 1.0));
        let half = Tensor::matrix(2, 2, vec![1.0, -2.0, 2.5, 5.0]).unwrap();
        let m = window_metrics(&half, &t).unwrap();
        assert_eq!((m.mse, m.mae), (2.0, 1.0));
    }

    #[test]
    fn cross_setting_evaluation_is_refused() {
        let t = 40;
        let x = Tensor::matrix(t, 1, (0..t).map(|v| (v as f64).sin()).collect()).unwrap();
        let panel = Panel::new(x.clone(), x, (0..t).map(|v| v as f64).collect(), None).unwrap();
        let aug = augment_panel(&panel, &Tensor::ones(&[t, 1])).unwrap();
        let spec = WindowSpec::new(4, 2);
        let with = build_windows(&aug, &spec, true, "train").unwrap();
        let without = build_windows(&aug, &spec, false, "test").unwrap();
        let model = fit_ridge(&with, 1.0).unwrap();
        assert!(matches!(evaluate_forecaster(&model, &without), Err(Error::ManifestMismatch { .. })));
        let other_horizon = build_windows(&aug, &WindowSpec::new(4, 3), true, "test").unwrap();
        assert!(evaluate_forecaster(&model, &other_horizon).is_err());
    }

    #[test]
    fn spec_json_is_tagged_by_kind() {
        let s: ForecasterSpec = serde_json::from_str(r#"{"kind":"ridge","ridge_lambda":0.5}"#).unwrap();
        assert_eq!(s, ForecasterSpec::Ridge(RidgeSpec { ridge_lambda: 0.5 }));
        let s: ForecasterSpec = serde_json::from_str(r#"{"kind":"recurrent","hidden_dim":4}"#).unwrap();
        assert_eq!(s.name(), "recurrent");
        assert!(serde_json::from_str::<ForecasterSpec>(r#"{"kind":"ridge","hidden_dim":4}"#).is_err());
        assert!(serde_json::from_str::<ForecasterSpec>(r#"{"kind":"lstm"}"#).is_err());
    }
}

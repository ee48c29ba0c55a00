use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::factor::{AugmentedPanel, Standardizer};
use crate::numerics::Tensor;
use crate::scm::Panel;

/// Per-channel z-scoring fitted on the training segment and applied
/// unchanged to every segment and both settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelScaler {
    pub x: Standardizer,
    pub a: Standardizer,
    pub z: Standardizer,
    pub y: Standardizer,
}

impl PanelScaler {
    pub fn fit(train: &AugmentedPanel) -> PanelScaler {
        let base = train.base();
        PanelScaler {
            x: Standardizer::fit(base.x()),
            a: Standardizer::fit(base.a()),
            z: Standardizer::fit(train.confounder()),
            y: Standardizer::fit(&column(base.y())),
        }
    }

    /// Ground-truth confounder, if any, is carried through unscaled.
    pub fn apply(&self, panel: &AugmentedPanel) -> Result<AugmentedPanel> {
        let base = panel.base();
        let y = self.y.apply(&column(base.y())).into_data();
        let scaled = Panel::new(
            self.x.apply(base.x()),
            self.a.apply(base.a()),
            y,
            base.z_true().map(<[f64]>::to_vec),
        )?;
        panel.replace(scaled, self.z.apply(panel.confounder()))
    }

    pub fn invert_y(&self, v: f64) -> f64 {
        self.y.invert(0, v)
    }
}

fn column(v: &[f64]) -> Tensor {
    Tensor::matrix(v.len(), 1, v.to_vec()).expect("column vector")
}

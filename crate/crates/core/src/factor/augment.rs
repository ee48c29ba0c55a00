use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scm::Panel;

/// Where the extra covariate channels came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfounderSource {
    Learned,
    /// The simulator's ground-truth `z_true`.
    Oracle,
}

/// A panel plus confounder channels that sit alongside the covariates.
/// The original panel is kept untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPanel {
    base: Panel,
    confounder: Tensor,
    source: ConfounderSource,
}

impl AugmentedPanel {
    pub fn base(&self) -> &Panel {
        &self.base
    }

    pub fn confounder(&self) -> &Tensor {
        &self.confounder
    }

    pub fn source(&self) -> ConfounderSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn z_dim(&self) -> usize {
        self.confounder.cols()
    }

    /// Original covariates plus the confounder channels.
    pub fn n_covariate_channels(&self) -> usize {
        self.base.n_covariates() + self.z_dim()
    }

    /// Drops the confounder channels.
    pub fn strip(&self) -> Panel {
        self.base.clone()
    }

    /// Same source, new contents.
    pub(crate) fn replace(&self, base: Panel, confounder: Tensor) -> Result<AugmentedPanel> {
        augment(&base, confounder, self.source)
    }

    pub fn slice(&self, start: usize, end: usize) -> AugmentedPanel {
        AugmentedPanel {
            base: self.base.slice(start, end),
            confounder: self.confounder.slice_rows(start, end),
            source: self.source,
        }
    }
}

pub fn augment_panel(panel: &Panel, z_hat: &Tensor) -> Result<AugmentedPanel> {
    augment(panel, z_hat.clone(), ConfounderSource::Learned)
}

/// Augments with the panel's own `z_true` (oracle ceiling).
pub fn augment_with_truth(panel: &Panel) -> Result<AugmentedPanel> {
    let z = panel
        .z_true()
        .ok_or_else(|| Error::Dimension("panel has no ground-truth confounder".into()))?;
    augment(panel, Tensor::matrix(z.len(), 1, z.to_vec())?, ConfounderSource::Oracle)
}

fn augment(panel: &Panel, confounder: Tensor, source: ConfounderSource) -> Result<AugmentedPanel> {
    if confounder.shape().len() != 2 || confounder.rows() != panel.len() {
        return Err(Error::LengthMismatch {
            left: confounder.rows(),
            right: panel.len(),
        });
    }
    if !confounder.is_finite() {
        return Err(Error::NonFinite { op: "augment_panel" });
    }
    Ok(AugmentedPanel {
        base: panel.clone(),
        confounder,
        source,
    })
}

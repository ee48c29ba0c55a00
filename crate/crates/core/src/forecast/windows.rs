use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::{AugmentedPanel, ConfounderSource};
use crate::numerics::Tensor;
use crate::scm::Panel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub seq_len: usize,
    pub pred_len: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

impl WindowSpec {
    pub fn new(seq_len: usize, pred_len: usize) -> Self {
        WindowSpec {
            seq_len,
            pred_len,
            stride: 1,
        }
    }

    pub fn with_stride(self, stride: usize) -> Self {
        WindowSpec { stride, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::config("seq_len", "must be at least 1"));
        }
        if self.pred_len == 0 {
            return Err(Error::config("pred_len", "must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride", "must be at least 1"));
        }
        Ok(())
    }

    /// Number of windows a segment of `t` rows yields.
    pub fn count(&self, t: usize) -> usize {
        let span = self.seq_len + self.pred_len;
        if t < span {
            0
        } else {
            (t - span) / self.stride + 1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelRole {
    Covariate,
    Treatment,
    Confounder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub role: ChannelRole,
}

/// Ordered description of the channels inside each input time step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelManifest {
    pub channels: Vec<Channel>,
}

impl ChannelManifest {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn count(&self, role: ChannelRole) -> usize {
        self.channels.iter().filter(|c| c.role == role).count()
    }

    pub fn names(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.name.as_str()).collect()
    }

    fn for_panel(panel: &Panel, confounder: Option<(usize, ConfounderSource)>) -> Self {
        let mut channels = Vec::new();
        for j in 1..=panel.n_covariates() {
            channels.push(Channel {
                name: format!("x_{j}"),
                role: ChannelRole::Covariate,
            });
        }
        for j in 1..=panel.n_treatments() {
            channels.push(Channel {
                name: format!("a_{j}"),
                role: ChannelRole::Treatment,
            });
        }
        if let Some((z_dim, source)) = confounder {
            let prefix = match source {
                ConfounderSource::Learned => "z_hat",
                ConfounderSource::Oracle => "z_true",
            };
            for j in 1..=z_dim {
                channels.push(Channel {
                    name: format!("{prefix}_{j}"),
                    role: ChannelRole::Confounder,
                });
            }
        }
        ChannelManifest { channels }
    }
}

/// Sliding (input, target) windows cut from one split segment.
///
/// Input rows are flattened time-major: the first `C` entries are the
/// channels at the window's first step, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub spec: WindowSpec,
    pub segment: String,
    pub manifest: ChannelManifest,
    /// `N × (seq_len·C)`
    pub inputs: Tensor,
    /// `N × pred_len`
    pub targets: Tensor,
    /// First input row of each window, relative to the segment start.
    pub origins: Vec<usize>,
    pub segment_len: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.manifest.len()
    }

    pub fn input_rows(&self, i: usize) -> Range<usize> {
        let o = self.origins[i];
        o..o + self.spec.seq_len
    }

    pub fn target_rows(&self, i: usize) -> Range<usize> {
        let o = self.origins[i] + self.spec.seq_len;
        o..o + self.spec.pred_len
    }

    /// Subset of windows, in the given order.
    pub fn select(&self, idx: &[usize]) -> WindowSet {
        let pick = |m: &Tensor| {
            let cols = m.cols();
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                data.extend_from_slice(m.row(i));
            }
            Tensor::matrix(idx.len(), cols, data).expect("row subset")
        };
        WindowSet {
            spec: self.spec,
            segment: self.segment.clone(),
            manifest: self.manifest.clone(),
            inputs: pick(&self.inputs),
            targets: pick(&self.targets),
            origins: idx.iter().map(|&i| self.origins[i]).collect(),
            segment_len: self.segment_len,
        }
    }
}

/// Windows over `panel`; the confounder channels are included only when
/// `with_confounder` is set. Targets are always the outcome.
pub fn build_windows(
    panel: &AugmentedPanel,
    spec: &WindowSpec,
    with_confounder: bool,
    segment: &str,
) -> Result<WindowSet> {
    let z = with_confounder.then(|| panel.confounder());
    let source = with_confounder.then(|| (panel.z_dim(), panel.source()));
    windows(panel.base(), z, source, spec, segment)
}

/// Windows over a panel that has no confounder channels.
pub fn build_panel_windows(panel: &Panel, spec: &WindowSpec, segment: &str) -> Result<WindowSet> {
    windows(panel, None, None, spec, segment)
}

fn windows(
    panel: &Panel,
    z: Option<&Tensor>,
    source: Option<(usize, ConfounderSource)>,
    spec: &WindowSpec,
    segment: &str,
) -> Result<WindowSet> {
    spec.validate()?;
    let t = panel.len();
    let required = spec.seq_len + spec.pred_len;
    if t < required {
        return Err(Error::SegmentTooShort {
            segment: segment.to_string(),
            len: t,
            required,
        });
    }
    let manifest = ChannelManifest::for_panel(panel, source);
    let c = manifest.len();
    let n = spec.count(t);

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(t);
    for r in 0..t {
        let mut row = Vec::with_capacity(c);
        row.extend_from_slice(panel.x().row(r));
        row.extend_from_slice(panel.a().row(r));
        if let Some(z) = z {
            row.extend_from_slice(z.row(r));
        }
        rows.push(row);
    }

    let mut inputs = Vec::with_capacity(n * spec.seq_len * c);
    let mut targets = Vec::with_capacity(n * spec.pred_len);
    let mut origins = Vec::with_capacity(n);
    for w in 0..n {
        let o = w * spec.stride;
        for row in &rows[o..o + spec.seq_len] {
            inputs.extend_from_slice(row);
        }
        targets.extend_from_slice(&panel.y()[o + spec.seq_len..o + required]);
        origins.push(o);
    }
    Ok(WindowSet {
        spec: *spec,
        segment: segment.to_string(),
        manifest,
        inputs: Tensor::matrix(n, spec.seq_len * c, inputs)?,
        targets: Tensor::matrix(n, spec.pred_len, targets)?,
        origins,
        segment_len: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::augment_panel;

    fn ramp_panel(t: usize) -> Panel {
        let x = Tensor::matrix(t, 2, (0..2 * t).map(|v| v as f64).collect()).unwrap();
        let a = Tensor::matrix(t, 1, (0..t).map(|v| -(v as f64)).collect()).unwrap();
        Panel::new(x, a, (0..t).map(|v| 1000.0 + v as f64).collect(), None).unwrap()
    }

    #[test]
    fn window_count() {
        let p = augment_panel(&ramp_panel(200), &Tensor::zeros(&[200, 1])).unwrap();
        let w = build_windows(&p, &WindowSpec::new(96, 12), false, "train").unwrap();
        assert_eq!(w.len(), 93);
        assert_eq!(WindowSpec::new(96, 12).with_stride(5).count(200), 19);
    }

    #[test]
    fn toggle_adds_z_dim_channels_and_keeps_targets() {
        let p = augment_panel(&ramp_panel(50), &Tensor::ones(&[50, 2])).unwrap();
        let spec = WindowSpec::new(10, 4);
        let without = build_windows(&p, &spec, false, "s").unwrap();
        let with = build_windows(&p, &spec, true, "s").unwrap();
        assert_eq!(with.n_channels(), without.n_channels() + 2);
        assert_eq!(with.targets, without.targets);
        assert_eq!(with.manifest.count(ChannelRole::Confounder), 2);
    }

    #[test]
    fn last_target_ends_at_final_row() {
        let panel = ramp_panel(30);
        let w = build_panel_windows(&panel, &WindowSpec::new(7, 3), "s").unwrap();
        let last = w.len() - 1;
        assert_eq!(w.target_rows(last).end, 30);
        assert_eq!(w.targets.get(last, 2), panel.y()[29]);
    }

    #[test]
    fn layout_is_time_major() {
        let panel = ramp_panel(12);
        let w = build_panel_windows(&panel, &WindowSpec::new(3, 2).with_stride(2), "s").unwrap();
        // window 1 starts at row 2: x = (4, 5), a = -2
        assert_eq!(&w.inputs.row(1)[..6], &[4.0, 5.0, -2.0, 6.0, 7.0, -3.0]);
        assert_eq!(w.targets.row(1), &[1005.0, 1006.0]);
    }

    #[test]
    fn short_segment_names_itself() {
        let err = build_panel_windows(&ramp_panel(20), &WindowSpec::new(16, 8), "test").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("test") && msg.contains("24"), "{msg}");
    }

    #[test]
    fn oracle_and_learned_manifests_differ() {
        let panel = ramp_panel(20);
        let learned = augment_panel(&panel, &Tensor::zeros(&[20, 1])).unwrap();
        let synthetic = Panel::new(panel.x().clone(), panel.a().clone(), panel.y().to_vec(), Some(vec![0.0; 20])).unwrap();
        let oracle = crate::factor::augment_with_truth(&synthetic).unwrap();
        let spec = WindowSpec::new(5, 2);
        let a = build_windows(&learned, &spec, true, "s").unwrap();
        let b = build_windows(&oracle, &spec, true, "s").unwrap();
        assert_ne!(a.manifest, b.manifest);
    }
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_layout, ChannelManifest, Forecaster, WindowSet};
use crate::error::{Error, Result};
use crate::numerics::{init_uniform, AdamConfig, AdamState, NodeId, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecurrentSpec {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub batch_size: usize,
    /// Trains on every `train_stride`-th training window.
    pub train_stride: usize,
    pub seed: u64,
}

impl Default for RecurrentSpec {
    fn default() -> Self {
        RecurrentSpec {
            hidden_dim: 32,
            epochs: 100,
            lr: 1e-3,
            patience: 10,
            batch_size: 64,
            train_stride: 4,
            seed: 0,
        }
    }
}

impl RecurrentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.train_stride == 0 {
            return Err(Error::config("train_stride", "must be at least 1"));
        }
        Ok(())
    }
}

/// `h_s = tanh(x_s·w_x + h_{s−1}·w_h + b_h)`, `ŷ = h_L·w_o + b_o`, `h_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentParams {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b_h: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl RecurrentParams {
    pub fn init(channels: usize, hidden: usize, pred_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RecurrentParams {
            w_x: init_uniform(&mut rng, channels, hidden, channels + hidden),
            w_h: init_uniform(&mut rng, hidden, hidden, channels + hidden),
            b_h: Tensor::zeros(&[1, hidden]),
            w_o: init_uniform(&mut rng, hidden, pred_len, hidden),
            b_o: Tensor::zeros(&[1, pred_len]),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_x.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_h.rows()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w_x, &self.w_h, &self.b_h, &self.w_o, &self.b_o]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_x, &mut self.w_h, &mut self.b_h, &mut self.w_o, &mut self.b_o]
    }

    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::row_vector(data)
    }

    pub fn with_flat(&self, flat: &Tensor) -> Result<Self> {
        let total: usize = self.tensors().iter().map(|t| t.len()).sum();
        if flat.len() != total {
            return Err(Error::LengthMismatch {
                left: flat.len(),
                right: total,
            });
        }
        let mut out = self.clone();
        let mut offset = 0;
        for t in out.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }
}

/// Input slice for step `s` of every selected window.
fn step_inputs(windows: &WindowSet, rows: &[usize], s: usize) -> Tensor {
    let c = windows.n_channels();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(&windows.inputs.row(r)[s * c..(s + 1) * c]);
    }
    Tensor::matrix(rows.len(), c, data).expect("step slice")
}

fn target_rows(windows: &WindowSet, rows: &[usize]) -> Tensor {
    let h = windows.targets.cols();
    let mut data = Vec::with_capacity(rows.len() * h);
    for &r in rows {
        data.extend_from_slice(windows.targets.row(r));
    }
    Tensor::matrix(rows.len(), h, data).expect("target slice")
}

/// Mean squared error over `rows`, recorded on `tape`.
fn taped_loss(tape: &mut Tape, ids: &[NodeId], windows: &WindowSet, rows: &[usize]) -> Result<NodeId> {
    let (w_x, w_h, b_h, w_o, b_o) = (ids[0], ids[1], ids[2], ids[3], ids[4]);
    let ones = tape.constant(Tensor::ones(&[rows.len(), 1]));
    let bias_h = tape.matmul(ones, b_h)?;
    let mut h: Option<NodeId> = None;
    for s in 0..windows.spec.seq_len {
        let x = tape.constant(step_inputs(windows, rows, s));
        let mut pre = tape.matmul(x, w_x)?;
        if let Some(prev) = h {
            let rec = tape.matmul(prev, w_h)?;
            pre = tape.add(pre, rec)?;
        }
        pre = tape.add(pre, bias_h)?;
        h = Some(tape.tanh(pre)?);
    }
    let h = h.expect("seq_len ≥ 1");
    let out = tape.matmul(h, w_o)?;
    let bias_o = tape.matmul(ones, b_o)?;
    let out = tape.add(out, bias_o)?;
    let target = tape.constant(target_rows(windows, rows));
    let diff = tape.sub(out, target)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

fn register(tape: &mut Tape, params: &RecurrentParams) -> Vec<NodeId> {
    params.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect()
}

pub fn recurrent_loss_and_grad(params: &RecurrentParams, windows: &WindowSet) -> Result<(f64, Vec<Tensor>)> {
    let rows: Vec<usize> = (0..windows.len()).collect();
    let mut tape = Tape::new();
    let ids = register(&mut tape, params);
    let loss = taped_loss(&mut tape, &ids, windows, &rows)?;
    let grads = tape.backward(loss)?;
    let g = ids.iter().map(|&id| grads.wrt(id)).collect::<Result<Vec<_>>>()?;
    Ok((tape.value(loss).data()[0], g))
}

pub fn recurrent_loss(params: &RecurrentParams, windows: &WindowSet) -> Result<f64> {
    let pred = forward(params, windows)?;
    Ok(mean_sq(&pred, &windows.targets))
}

/// Tape-free forward pass over every window.
fn forward(params: &RecurrentParams, windows: &WindowSet) -> Result<Tensor> {
    let n = windows.len();
    let rows: Vec<usize> = (0..n).collect();
    let add_row = |m: &mut Tensor, b: &Tensor| {
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                m.set(r, c, m.get(r, c) + b.get(0, c));
            }
        }
    };
    let mut h: Option<Tensor> = None;
    for s in 0..windows.spec.seq_len {
        let mut pre = step_inputs(windows, &rows, s).matmul(&params.w_x)?;
        if let Some(prev) = &h {
            let rec = prev.matmul(&params.w_h)?;
            pre = pre.zip_with(&rec, "add", |a, b| a + b)?;
        }
        add_row(&mut pre, &params.b_h);
        h = Some(pre.map(f64::tanh));
    }
    let mut out = h.expect("seq_len ≥ 1").matmul(&params.w_o)?;
    add_row(&mut out, &params.b_o);
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "recurrent_forward" });
    }
    Ok(out)
}

fn mean_sq(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentForecaster {
    pub manifest: ChannelManifest,
    pub seq_len: usize,
    pub pred_len: usize,
    pub params: RecurrentParams,
    pub log: Vec<RecurrentEpoch>,
    pub best_epoch: usize,
}

/// Minibatch Adam on squared error, shuffled with the spec's seed; keeps
/// the parameters with the lowest validation loss. An empty `val` falls
/// back to the training loss.
pub fn fit_recurrent_forecaster(
    train: &WindowSet,
    val: &WindowSet,
    spec: &RecurrentSpec,
) -> Result<RecurrentForecaster> {
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("recurrent training windows".into()));
    }
    if !val.is_empty() && (val.manifest != train.manifest || val.spec.seq_len != train.spec.seq_len) {
        return Err(Error::ManifestMismatch {
            fitted: train.manifest.names().join(","),
            given: val.manifest.names().join(","),
        });
    }
    let subsampled;
    let train = if spec.train_stride > 1 {
        subsampled = train.select(&(0..train.len()).step_by(spec.train_stride).collect::<Vec<_>>());
        &subsampled
    } else {
        train
    };
    let mut params = RecurrentParams::init(train.n_channels(), spec.hidden_dim, train.spec.pred_len, spec.seed);
    let mut adam = AdamState::new(AdamConfig::with_lr(spec.lr), &params.tensors())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_f0ca);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut log: Vec<RecurrentEpoch> = Vec::new();
    let mut best: Option<(f64, usize, RecurrentParams)> = None;
    let mut since_best = 0;
    let diverged = |epoch: usize, log: &[RecurrentEpoch]| Error::Divergence {
        epoch,
        last_finite: log.last().map(|e| e.epoch),
    };

    for epoch in 1..=spec.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for batch in order.chunks(spec.batch_size) {
            let mut tape = Tape::new();
            let ids = register(&mut tape, &params);
            let step = (|| -> Result<(f64, Vec<Tensor>)> {
                let loss = taped_loss(&mut tape, &ids, train, batch)?;
                let grads = tape.backward(loss)?;
                let g = ids.iter().map(|&id| grads.wrt(id)).collect::<Result<Vec<_>>>()?;
                Ok((tape.value(loss).data()[0], g))
            })();
            let (loss, grads) = step.map_err(|e| match e {
                Error::NonFinite { .. } => diverged(epoch, &log),
                other => other,
            })?;
            adam.step(&mut params.tensors_mut(), &grads)?;
            weighted += loss * batch.len() as f64;
        }
        let train_loss = weighted / train.len() as f64;
        let monitored = if val.is_empty() { train } else { val };
        let val_loss = recurrent_loss(&params, monitored).map_err(|_| diverged(epoch, &log))?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(diverged(epoch, &log));
        }
        log.push(RecurrentEpoch {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= spec.patience {
                break;
            }
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(RecurrentForecaster {
        manifest: train.manifest.clone(),
        seq_len: train.spec.seq_len,
        pred_len: train.spec.pred_len,
        params,
        log,
        best_epoch,
    })
}

impl Forecaster for RecurrentForecaster {
    fn name(&self) -> &str {
        "recurrent"
    }

    fn manifest(&self) -> &ChannelManifest {
        &self.manifest
    }

    fn predict(&self, windows: &WindowSet) -> Result<Tensor> {
        check_layout(self, self.seq_len, self.pred_len, windows)?;
        forward(&self.params, windows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::{build_panel_windows, WindowSpec};
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use crate::scm::Panel;
    use rand::Rng;

    fn noise_panel(t: usize, seed: u64, y: impl Fn(usize) -> f64) -> Panel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        Panel::new(
            Tensor::matrix(t, 2, gen(2 * t)).unwrap(),
            Tensor::matrix(t, 1, gen(t)).unwrap(),
            (0..t).map(y).collect(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences_on_two_windows() {
        for seed in 0..3 {
            let panel = noise_panel(9, seed, |t| (t as f64 * 0.7).sin());
            let ws = build_panel_windows(&panel, &WindowSpec::new(4, 3).with_stride(2), "train").unwrap();
            assert_eq!(ws.len(), 2);
            let p = RecurrentParams::init(3, 4, 3, seed);
            let p = p.with_flat(&p.flatten().map(|v| v + 0.1)).unwrap();
            let (_, grads) = recurrent_loss_and_grad(&p, &ws).unwrap();
            let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
            let numeric =
                finite_diff_grad(|flat| recurrent_loss(&p.with_flat(flat)?, &ws), &p.flatten(), 1e-5).unwrap();
            let err = max_relative_error(&analytic, numeric.data());
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn taped_and_plain_forward_agree() {
        let panel = noise_panel(30, 9, |t| t as f64);
        let ws = build_panel_windows(&panel, &WindowSpec::new(5, 2), "s").unwrap();
        let p = RecurrentParams::init(3, 6, 2, 1);
        let (taped, _) = recurrent_loss_and_grad(&p, &ws).unwrap();
        let plain = recurrent_loss(&p, &ws).unwrap();
        assert!((taped - plain).abs() < 1e-12);
    }

    #[test]
    fn constant_target_is_learned() {
        let c = 0.75;
        let panel = noise_panel(160, 2, |_| c);
        let spec = WindowSpec::new(6, 3);
        let train = build_panel_windows(&panel.slice(0, 120), &spec, "train").unwrap();
        let val = build_panel_windows(&panel.slice(120, 160), &spec, "val").unwrap();
        let fit = fit_recurrent_forecaster(
            &train,
            &val,
            &RecurrentSpec {
                hidden_dim: 8,
                lr: 1e-2,
                batch_size: 16,
                train_stride: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let best = fit.log.iter().find(|e| e.epoch == fit.best_epoch).unwrap();
        assert!(best.val_loss < 1e-3, "{}", best.val_loss);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let panel = noise_panel(80, 3, |t| (t as f64 * 0.3).cos());
        let spec = WindowSpec::new(5, 2);
        let train = build_panel_windows(&panel.slice(0, 60), &spec, "train").unwrap();
        let val = build_panel_windows(&panel.slice(60, 80), &spec, "val").unwrap();
        let cfg = RecurrentSpec {
            hidden_dim: 4,
            epochs: 5,
            train_stride: 2,
            seed: 11,
            ..Default::default()
        };
        let a = fit_recurrent_forecaster(&train, &val, &cfg).unwrap();
        let b = fit_recurrent_forecaster(&train, &val, &cfg).unwrap();
        assert_eq!(a, b);
        let c = fit_recurrent_forecaster(&train, &val, &RecurrentSpec { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn invalid_spec_rejected() {
        let bad = RecurrentSpec {
            lr: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().is_validation());
    }
}

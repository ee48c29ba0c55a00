use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{
    predict_sequence, standardized_rows, treatment_loss, unroll, Carry, FactorModelConfig, FactorModelParams,
    Standardizer, TapedParams,
};
use crate::error::{Error, Result};
use crate::eval::r2_score;
use crate::numerics::{AdamConfig, AdamState, Tape, Tensor};
use crate::scm::{fmt_f64, Panel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Per-treatment R² on the validation split (`None` = zero variance).
    pub val_r2: Vec<Option<f64>>,
    /// Same, on the training split with end-of-epoch parameters.
    pub train_r2: Vec<Option<f64>>,
}

impl EpochLog {
    pub fn mean_val_r2(&self) -> Option<f64> {
        mean_defined(&self.val_r2)
    }
}

pub(crate) fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = v.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainingLog {
    pub fn best(&self) -> Option<&EpochLog> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    /// `epoch,train_loss,val_loss,r2_1..r2_k`; undefined R² is written as `undefined`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let k = self.epochs.first().map_or(0, |e| e.val_r2.len());
        let mut header = vec!["epoch".to_string(), "train_loss".into(), "val_loss".into()];
        header.extend((1..=k).map(|j| format!("r2_{j}")));
        writeln!(w, "{}", header.join(","))?;
        for e in &self.epochs {
            let mut line = format!("{},{},{}", e.epoch, fmt_f64(e.train_loss), fmt_f64(e.val_loss));
            for r in &e.val_r2 {
                line.push(',');
                match r {
                    Some(v) => line.push_str(&fmt_f64(*v)),
                    None => line.push_str("undefined"),
                }
            }
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-column R² of standardized predictions against standardized truth.
fn column_r2(pred: &Tensor, truth: &[Vec<f64>], rows: std::ops::Range<usize>) -> Result<Vec<Option<f64>>> {
    (0..pred.cols())
        .map(|j| {
            let p: Vec<f64> = rows.clone().map(|t| pred.get(t, j)).collect();
            let y: Vec<f64> = rows.clone().map(|t| truth[t][j]).collect();
            r2_score(&p, &y)
        })
        .collect()
}

fn sequence_loss(pred: &Tensor, truth: &[Vec<f64>], rows: std::ops::Range<usize>) -> f64 {
    let n = rows.len().max(1) as f64;
    let mut s = 0.0;
    for t in rows {
        for (j, a) in truth[t].iter().enumerate() {
            let d = pred.get(t, j) - a;
            s += d * d;
        }
    }
    s / n
}

/// Per-treatment R² over every row of `panel`, in raw units.
pub fn treatment_r2(params: &FactorModelParams, panel: &Panel) -> Result<Vec<Option<f64>>> {
    let out = predict_sequence(params, panel)?;
    (0..params.n_treatments())
        .map(|j| {
            let pred: Vec<f64> = (0..panel.len()).map(|t| params.a_scale.invert(j, out.a_hat.get(t, j))).collect();
            r2_score(&pred, &panel.a().column(j))
        })
        .collect()
}

fn divergence(err: Error, epoch: usize, log: &TrainingLog) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Divergence {
            epoch,
            last_finite: log.epochs.last().map(|e| e.epoch),
        },
        other => other,
    }
}

/// Fits the factor model with truncated BPTT and early stopping on
/// validation loss; returns the best-validation parameters.
///
/// Validation predictions are made by running the model over `train`
/// followed by `val`, so the recurrent state entering the validation rows
/// has seen the training history.
pub fn train_factor_model(
    train: &Panel,
    val: &Panel,
    cfg: &FactorModelConfig,
) -> Result<(FactorModelParams, TrainingLog)> {
    cfg.validate()?;
    if train.len() <= cfg.window_len {
        return Err(Error::config(
            "window_len",
            format!("training split has {} rows, need more than {}", train.len(), cfg.window_len),
        ));
    }
    if !val.is_empty() && (val.n_covariates() != train.n_covariates() || val.n_treatments() != train.n_treatments())
    {
        return Err(Error::Dimension("train and validation panels differ in width".into()));
    }

    let mut params = FactorModelParams::init(cfg, train.n_covariates(), train.n_treatments())?;
    params.x_scale = Standardizer::fit(train.x());
    params.a_scale = Standardizer::fit(train.a());
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &params.tensors())?;

    let (xs, as_) = standardized_rows(&params, train);
    let combined = if val.is_empty() { train.clone() } else { train.concat(val)? };
    let (_, combined_a) = standardized_rows(&params, &combined);
    let train_rows = 0..train.len();
    let val_rows = train.len()..combined.len();

    let mut log = TrainingLog::default();
    let mut best: Option<(f64, FactorModelParams)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let mut carry = Carry::Start;
        let mut weighted = 0.0;
        let mut start = 0;
        while start < train.len() {
            let end = (start + cfg.window_len).min(train.len());
            let mut tape = Tape::new();
            let p = TapedParams::register(&mut tape, &params, true);
            let step = (|| -> Result<(f64, Vec<Tensor>, Carry)> {
                let out = unroll(&mut tape, &p, &params, &xs[start..end], &as_[start..end], carry.clone())?;
                let loss = treatment_loss(&mut tape, &out.preds, &as_[start..end])?;
                let grads = tape.backward(loss)?;
                let g = p.ids.iter().map(|&id| grads.wrt(id)).collect::<Result<Vec<_>>>()?;
                Ok((tape.value(loss).data()[0], g, out.carry))
            })();
            let (loss, grads, next) = step.map_err(|e| divergence(e, epoch, &log))?;
            adam.step(&mut params.tensors_mut(), &grads)?;
            weighted += loss * (end - start) as f64;
            carry = next;
            start = end;
        }
        let train_loss = weighted / train.len() as f64;

        let out = predict_sequence(&params, &combined).map_err(|e| divergence(e, epoch, &log))?;
        let eval_rows = if val.is_empty() { train_rows.clone() } else { val_rows.clone() };
        let val_loss = sequence_loss(&out.a_hat, &combined_a, eval_rows.clone());
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                last_finite: log.epochs.last().map(|e| e.epoch),
            });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_r2: column_r2(&out.a_hat, &combined_a, eval_rows)?,
            train_r2: column_r2(&out.a_hat, &combined_a, train_rows.clone())?,
        });

        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    Ok((best_params, log))
}

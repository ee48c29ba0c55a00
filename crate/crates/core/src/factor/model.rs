use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{init_uniform, NodeId, Tape, Tensor};
use crate::scm::Panel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorModelConfig {
    pub hidden_dim: usize,
    pub z_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Truncated-BPTT window (also the stride).
    pub window_len: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for FactorModelConfig {
    fn default() -> Self {
        FactorModelConfig {
            hidden_dim: 8,
            z_dim: 1,
            epochs: 60,
            lr: 5e-3,
            window_len: 32,
            patience: 10,
            seed: 0,
        }
    }
}

impl FactorModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.z_dim < 1 {
            return Err(Error::config("z_dim", "must be >= 1"));
        }
        if self.hidden_dim < self.z_dim {
            return Err(Error::config("hidden_dim", "must be >= z_dim"));
        }
        if self.window_len < 2 {
            return Err(Error::config("window_len", "must be >= 2"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be > 0"));
        }
        Ok(())
    }
}

/// Per-column affine standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(m: &Tensor) -> Standardizer {
        let (rows, cols) = (m.rows(), m.cols());
        let mut mean = vec![0.0; cols];
        let mut std = vec![0.0; cols];
        for c in 0..cols {
            let col = m.column(c);
            let mu = col.iter().sum::<f64>() / rows.max(1) as f64;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / rows.max(1) as f64;
            mean[c] = mu;
            // Constant columns pass through centred but unscaled.
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Standardizer { mean, std }
    }

    pub fn identity(cols: usize) -> Standardizer {
        Standardizer {
            mean: vec![0.0; cols],
            std: vec![1.0; cols],
        }
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply(&self, m: &Tensor) -> Tensor {
        let mut out = Vec::with_capacity(m.len());
        for r in 0..m.rows() {
            out.extend(self.apply_row(m.row(r)));
        }
        Tensor::matrix(m.rows(), m.cols(), out).expect("same shape")
    }

    pub fn invert(&self, col: usize, v: f64) -> f64 {
        v * self.std[col] + self.mean[col]
    }
}

/// One treatment head: `concat(x_t, z_t) · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Recurrent cell, z projection, per-treatment heads and the trainable
/// initial context `L`.
///
/// The cell is `h_t = tanh(concat(ẑ_{t−1}, x_{t−1}, a_{t−1}, L) · w_in + h_{t−1} · w_hh + b_h)`
/// with `ẑ_t = h_t · w_z + b_z`. The first step sees only `L`: the previous
/// data slots are zero and `h_0 = L · w_init`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModelParams {
    pub config: FactorModelConfig,
    pub x_scale: Standardizer,
    pub a_scale: Standardizer,
    pub w_in: Tensor,
    pub w_hh: Tensor,
    pub b_h: Tensor,
    pub w_init: Tensor,
    pub w_z: Tensor,
    pub b_z: Tensor,
    pub context: Tensor,
    pub heads: Vec<Head>,
}

impl FactorModelParams {
    /// Randomly initialized parameters for a panel with the given widths.
    pub fn init(config: &FactorModelConfig, n_covariates: usize, n_treatments: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (h, z) = (config.hidden_dim, config.z_dim);
        let ctx = h;
        let fan_in = z + n_covariates + n_treatments + ctx;
        let w_in = init_uniform(&mut rng, fan_in, h, fan_in);
        let w_hh = init_uniform(&mut rng, h, h, h);
        let b_h = init_uniform(&mut rng, 1, h, h);
        let w_init = init_uniform(&mut rng, ctx, h, ctx);
        let w_z = init_uniform(&mut rng, h, z, h);
        let b_z = init_uniform(&mut rng, 1, z, h);
        let heads = (0..n_treatments)
            .map(|_| Head {
                weight: init_uniform(&mut rng, n_covariates + z, 1, n_covariates + z),
                bias: init_uniform(&mut rng, 1, 1, n_covariates + z),
            })
            .collect();
        let normal = Normal::new(0.0, 0.1).expect("valid");
        let context = Tensor::row_vector((0..ctx).map(|_| normal.sample(&mut rng)).collect());
        Ok(FactorModelParams {
            config: config.clone(),
            x_scale: Standardizer::identity(n_covariates),
            a_scale: Standardizer::identity(n_treatments),
            w_in,
            w_hh,
            b_h,
            w_init,
            w_z,
            b_z,
            context,
            heads,
        })
    }

    pub fn n_covariates(&self) -> usize {
        self.x_scale.mean.len()
    }

    pub fn n_treatments(&self) -> usize {
        self.heads.len()
    }

    pub fn z_dim(&self) -> usize {
        self.config.z_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn names(&self) -> Vec<String> {
        let mut n: Vec<String> = ["w_in", "w_hh", "b_h", "w_init", "w_z", "b_z", "context"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for j in 1..=self.heads.len() {
            n.push(format!("head_{j}.weight"));
            n.push(format!("head_{j}.bias"));
        }
        n
    }

    /// Trainable tensors in [`names`](Self::names) order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![
            &self.w_in,
            &self.w_hh,
            &self.b_h,
            &self.w_init,
            &self.w_z,
            &self.b_z,
            &self.context,
        ];
        for head in &self.heads {
            v.push(&head.weight);
            v.push(&head.bias);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.w_in,
            &mut self.w_hh,
            &mut self.b_h,
            &mut self.w_init,
            &mut self.w_z,
            &mut self.b_z,
            &mut self.context,
        ];
        for head in &mut self.heads {
            v.push(&mut head.weight);
            v.push(&mut head.bias);
        }
        v
    }

    /// All trainable values concatenated in [`names`](Self::names) order.
    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::row_vector(data)
    }

    pub fn with_flat(&self, flat: &Tensor) -> Result<Self> {
        let mut out = self.clone();
        let total: usize = out.tensors().iter().map(|t| t.len()).sum();
        if flat.len() != total {
            return Err(Error::LengthMismatch {
                left: flat.len(),
                right: total,
            });
        }
        let mut offset = 0;
        for t in out.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    pub(crate) fn check_panel(&self, panel: &Panel) -> Result<()> {
        if panel.n_covariates() != self.n_covariates() || panel.n_treatments() != self.n_treatments() {
            return Err(Error::Dimension(format!(
                "model expects {} covariates / {} treatments, panel has {} / {}",
                self.n_covariates(),
                self.n_treatments(),
                panel.n_covariates(),
                panel.n_treatments()
            )));
        }
        Ok(())
    }
}

/// Parameter node ids on one tape.
pub(crate) struct TapedParams {
    pub ids: Vec<NodeId>,
}

impl TapedParams {
    pub fn register(tape: &mut Tape, params: &FactorModelParams, trainable: bool) -> TapedParams {
        let ids = params
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        TapedParams { ids }
    }

    fn w_in(&self) -> NodeId {
        self.ids[0]
    }
    fn w_hh(&self) -> NodeId {
        self.ids[1]
    }
    fn b_h(&self) -> NodeId {
        self.ids[2]
    }
    fn w_init(&self) -> NodeId {
        self.ids[3]
    }
    fn w_z(&self) -> NodeId {
        self.ids[4]
    }
    fn b_z(&self) -> NodeId {
        self.ids[5]
    }
    fn context(&self) -> NodeId {
        self.ids[6]
    }
    pub fn head(&self, j: usize) -> (NodeId, NodeId) {
        (self.ids[7 + 2 * j], self.ids[8 + 2 * j])
    }
}

/// Recurrent state handed from one chunk to the next (values only, so
/// gradients stop at the chunk boundary).
#[derive(Debug, Clone)]
pub(crate) enum Carry {
    Start,
    State {
        h: Tensor,
        z: Tensor,
        x: Tensor,
        a: Tensor,
    },
}

pub(crate) struct Unrolled {
    pub z: Vec<NodeId>,
    pub preds: Vec<Vec<NodeId>>,
    pub carry: Carry,
}

/// Unrolls the cell over standardized rows `xs[i]`, `as_[i]` and evaluates
/// every head at every step.
pub(crate) fn unroll(
    tape: &mut Tape,
    p: &TapedParams,
    params: &FactorModelParams,
    xs: &[Vec<f64>],
    as_: &[Vec<f64>],
    carry: Carry,
) -> Result<Unrolled> {
    let zd = params.z_dim();
    let (kx, ka) = (params.n_covariates(), params.n_treatments());
    let (mut h, mut z_prev, mut x_prev, mut a_prev) = match carry {
        Carry::Start => {
            let h0 = tape.matmul(p.context(), p.w_init())?;
            let z0 = tape.constant(Tensor::zeros(&[1, zd]));
            let x0 = tape.constant(Tensor::zeros(&[1, kx]));
            let a0 = tape.constant(Tensor::zeros(&[1, ka]));
            (h0, z0, x0, a0)
        }
        Carry::State { h, z, x, a } => (
            tape.constant(h),
            tape.constant(z),
            tape.constant(x),
            tape.constant(a),
        ),
    };

    let mut zs = Vec::with_capacity(xs.len());
    let mut preds = Vec::with_capacity(xs.len());
    for (x_row, a_row) in xs.iter().zip(as_) {
        let inp = tape.concat_cols(&[z_prev, x_prev, a_prev, p.context()])?;
        let u = tape.matmul(inp, p.w_in())?;
        let r = tape.matmul(h, p.w_hh())?;
        let s = tape.add(u, r)?;
        let s = tape.add(s, p.b_h())?;
        h = tape.tanh(s)?;
        let zp = tape.matmul(h, p.w_z())?;
        let z = tape.add(zp, p.b_z())?;

        let x_t = tape.constant(Tensor::row_vector(x_row.clone()));
        let feat = tape.concat_cols(&[x_t, z])?;
        let mut step_preds = Vec::with_capacity(ka);
        for j in 0..ka {
            let (w, b) = p.head(j);
            let o = tape.matmul(feat, w)?;
            step_preds.push(tape.add(o, b)?);
        }
        preds.push(step_preds);
        zs.push(z);

        z_prev = z;
        x_prev = x_t;
        a_prev = tape.constant(Tensor::row_vector(a_row.clone()));
    }
    let carry = Carry::State {
        h: tape.value(h).clone(),
        z: tape.value(z_prev).clone(),
        x: tape.value(x_prev).clone(),
        a: tape.value(a_prev).clone(),
    };
    Ok(Unrolled { z: zs, preds, carry })
}

/// Mean over steps of the squared treatment error summed over heads.
pub(crate) fn treatment_loss(tape: &mut Tape, preds: &[Vec<NodeId>], as_: &[Vec<f64>]) -> Result<NodeId> {
    let mut terms = Vec::new();
    for (step, a_row) in preds.iter().zip(as_) {
        for (&pred, &target) in step.iter().zip(a_row) {
            let t = tape.constant(Tensor::matrix(1, 1, vec![target])?);
            let d = tape.sub(pred, t)?;
            terms.push(tape.square(d)?);
        }
    }
    if terms.is_empty() {
        return Err(Error::Empty("loss over zero steps".into()));
    }
    let all = tape.concat_cols(&terms)?;
    let total = tape.sum(all)?;
    let scale = tape.constant(Tensor::scalar(1.0 / preds.len() as f64));
    tape.mul(total, scale)
}

pub(crate) fn standardized_rows(params: &FactorModelParams, panel: &Panel) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let xs = (0..panel.len()).map(|t| params.x_scale.apply_row(panel.x().row(t))).collect();
    let as_ = (0..panel.len()).map(|t| params.a_scale.apply_row(panel.a().row(t))).collect();
    (xs, as_)
}

/// Inferred confounder and treatment predictions (model units) at every row.
pub struct SequenceOutput {
    /// T × z_dim
    pub z: Tensor,
    /// T × n_treatments, standardized units
    pub a_hat: Tensor,
}

/// Forward pass over a whole panel in chunks; never touches `params`.
pub fn predict_sequence(params: &FactorModelParams, panel: &Panel) -> Result<SequenceOutput> {
    params.check_panel(panel)?;
    let (xs, as_) = standardized_rows(params, panel);
    let chunk = params.config.window_len.max(2) * 8;
    let mut z = Vec::with_capacity(panel.len() * params.z_dim());
    let mut a_hat = Vec::with_capacity(panel.len() * params.n_treatments());
    let mut carry = Carry::Start;
    let mut start = 0;
    while start < panel.len() {
        let end = (start + chunk).min(panel.len());
        let mut tape = Tape::new();
        let p = TapedParams::register(&mut tape, params, false);
        let out = unroll(&mut tape, &p, params, &xs[start..end], &as_[start..end], carry)?;
        for (zid, step) in out.z.iter().zip(&out.preds) {
            z.extend_from_slice(tape.value(*zid).data());
            a_hat.extend(step.iter().map(|id| tape.value(*id).data()[0]));
        }
        carry = out.carry;
        start = end;
    }
    Ok(SequenceOutput {
        z: Tensor::matrix(panel.len(), params.z_dim(), z)?,
        a_hat: Tensor::matrix(panel.len(), params.n_treatments(), a_hat)?,
    })
}

/// Ẑ for every row: row 0 from `L` alone, row t from row t−1's data and Ẑ.
pub fn infer_z_sequence(params: &FactorModelParams, panel: &Panel) -> Result<Tensor> {
    predict_sequence(params, panel).map(|o| o.z)
}

/// Head outputs for one step, in the panel's raw treatment units.
/// `z_t` is in model units as returned by [`infer_z_sequence`].
pub fn predict_treatments(params: &FactorModelParams, x_t: &[f64], z_t: &[f64]) -> Result<Vec<f64>> {
    if x_t.len() != params.n_covariates() || z_t.len() != params.z_dim() {
        return Err(Error::Dimension(format!(
            "expected x of length {} and z of length {}, got {} and {}",
            params.n_covariates(),
            params.z_dim(),
            x_t.len(),
            z_t.len()
        )));
    }
    let mut feat = params.x_scale.apply_row(x_t);
    feat.extend_from_slice(z_t);
    Ok(params
        .heads
        .iter()
        .enumerate()
        .map(|(j, head)| {
            let s: f64 = feat.iter().zip(head.weight.data()).map(|(f, w)| f * w).sum();
            params.a_scale.invert(j, s + head.bias.data()[0])
        })
        .collect())
}

/// Full-sequence loss (no truncation) and its gradient per trainable tensor.
pub fn factor_loss_and_grad(params: &FactorModelParams, panel: &Panel) -> Result<(f64, Vec<Tensor>)> {
    params.check_panel(panel)?;
    let (xs, as_) = standardized_rows(params, panel);
    let mut tape = Tape::new();
    let p = TapedParams::register(&mut tape, params, true);
    let out = unroll(&mut tape, &p, params, &xs, &as_, Carry::Start)?;
    let loss = treatment_loss(&mut tape, &out.preds, &as_)?;
    let grads = tape.backward(loss)?;
    let g = p.ids.iter().map(|&id| grads.wrt(id)).collect::<Result<Vec<_>>>()?;
    Ok((tape.value(loss).data()[0], g))
}

pub fn factor_loss(params: &FactorModelParams, panel: &Panel) -> Result<f64> {
    params.check_panel(panel)?;
    let (xs, as_) = standardized_rows(params, panel);
    let mut tape = Tape::new();
    let p = TapedParams::register(&mut tape, params, false);
    let out = unroll(&mut tape, &p, params, &xs, &as_, Carry::Start)?;
    let loss = treatment_loss(&mut tape, &out.preds, &as_)?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Serialize, Deserialize)]
struct NamedWeight {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsDocument {
    config: FactorModelConfig,
    n_covariates: usize,
    n_treatments: usize,
    x_scale: Standardizer,
    a_scale: Standardizer,
    weights: Vec<NamedWeight>,
}

impl FactorModelParams {
    pub fn to_json(&self) -> Result<String> {
        let doc = ParamsDocument {
            config: self.config.clone(),
            n_covariates: self.n_covariates(),
            n_treatments: self.n_treatments(),
            x_scale: self.x_scale.clone(),
            a_scale: self.a_scale.clone(),
            weights: self
                .names()
                .into_iter()
                .zip(self.tensors())
                .map(|(name, t)| NamedWeight {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ParamsDocument = serde_json::from_str(s)?;
        let mut params = FactorModelParams::init(&doc.config, doc.n_covariates, doc.n_treatments)?;
        params.x_scale = doc.x_scale;
        params.a_scale = doc.a_scale;
        let names = params.names();
        if doc.weights.len() != names.len() {
            return Err(Error::Dimension(format!(
                "expected {} weights, document has {}",
                names.len(),
                doc.weights.len()
            )));
        }
        for ((name, slot), w) in names.iter().zip(params.tensors_mut()).zip(doc.weights) {
            if &w.name != name || w.shape != slot.shape() {
                return Err(Error::Dimension(format!(
                    "weight {} {:?} does not match expected {name} {:?}",
                    w.name,
                    w.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(w.shape, w.data)?;
        }
        Ok(params)
    }
}

//! Softmax decoder over the latent space.
//!
//! A decoder maps each latent row to a distribution over `outputs` labels.
//! Classification samples have one row; sequence-labeling samples have one
//! row per token and are scored per token. Parameters live in one flat
//! vector so optimizers, checkpoints and gradient checks share a layout.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::store::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADEC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Linear,
    /// One tanh hidden layer of the given width.
    Hidden { width: usize },
}

#[derive(Debug)]
pub struct DecoderModel {
    arch: Architecture,
    input_dim: usize,
    outputs: usize,
    params: Vec<f64>,
    evals: AtomicU64,
}

impl Clone for DecoderModel {
    fn clone(&self) -> Self {
        DecoderModel {
            arch: self.arch,
            input_dim: self.input_dim,
            outputs: self.outputs,
            params: self.params.clone(),
            evals: AtomicU64::new(self.eval_count()),
        }
    }
}

impl PartialEq for DecoderModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.input_dim == other.input_dim
            && self.outputs == other.outputs
            && self.params == other.params
    }
}

/// Reusable buffers for row evaluation.
#[derive(Clone, Debug)]
pub struct Scratch {
    hidden: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

/// One training example: row-major latent rows and one target per row.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub rows: &'a [f64],
    pub targets: &'a [u32],
}

impl DecoderModel {
    /// All-zero parameters.
    pub fn zeros(arch: Architecture, input_dim: usize, outputs: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("decoder input dim must be positive".into()));
        }
        if outputs < 2 {
            return Err(Error::Config("decoder needs at least two outputs".into()));
        }
        if let Architecture::Hidden { width: 0 } = arch {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        let n = param_count(arch, input_dim, outputs);
        Ok(DecoderModel {
            arch,
            input_dim,
            outputs,
            params: vec![0.0; n],
            evals: AtomicU64::new(0),
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random(arch: Architecture, input_dim: usize, outputs: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch, input_dim, outputs)?;
        let mut r = rng::stream(seed, rng::Stream::DecoderInit);
        let mut fill = |w: &mut [f64], fan_in: usize, fan_out: usize| {
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in w {
                *v = r.random_range(-s..s);
            }
        };
        let (d, c) = (input_dim, outputs);
        match arch {
            Architecture::Linear => fill(&mut model.params[..c * d], d, c),
            Architecture::Hidden { width: h } => {
                fill(&mut model.params[..h * d], d, h);
                let w2 = h * d + h;
                fill(&mut model.params[w2..w2 + c * h], h, c);
            }
        }
        Ok(model)
    }

    pub fn from_params(
        arch: Architecture,
        input_dim: usize,
        outputs: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut model = Self::zeros(arch, input_dim, outputs)?;
        if params.len() != model.params.len() {
            return Err(Error::Shape {
                expected: model.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Number of single-row forward passes evaluated so far.
    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn scratch(&self) -> Scratch {
        let h = match self.arch {
            Architecture::Linear => 0,
            Architecture::Hidden { width } => width,
        };
        Scratch {
            hidden: vec![0.0; h],
            logits: vec![0.0; self.outputs],
            probs: vec![0.0; self.outputs],
        }
    }

    fn check_row(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Shape {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_rows(&self, rows: &[f64]) -> Result<usize> {
        if rows.is_empty() || rows.len() % self.input_dim != 0 {
            return Err(Error::Shape {
                expected: self.input_dim,
                got: rows.len(),
            });
        }
        Ok(rows.len() / self.input_dim)
    }

    /// Forward pass of one row into `s.logits` (and `s.hidden`).
    fn forward(&self, x: &[f64], s: &mut Scratch) {
        self.evals.fetch_add(1, Ordering::Relaxed);
        let (d, c) = (self.input_dim, self.outputs);
        let p = &self.params;
        match self.arch {
            Architecture::Linear => {
                let (w, b) = p.split_at(c * d);
                affine(w, b, x, &mut s.logits);
            }
            Architecture::Hidden { width: h } => {
                let (w1, rest) = p.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                affine(w1, b1, x, &mut s.hidden);
                for a in s.hidden.iter_mut() {
                    *a = a.tanh();
                }
                affine(w2, b2, &s.hidden, &mut s.logits);
            }
        }
    }

    /// Softmax of one row into the scratch buffer.
    pub fn probs_into<'s>(&self, x: &[f64], s: &'s mut Scratch) -> Result<&'s [f64]> {
        self.check_row(x)?;
        self.forward(x, s);
        softmax(&s.logits, &mut s.probs)?;
        Ok(&s.probs)
    }

    /// Class distribution for one latent row.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut s = self.scratch();
        Ok(self.probs_into(x, &mut s)?.to_vec())
    }

    /// One distribution per row of a row-major block.
    pub fn predict_proba_rows(&self, rows: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_rows(rows)?;
        let mut s = self.scratch();
        rows.chunks_exact(self.input_dim)
            .map(|x| self.probs_into(x, &mut s).map(<[f64]>::to_vec))
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_row(x)?;
        let mut s = self.scratch();
        self.forward(x, &mut s);
        if s.logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(s.logits)
    }

    /// Arg-max label of one row; ties go to the smaller index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Arg-max label of every row.
    pub fn predict_rows(&self, rows: &[f64]) -> Result<Vec<usize>> {
        self.check_rows(rows)?;
        rows.chunks_exact(self.input_dim)
            .map(|x| self.predict(x))
            .collect()
    }

    /// Logits and their Jacobian (`outputs x input_dim`, row-major) at `x`.
    pub fn logits_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_row(x)?;
        let (d, c) = (self.input_dim, self.outputs);
        let mut s = self.scratch();
        self.forward(x, &mut s);
        if s.logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let jac = match self.arch {
            Architecture::Linear => self.params[..c * d].to_vec(),
            Architecture::Hidden { width: h } => {
                let w1 = &self.params[..h * d];
                let w2 = &self.params[h * d + h..h * d + h + c * h];
                let mut jac = vec![0.0; c * d];
                for k in 0..c {
                    let out = &mut jac[k * d..(k + 1) * d];
                    for j in 0..h {
                        let g = w2[k * h + j] * (1.0 - s.hidden[j] * s.hidden[j]);
                        if g != 0.0 {
                            for (o, w) in out.iter_mut().zip(&w1[j * d..(j + 1) * d]) {
                                *o += g * w;
                            }
                        }
                    }
                }
                jac
            }
        };
        Ok((s.logits, jac))
    }

    /// Difference between the two largest class probabilities of one row.
    pub fn margin(&self, x: &[f64]) -> Result<f64> {
        if self.outputs < 2 {
            return Err(Error::Config("margin needs at least two classes".into()));
        }
        Ok(margin_of(&self.predict_proba(x)?))
    }

    fn check_targets(&self, targets: &[u32], n: usize) -> Result<()> {
        if targets.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= self.outputs) {
            return Err(Error::Range {
                label: bad,
                arity: self.outputs,
            });
        }
        Ok(())
    }

    /// Cross entropy summed over rows, with optional gradients.
    ///
    /// `param_grad` is accumulated into (scaled by `scale`); `row_grads`, if
    /// given, receives the per-row input gradients (also scaled).
    pub fn backward(
        &self,
        ex: Example<'_>,
        scale: f64,
        mut param_grad: Option<&mut [f64]>,
        mut row_grads: Option<&mut [f64]>,
    ) -> Result<f64> {
        let n = self.check_rows(ex.rows)?;
        self.check_targets(ex.targets, n)?;
        if let Some(g) = param_grad.as_deref() {
            if g.len() != self.params.len() {
                return Err(Error::Shape {
                    expected: self.params.len(),
                    got: g.len(),
                });
            }
        }
        if let Some(g) = row_grads.as_deref() {
            if g.len() != ex.rows.len() {
                return Err(Error::Shape {
                    expected: ex.rows.len(),
                    got: g.len(),
                });
            }
        }
        let (d, c) = (self.input_dim, self.outputs);
        let mut s = self.scratch();
        let mut dz = vec![0.0; c];
        let mut dhid = vec![0.0; s.hidden.len()];
        let mut loss = 0.0;
        for (r, x) in ex.rows.chunks_exact(d).enumerate() {
            let y = ex.targets[r] as usize;
            self.forward(x, &mut s);
            let lse = log_sum_exp(&s.logits)?;
            loss += lse - s.logits[y];
            for k in 0..c {
                dz[k] = scale * ((s.logits[k] - lse).exp() - if k == y { 1.0 } else { 0.0 });
            }
            let mut dx = row_grads
                .as_deref_mut()
                .map(|g| &mut g[r * d..(r + 1) * d]);
            if let Some(dx) = dx.as_deref_mut() {
                dx.fill(0.0);
            }
            match self.arch {
                Architecture::Linear => {
                    let w = &self.params[..c * d];
                    if let Some(g) = param_grad.as_deref_mut() {
                        let (gw, gb) = g.split_at_mut(c * d);
                        for k in 0..c {
                            axpy(dz[k], x, &mut gw[k * d..(k + 1) * d]);
                            gb[k] += dz[k];
                        }
                    }
                    if let Some(dx) = dx {
                        for k in 0..c {
                            axpy(dz[k], &w[k * d..(k + 1) * d], dx);
                        }
                    }
                }
                Architecture::Hidden { width: h } => {
                    let w1 = &self.params[..h * d];
                    let w2 = &self.params[h * d + h..h * d + h + c * h];
                    for j in 0..h {
                        let mut acc = 0.0;
                        for k in 0..c {
                            acc += w2[k * h + j] * dz[k];
                        }
                        dhid[j] = acc * (1.0 - s.hidden[j] * s.hidden[j]);
                    }
                    if let Some(g) = param_grad.as_deref_mut() {
                        let (gw1, rest) = g.split_at_mut(h * d);
                        let (gb1, rest) = rest.split_at_mut(h);
                        let (gw2, gb2) = rest.split_at_mut(c * h);
                        for j in 0..h {
                            axpy(dhid[j], x, &mut gw1[j * d..(j + 1) * d]);
                            gb1[j] += dhid[j];
                        }
                        for k in 0..c {
                            axpy(dz[k], &s.hidden, &mut gw2[k * h..(k + 1) * h]);
                            gb2[k] += dz[k];
                        }
                    }
                    if let Some(dx) = dx {
                        for j in 0..h {
                            axpy(dhid[j], &w1[j * d..(j + 1) * d], dx);
                        }
                    }
                }
            }
        }
        Ok(loss)
    }

    /// Cross entropy of one sample and its gradient with respect to a
    /// perturbation added to every row (the sum of per-row gradients).
    pub fn loss_and_input_grad(&self, rows: &[f64], targets: &[u32]) -> Result<(f64, Vec<f64>)> {
        let mut per_row = vec![0.0; rows.len()];
        let loss = self.backward(
            Example { rows, targets },
            1.0,
            None,
            Some(&mut per_row),
        )?;
        let d = self.input_dim;
        let mut grad = vec![0.0; d];
        for g in per_row.chunks_exact(d) {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok((loss, grad))
    }

    /// Cross entropy of one sample and its parameter gradient.
    pub fn loss_and_param_grad(&self, rows: &[f64], targets: &[u32]) -> Result<(f64, Vec<f64>)> {
        let mut g = vec![0.0; self.params.len()];
        let loss = self.backward(Example { rows, targets }, 1.0, Some(&mut g), None)?;
        Ok((loss, g))
    }

    /// Mean per-sample loss and mean parameter gradient over a batch.
    pub fn batch_loss_and_grad(&self, batch: &[Example<'_>]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut g = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for ex in batch {
            loss += self.backward(*ex, scale, Some(&mut g), None)?;
        }
        Ok((loss * scale, g))
    }

    /// Mean per-sample loss over a batch.
    pub fn batch_loss(&self, batch: &[Example<'_>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut loss = 0.0;
        for ex in batch {
            loss += self.backward(*ex, 1.0, None, None)?;
        }
        Ok(loss / batch.len() as f64)
    }

    /// Serializes to the `ADEC` checkpoint layout (parameters as LE `f32`).
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let (arch, width) = match self.arch {
            Architecture::Linear => (0u32, 0u32),
            Architecture::Hidden { width } => (1, width as u32),
        };
        let mut out = Vec::with_capacity(32 + self.params.len() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&arch.to_le_bytes());
        out.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&width.to_le_bytes());
        out.extend_from_slice(&(self.outputs as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("decoder checkpoint: {m}"));
        if bytes.len() < 32 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic or short header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(4) != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        let arch = match (u32_at(8), u32_at(16)) {
            (0, _) => Architecture::Linear,
            (1, w) => Architecture::Hidden { width: w as usize },
            _ => return Err(bad("unknown architecture")),
        };
        let (d, c) = (u32_at(12) as usize, u32_at(20) as usize);
        let n = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        if bytes.len() != 32 + n * 4 {
            return Err(bad("payload length disagrees with header"));
        }
        let params = bytes[32..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Self::from_params(arch, d, c, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&bytes)
    }
}

pub fn param_count(arch: Architecture, d: usize, c: usize) -> usize {
    match arch {
        Architecture::Linear => c * d + c,
        Architecture::Hidden { width: h } => h * d + h + c * h + c,
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        *o = b[k] + dot(&w[k * d..(k + 1) * d], x);
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(z: &[f64]) -> Result<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64], out: &mut [f64]) -> Result<()> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

/// Largest minus second-largest entry of a distribution.
pub fn margin_of(probs: &[f64]) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in probs {
        if p > a {
            b = a;
            a = p;
        } else if p > b {
            b = p;
        }
    }
    (a - b).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Convergence training stops once the loss improved by less than this
    /// over `plateau_window` steps...
    pub plateau_tolerance: f64,
    pub plateau_window: usize,
    /// ...or after this many full-batch steps.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: Architecture::Linear,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
            plateau_tolerance: 1e-4,
            plateau_window: 20,
            max_steps: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.plateau_window == 0 {
            return Err(Error::Config("plateau window must be at least 1".into()));
        }
        Ok(())
    }
}

/// First-order optimizer over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let n = if kind == OptimizerKind::Adam { n_params } else { 0 };
        Optimizer {
            kind,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn for_model(config: &TrainConfig, model: &DecoderModel) -> Self {
        Self::new(config.optimizer, config.learning_rate, model.num_params())
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => axpy(-self.lr, grad, params),
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mh = self.m[i] / bc1;
                    let vh = self.v[i] / bc2;
                    params[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// One optimizer step on the mean batch loss. Returns the pre-step loss.
/// Parameters are left untouched if the loss or gradient is not finite.
pub fn train_step(
    model: &mut DecoderModel,
    optimizer: &mut Optimizer,
    batch: &[Example<'_>],
) -> Result<f64> {
    let (loss, grad) = model.batch_loss_and_grad(batch)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite training loss {loss}")));
    }
    optimizer.step(&mut model.params, &grad);
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
}

/// Full-batch training until the loss plateaus.
pub fn train_to_plateau(
    model: &mut DecoderModel,
    batch: &[Example<'_>],
    config: &TrainConfig,
) -> Result<TrainSummary> {
    config.validate()?;
    let mut opt = Optimizer::for_model(config, model);
    let mut history = Vec::with_capacity(config.max_steps.min(4096));
    for step in 0..config.max_steps {
        let loss = train_step(model, &mut opt, batch)?;
        history.push(loss);
        if step >= config.plateau_window
            && history[step - config.plateau_window] - loss < config.plateau_tolerance
        {
            break;
        }
    }
    let final_loss = model.batch_loss(batch)?;
    Ok(TrainSummary {
        steps: history.len(),
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let m = DecoderModel::zeros(Architecture::Linear, 3, 4).unwrap();
        let p = m.predict_proba(&[0.3, -2.0, 7.0]).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn binary_boundary_point_is_half() {
        let m = DecoderModel::from_params(
            Architecture::Linear,
            2,
            2,
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let p = m.predict_proba(&[0.0, 5.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn probabilities_match_direct_softmax() {
        let m = DecoderModel::random(Architecture::Linear, 5, 3, 11).unwrap();
        let x = [0.5, -1.0, 2.0, 0.1, -0.3];
        let p = m.predict_proba(&x).unwrap();
        let w = m.params();
        let z: Vec<f64> = (0..3)
            .map(|k| (0..5).map(|j| w[k * 5 + j] * x[j]).sum::<f64>() + w[15 + k])
            .collect();
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        for k in 0..3 {
            assert!((p[k] - z[k].exp() / s).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_input_gradient_example() {
        let m = DecoderModel::from_params(
            Architecture::Linear,
            2,
            2,
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let (_, g) = m.loss_and_input_grad(&[1.0, 1.0], &[1]).unwrap();
        assert!((g[0] - sigmoid(1.0)).abs() < 1e-12);
        assert!(g[1].abs() < 1e-15);
    }

    #[test]
    fn confident_correct_prediction_has_vanishing_loss() {
        let m = DecoderModel::from_params(
            Architecture::Linear,
            1,
            2,
            vec![100.0, -100.0, 0.0, 0.0],
        )
        .unwrap();
        let (loss, g) = m.loss_and_input_grad(&[1.0], &[0]).unwrap();
        assert!(loss < 1e-80);
        assert!(g[0].abs() < 1e-70);
    }

    #[test]
    fn invalid_label_and_shape_errors() {
        let m = DecoderModel::zeros(Architecture::Linear, 2, 3).unwrap();
        assert!(matches!(
            m.loss_and_input_grad(&[0.0, 0.0], &[3]),
            Err(Error::Range { label: 3, arity: 3 })
        ));
        assert!(matches!(m.predict_proba(&[0.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_logits_are_numeric_errors() {
        let m = DecoderModel::zeros(Architecture::Linear, 1, 2).unwrap();
        assert!(matches!(m.predict_proba(&[f64::NAN]), Err(Error::Numeric(_))));
    }

    #[test]
    fn margin_examples() {
        assert!((margin_of(&[0.7, 0.3]) - 0.4).abs() < 1e-12);
        assert_eq!(margin_of(&[0.25; 4]), 0.0);
        assert!((margin_of(&[0.5, 0.3, 0.2]) - 0.2).abs() < 1e-12);
        assert!((margin_of(&[0.2, 0.5, 0.3]) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut m = DecoderModel::random(Architecture::Hidden { width: 4 }, 3, 2, 5).unwrap();
        let before = m.params().to_vec();
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, 0.0, m.num_params());
            let rows = [1.0, 2.0, -1.0];
            train_step(&mut m, &mut opt, &[Example { rows: &rows, targets: &[1] }]).unwrap();
            assert_eq!(m.params(), &before[..]);
        }
    }

    #[test]
    fn separable_toy_loss_decreases_strictly() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut data = Vec::new();
        for i in 0..64 {
            let y = (i % 2) as u32;
            let c = if y == 0 { -2.0 } else { 2.0 };
            data.push(([c + r.random_range(-0.5..0.5), r.random_range(-1.0..1.0)], [y]));
        }
        let batch: Vec<Example> = data
            .iter()
            .map(|(x, y)| Example { rows: x, targets: y })
            .collect();
        let mut m = DecoderModel::random(Architecture::Linear, 2, 2, 1).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, m.num_params());
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let loss = train_step(&mut m, &mut opt, &batch).unwrap();
            assert!(loss < prev, "{loss} !< {prev}");
            prev = loss;
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut m = DecoderModel::random(Architecture::Hidden { width: 3 }, 2, 3, 9).unwrap();
            let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, m.num_params());
            let rows = [[0.1, 0.2], [-1.0, 0.4], [2.0, -0.7]];
            for step in 0..20u32 {
                let batch: Vec<Example> = rows
                    .iter()
                    .enumerate()
                    .map(|(i, x)| Example {
                        rows: x,
                        targets: std::slice::from_ref(&[0u32, 1, 2][(i + step as usize) % 3]),
                    })
                    .collect();
                train_step(&mut m, &mut opt, &batch).unwrap();
            }
            m.params().to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = DecoderModel::random(Architecture::Hidden { width: 5 }, 4, 3, 2).unwrap();
        let bytes = m.to_checkpoint();
        assert_eq!(&bytes[..4], b"ADEC");
        let back = DecoderModel::from_checkpoint(&bytes).unwrap();
        assert_eq!(back.architecture(), m.architecture());
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(DecoderModel::from_checkpoint(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn jacobian_matches_linear_weights_and_finite_differences() {
        let m = DecoderModel::random(Architecture::Hidden { width: 6 }, 3, 4, 8).unwrap();
        let x = [0.3, -0.2, 0.9];
        let (_, jac) = m.logits_jacobian(&x).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let (zp, zm) = (m.logits(&xp).unwrap(), m.logits(&xm).unwrap());
            for k in 0..4 {
                let fd = (zp[k] - zm[k]) / (2.0 * h);
                assert!((fd - jac[k * 3 + j]).abs() < 1e-7);
            }
        }
    }
}

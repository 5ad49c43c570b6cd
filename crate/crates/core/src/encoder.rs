//! The encoder stack: frozen base embeddings followed by a trainable affine
//! adapter. Every adapter update bumps the stack version so consumers holding
//! latents from an older version can detect that they are stale.

use rand::seq::index;
use rand_chacha::ChaCha8Rng;

use crate::data::Label;
use crate::decoder::{DecoderModel, Example, Optimizer, TrainConfig};
use crate::error::{Error, Result};
use crate::store::EmbeddingStore;

/// A pooled latent vector tagged with the encoder version that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPoint {
    pub version: u64,
    pub values: Vec<f64>,
}

/// Per-row latents of one sample (one row for classification, one per token
/// for labeling).
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub version: u64,
    pub dim: usize,
    pub rows: Vec<f64>,
}

impl EncodedSample {
    pub fn n_rows(&self) -> usize {
        self.rows.len() / self.dim
    }

    /// Arithmetic mean of the rows.
    pub fn pooled(&self) -> LatentPoint {
        LatentPoint {
            version: self.version,
            values: mean_rows(&self.rows, self.dim),
        }
    }
}

pub(crate) fn mean_rows(rows: &[f64], dim: usize) -> Vec<f64> {
    let n = rows.len() / dim;
    if n == 1 {
        return rows.to_vec();
    }
    let mut out = vec![0.0; dim];
    for r in rows.chunks_exact(dim) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let inv = 1.0 / n as f64;
    for o in &mut out {
        *o *= inv;
    }
    out
}

#[derive(Clone, Debug)]
pub struct EncoderStack<'a> {
    store: &'a EmbeddingStore,
    dim: usize,
    /// `dim * dim` matrix (row-major) followed by `dim` bias entries.
    adapter: Vec<f64>,
    version: u64,
}

impl<'a> EncoderStack<'a> {
    /// Identity adapter at version 0.
    pub fn new(store: &'a EmbeddingStore) -> Self {
        let dim = store.dim();
        let mut adapter = vec![0.0; dim * dim + dim];
        for i in 0..dim {
            adapter[i * dim + i] = 1.0;
        }
        EncoderStack {
            store,
            dim,
            adapter,
            version: 0,
        }
    }

    pub fn store(&self) -> &'a EmbeddingStore {
        self.store
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn adapter(&self) -> &[f64] {
        &self.adapter
    }

    /// Replaces the adapter and bumps the version.
    pub fn set_adapter(&mut self, adapter: Vec<f64>) -> Result<()> {
        if adapter.len() != self.adapter.len() {
            return Err(Error::Shape {
                expected: self.adapter.len(),
                got: adapter.len(),
            });
        }
        if adapter.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite adapter parameter".into()));
        }
        self.adapter = adapter;
        self.version += 1;
        Ok(())
    }

    fn apply(&self, base: &[f32], out: &mut [f64]) {
        let d = self.dim;
        let (a, b) = self.adapter.split_at(d * d);
        for (k, o) in out.iter_mut().enumerate() {
            let row = &a[k * d..(k + 1) * d];
            let mut acc = b[k];
            for (w, z) in row.iter().zip(base) {
                acc += w * *z as f64;
            }
            *o = acc;
        }
    }

    /// Adapter output of every row of sample `id`.
    pub fn encode_rows(&self, id: u32) -> Result<EncodedSample> {
        let base = self.store.rows(id)?;
        let mut rows = vec![0.0; base.len()];
        for (z, h) in base.chunks_exact(self.dim).zip(rows.chunks_exact_mut(self.dim)) {
            self.apply(z, h);
        }
        Ok(EncodedSample {
            version: self.version,
            dim: self.dim,
            rows,
        })
    }

    /// The sample's point in latent space: the adapter output, mean-pooled
    /// over tokens for labeling samples.
    pub fn encode(&self, id: u32) -> Result<LatentPoint> {
        Ok(self.encode_rows(id)?.pooled())
    }

    /// Writes the adapter output of a single-row sample into `out`.
    pub fn encode_single_into(&self, id: u32, out: &mut [f64]) -> Result<()> {
        let base = self.store.rows(id)?;
        if base.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                got: base.len(),
            });
        }
        self.apply(base, out);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineTuneSummary {
    pub loss_before: f64,
    pub loss_after: f64,
    pub version: u64,
}

/// Mean cross entropy of `decoder` over `labeled` at the current stack.
pub fn labeled_loss(
    stack: &EncoderStack<'_>,
    decoder: &DecoderModel,
    labeled: &[(u32, Label)],
) -> Result<f64> {
    let encoded = labeled
        .iter()
        .map(|(id, _)| stack.encode_rows(*id))
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<Example> = encoded
        .iter()
        .zip(labeled)
        .map(|(e, (_, l))| Example {
            rows: &e.rows,
            targets: l.targets(),
        })
        .collect();
    decoder.batch_loss(&batch)
}

/// Mean loss and joint gradient `[adapter ; decoder]` over a minibatch.
fn joint_loss_and_grad(
    store: &EmbeddingStore,
    adapter: &[f64],
    decoder: &DecoderModel,
    batch: &[&(u32, Label)],
) -> Result<(f64, Vec<f64>)> {
    let d = store.dim();
    let na = adapter.len();
    let mut grad = vec![0.0; na + decoder.num_params()];
    let scale = 1.0 / batch.len() as f64;
    let (a, b) = adapter.split_at(d * d);
    let mut loss = 0.0;
    for (id, label) in batch {
        let base = store.rows(*id)?;
        let n = base.len() / d;
        let mut h = vec![0.0; base.len()];
        for r in 0..n {
            let z = &base[r * d..(r + 1) * d];
            for k in 0..d {
                let mut acc = b[k];
                for j in 0..d {
                    acc += a[k * d + j] * z[j] as f64;
                }
                h[r * d + k] = acc;
            }
        }
        let mut dh = vec![0.0; h.len()];
        let (ga, gd) = grad.split_at_mut(na);
        loss += decoder.backward(
            Example {
                rows: &h,
                targets: label.targets(),
            },
            scale,
            Some(gd),
            Some(&mut dh),
        )?;
        let (gw, gb) = ga.split_at_mut(d * d);
        for r in 0..n {
            let z = &base[r * d..(r + 1) * d];
            for k in 0..d {
                let g = dh[r * d + k];
                gb[k] += g;
                for j in 0..d {
                    gw[k * d + j] += g * z[j] as f64;
                }
            }
        }
    }
    Ok((loss * scale, grad))
}

/// Jointly trains adapter and decoder for `steps` minibatch steps on the
/// labeled data, then publishes the new adapter under a new version.
///
/// On a numeric failure neither the stack nor the decoder is modified.
pub fn fine_tune(
    stack: &mut EncoderStack<'_>,
    decoder: &mut DecoderModel,
    labeled: &[(u32, Label)],
    steps: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FineTuneSummary> {
    if steps == 0 {
        return Err(Error::Config("fine-tune needs at least one step".into()));
    }
    if labeled.is_empty() {
        return Err(Error::Config("fine-tune needs labeled data".into()));
    }
    config.validate()?;
    let loss_before = labeled_loss(stack, decoder, labeled)?;
    let na = stack.adapter.len();
    let mut adapter = stack.adapter.clone();
    let mut dec = decoder.clone();
    let mut opt = Optimizer::new(
        config.optimizer,
        config.learning_rate,
        na + dec.num_params(),
    );
    let mut joint = vec![0.0; na + dec.num_params()];
    let bs = config.batch_size.min(labeled.len());
    for _ in 0..steps {
        let batch: Vec<&(u32, Label)> = index::sample(rng, labeled.len(), bs)
            .into_iter()
            .map(|i| &labeled[i])
            .collect();
        let (loss, grad) = joint_loss_and_grad(stack.store, &adapter, &dec, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite fine-tune loss {loss}")));
        }
        joint[..na].copy_from_slice(&adapter);
        joint[na..].copy_from_slice(dec.params());
        opt.step(&mut joint, &grad);
        adapter.copy_from_slice(&joint[..na]);
        dec.params_mut().copy_from_slice(&joint[na..]);
    }
    let mut next = stack.clone();
    next.set_adapter(adapter)?;
    let loss_after = labeled_loss(&next, &dec, labeled)?;
    if !loss_after.is_finite() {
        return Err(Error::Numeric("non-finite loss after fine-tune".into()));
    }
    stack.adapter = next.adapter;
    stack.version = next.version;
    *decoder = dec;
    Ok(FineTuneSummary {
        loss_before,
        loss_after,
        version: stack.version,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{Architecture, OptimizerKind};
    use crate::rng;

    #[test]
    fn identity_adapter_returns_stored_rows() {
        let store = EmbeddingStore::dense(2, vec![1.5, -2.25, 3.0, 0.125]).unwrap();
        let stack = EncoderStack::new(&store);
        let p = stack.encode(1).unwrap();
        assert_eq!(p.values, vec![3.0, 0.125]);
        assert_eq!(p.version, 0);
        assert!(matches!(stack.encode(2), Err(Error::Lookup(2))));
    }

    #[test]
    fn token_rows_are_mean_pooled() {
        let store = EmbeddingStore::tokens(2, vec![0, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let stack = EncoderStack::new(&store);
        assert_eq!(stack.encode(0).unwrap().values, vec![2.0, 3.0]);
        assert_eq!(stack.encode_rows(0).unwrap().n_rows(), 2);
    }

    #[test]
    fn scaled_adapter() {
        let store = EmbeddingStore::dense(2, vec![1.0, -1.0]).unwrap();
        let mut stack = EncoderStack::new(&store);
        stack.set_adapter(vec![2.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        assert_eq!(stack.version(), 1);
        assert_eq!(stack.encode(0).unwrap().values, vec![2.0, -2.0]);
    }

    fn rotated_instance() -> (EmbeddingStore, Vec<(u32, Label)>) {
        // Classes differ only along the second axis.
        let mut data = Vec::new();
        let mut labeled = Vec::new();
        for i in 0..40u32 {
            let y = i % 2;
            let s = if y == 0 { 2.0 } else { -2.0 };
            data.extend_from_slice(&[0.0, s + 0.05 * (i % 7) as f32]);
            labeled.push((i, Label::Class(y)));
        }
        (EmbeddingStore::dense(2, data).unwrap(), labeled)
    }

    #[test]
    fn fine_tune_rotates_latent_space_and_lowers_loss() {
        let (store, labeled) = rotated_instance();
        let mut stack = EncoderStack::new(&store);
        // Decoder only looks at the first coordinate.
        let mut decoder = DecoderModel::from_params(
            Architecture::Linear,
            2,
            2,
            vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let config = TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.05,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut r = rng::stream(1, rng::Stream::FineTune);
        let summary = fine_tune(&mut stack, &mut decoder, &labeled, 100, &config, &mut r).unwrap();
        assert!((summary.loss_before - std::f64::consts::LN_2).abs() < 1e-3);
        assert!(summary.loss_after < 0.5 * summary.loss_before, "{summary:?}");
        assert!(stack.adapter()[1].abs() > 0.1, "adapter should mix axes");
        assert_eq!(stack.version(), 1);
    }

    #[test]
    fn zero_rate_fine_tune_still_bumps_version() {
        let (store, labeled) = rotated_instance();
        let mut stack = EncoderStack::new(&store);
        let before = stack.adapter().to_vec();
        let mut decoder = DecoderModel::random(Architecture::Linear, 2, 2, 1).unwrap();
        let config = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut r = rng::stream(1, rng::Stream::FineTune);
        fine_tune(&mut stack, &mut decoder, &labeled, 3, &config, &mut r).unwrap();
        assert_eq!(stack.adapter(), &before[..]);
        assert_eq!(stack.version(), 1);
        fine_tune(&mut stack, &mut decoder, &labeled, 3, &config, &mut r).unwrap();
        assert_eq!(stack.version(), 2);
    }

    #[test]
    fn failed_fine_tune_leaves_stack_untouched() {
        let (store, labeled) = rotated_instance();
        let mut stack = EncoderStack::new(&store);
        let mut decoder = DecoderModel::random(Architecture::Linear, 2, 2, 1).unwrap();
        decoder.params_mut()[0] = 1e308;
        let snapshot = decoder.clone();
        let config = TrainConfig {
            learning_rate: 1.0,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        let mut r = rng::stream(1, rng::Stream::FineTune);
        assert!(fine_tune(&mut stack, &mut decoder, &labeled, 5, &config, &mut r).is_err());
        assert_eq!(stack.version(), 0);
        assert_eq!(decoder, snapshot);
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let store =
            EmbeddingStore::tokens(3, vec![0, 2, 3], vec![0.3, -0.1, 0.8, 1.0, 0.2, -0.5, -0.4, 0.9, 0.1])
                .unwrap();
        let mut adapter: Vec<f64> = (0..12).map(|i| 0.1 * ((i * 7 % 5) as f64 - 2.0)).collect();
        for i in 0..3 {
            adapter[i * 3 + i] += 1.0;
        }
        let decoder = DecoderModel::random(Architecture::Hidden { width: 4 }, 3, 3, 4).unwrap();
        let items = [(0u32, Label::Tags(vec![2, 0])), (1u32, Label::Tags(vec![1]))];
        let batch: Vec<&(u32, Label)> = items.iter().collect();
        let (_, grad) = joint_loss_and_grad(&store, &adapter, &decoder, &batch).unwrap();
        let h = 1e-6;
        for i in 0..adapter.len() {
            let mut p = adapter.clone();
            p[i] += h;
            let lp = joint_loss_and_grad(&store, &p, &decoder, &batch).unwrap().0;
            p[i] -= 2.0 * h;
            let lm = joint_loss_and_grad(&store, &p, &decoder, &batch).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-5);
            assert!((fd - grad[i]).abs() / denom < 1e-4, "param {i}: {fd} vs {}", grad[i]);
        }
    }
}

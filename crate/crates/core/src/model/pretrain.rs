use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, LmBatch};
use crate::error::{Error, Result};
use crate::eval::nll;
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, Schedule};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::shape::{ExecShape, LayerMask};
use crate::tensor::Graph;

use super::forward::{forward_graph, ForwardArgs};
use super::{ElasticModel, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Log the training loss every this many steps (0 disables).
    #[serde(default)]
    pub log_every: usize,
}

fn default_clip() -> f64 {
    1.0
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            seq_len: 128,
            lr: 3e-3,
            warmup: 100,
            weight_decay: 0.0,
            grad_clip: default_clip(),
            log_every: 100,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::config("pretrain.batch_size", "batch size and sequence length must be positive"));
        }
        if self.seq_len > model.max_seq_len {
            return Err(Error::config("pretrain.seq_len", "exceeds model.max_seq_len"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("pretrain.grad_clip", "must be positive"));
        }
        let mut adam = AdamWConfig::with_lr(self.lr);
        adam.weight_decay = self.weight_decay;
        adam.validate("pretrain")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// `(step, training loss)` at every logged step.
    pub losses: Vec<(usize, f64)>,
    pub final_loss: f64,
}

/// One full-model cross-entropy step. Returns the loss before the update.
pub fn pretrain_step<T: Scalar>(
    model: &mut ElasticModel<T>,
    opt: &mut AdamW<T>,
    batch: &LmBatch,
    lr: f64,
    clip: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.weights.bind(&mut g, model.config.d_head, true);
    let retained = LayerMask::all(model.n_layers());
    let args = ForwardArgs {
        cfg: &model.config,
        weights: &bound,
        retained: &retained,
        width: None,
        adapter: None,
    };
    let logits = forward_graph(&mut g, &args, &batch.inputs, None)?;
    let loss = g.cross_entropy(logits, &batch.targets)?;
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite("pretraining loss".into()));
    }
    let mut grads = g.backward(loss)?;
    let mut gs: Vec<_> = bound.vars().into_iter().map(|v| grads.take(v)).collect();
    clip_grad_norm(&mut gs, clip);
    let grad_refs: Vec<_> = gs.iter().map(Option::as_ref).collect();
    let mut params: Vec<_> = model.weights.named_mut().into_iter().map(|(_, t)| t).collect();
    opt.step(&mut params, &grad_refs, lr)?;
    Ok(value)
}

/// Trains every base parameter with next-token cross-entropy on random
/// windows of `train`. Deterministic for a given `rng` seed.
pub fn pretrain<T: Scalar>(
    model: &mut ElasticModel<T>,
    train: &[usize],
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<PretrainReport> {
    cfg.validate(&model.config)?;
    if train.len() < cfg.seq_len + 1 {
        return Err(Error::invalid(format!(
            "corpus of {} tokens is too small for one batch of length {}",
            train.len(),
            cfg.seq_len
        )));
    }
    let mut adam = AdamWConfig::with_lr(cfg.lr);
    adam.weight_decay = cfg.weight_decay;
    let mut opt = AdamW::new(adam, model.weights.named().into_iter().map(|(_, t)| t));
    let schedule = Schedule {
        peak: cfg.lr,
        warmup: cfg.warmup,
        total: cfg.steps,
        min_ratio: 0.1,
    };
    let mut losses = Vec::new();
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let batch = sample_batch(train, cfg.batch_size, cfg.seq_len, rng)?;
        last = pretrain_step(model, &mut opt, &batch, schedule.lr(step), cfg.grad_clip)?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            losses.push((step, last));
        }
    }
    Ok(PretrainReport {
        losses,
        final_loss: last,
    })
}

/// Mean validation cross-entropy of the full model, convenient for logs.
pub fn full_nll<T: Scalar>(model: &ElasticModel<T>, batches: &[LmBatch]) -> Result<f64> {
    Ok(nll(model, &ExecShape::full(model.n_layers()), batches)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sequential_batches, VOCAB_SIZE};
    use crate::eval::perplexity;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_head: 8,
            d_ffn: 32,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 16,
            norm_eps: 1e-5,
        }
    }

    fn stream() -> Vec<usize> {
        (0..600).map(|i| [5usize, 9, 12, 5, 30, 9][i % 6] + (i / 97) % 2).collect()
    }

    #[test]
    fn untrained_perplexity_is_near_vocab_size() {
        let m = ElasticModel::<f32>::init(tiny(), &mut Rng::new(1)).unwrap();
        let b = sequential_batches(&stream(), 16, 8, 512).unwrap();
        let p = perplexity(&m, &ExecShape::full(2), &b).unwrap();
        assert!((p / VOCAB_SIZE as f64 - 1.0).abs() < 0.05, "{p}");
    }

    #[test]
    fn training_lowers_loss_and_is_deterministic() {
        let cfg = PretrainConfig {
            steps: 60,
            batch_size: 4,
            seq_len: 16,
            lr: 1e-2,
            warmup: 5,
            weight_decay: 0.0,
            grad_clip: 1.0,
            log_every: 0,
        };
        let run = || {
            let mut m = ElasticModel::<f32>::init(tiny(), &mut Rng::new(2)).unwrap();
            pretrain(&mut m, &stream(), &cfg, &mut Rng::new(3)).unwrap();
            m
        };
        let a = run();
        let b = run();
        assert_eq!(a.weights, b.weights);
        let batches = sequential_batches(&stream(), 16, 8, 512).unwrap();
        let untrained = ElasticModel::<f32>::init(tiny(), &mut Rng::new(2)).unwrap();
        assert!(full_nll(&a, &batches).unwrap() < 0.5 * full_nll(&untrained, &batches).unwrap());
    }

    #[test]
    fn too_small_corpus_is_rejected() {
        let mut m = ElasticModel::<f32>::init(tiny(), &mut Rng::new(2)).unwrap();
        let cfg = PretrainConfig {
            seq_len: 16,
            ..PretrainConfig::default()
        };
        assert!(pretrain(&mut m, &[1, 2, 3], &cfg, &mut Rng::new(0)).is_err());
    }
}

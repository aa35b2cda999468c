//! Calibration metrics on subnets and an evaluation cache.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{encode, FactSet, LmBatch};
use crate::error::{Error, Result};
use crate::model::{ElasticModel, TokenBatch};
use crate::scalar::Scalar;
use crate::shape::ExecShape;

/// Mean next-token negative log-likelihood and the token count.
pub fn nll<T: Scalar>(model: &ElasticModel<T>, shape: &ExecShape, batches: &[LmBatch]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut count = 0;
    for b in batches {
        let logits = model.forward(&b.inputs, shape)?;
        let (rows, vocab) = logits.dims2("nll")?;
        if rows != b.targets.len() {
            return Err(Error::invalid("targets do not match the batch"));
        }
        for (row, &t) in logits.data().chunks_exact(vocab).zip(&b.targets) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[t].as_f64();
        }
        count += rows;
    }
    if count == 0 {
        return Err(Error::invalid("calibration set is empty"));
    }
    Ok((total / count as f64, count))
}

/// `exp` of the mean token negative log-likelihood.
pub fn perplexity<T: Scalar>(model: &ElasticModel<T>, shape: &ExecShape, batches: &[LmBatch]) -> Result<f64> {
    Ok(nll(model, shape, batches)?.0.exp())
}

/// Prompts padded into one batch, with the position and token to check.
#[derive(Debug, Clone, PartialEq)]
pub struct FactProbes {
    pub batch: TokenBatch,
    pub positions: Vec<usize>,
    pub answers: Vec<usize>,
}

impl FactProbes {
    /// Each prompt is prefixed by a newline, as fact sentences start lines
    /// in the training text, and right-padded with spaces.
    pub fn new(facts: &FactSet) -> Result<Self> {
        if facts.is_empty() {
            return Err(Error::invalid("no facts to probe"));
        }
        let prompts: Vec<Vec<usize>> = facts
            .facts
            .iter()
            .map(|f| encode(&format!("\n{}", f.prompt())))
            .collect::<Result<_>>()?;
        let len = prompts.iter().map(Vec::len).max().unwrap_or(1);
        let pad = encode(" ")?[0];
        let mut tokens = Vec::with_capacity(len * prompts.len());
        let mut positions = Vec::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            positions.push(i * len + p.len() - 1);
            tokens.extend_from_slice(p);
            tokens.extend(std::iter::repeat_n(pad, len - p.len()));
        }
        let answers = facts.facts.iter().map(|f| encode(&f.object.to_string()).map(|t| t[0])).collect::<Result<_>>()?;
        Ok(Self {
            batch: TokenBatch::new(prompts.len(), len, tokens)?,
            positions,
            answers,
        })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

/// Fraction of probes whose argmax next token is the true object.
pub fn fact_accuracy<T: Scalar>(model: &ElasticModel<T>, shape: &ExecShape, probes: &FactProbes) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::invalid("no facts to probe"));
    }
    let logits = model.forward(&probes.batch, shape)?;
    let (_, vocab) = logits.dims2("fact_accuracy")?;
    let mut hits = 0;
    for (&pos, &ans) in probes.positions.iter().zip(&probes.answers) {
        let row = &logits.data()[pos * vocab..(pos + 1) * vocab];
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        hits += usize::from(best == ans);
    }
    Ok(hits as f64 / probes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Ppl,
    FactAccuracy,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Ppl => "ppl",
            MetricKind::FactAccuracy => "fact_accuracy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ppl" => Ok(MetricKind::Ppl),
            "fact_accuracy" | "facts" | "acc" => Ok(MetricKind::FactAccuracy),
            other => Err(Error::config("metric", format!("unknown metric `{other}`"))),
        }
    }

    /// Converts an oriented score back to the metric's natural value.
    pub fn raw(self, oriented: f64) -> f64 {
        match self {
            MetricKind::Ppl => -oriented,
            MetricKind::FactAccuracy => oriented,
        }
    }
}

/// A pure subnet score where larger is better.
pub trait Evaluator<T: Scalar>: Sync {
    fn kind(&self) -> MetricKind;

    fn evaluate(&self, model: &ElasticModel<T>, shape: &ExecShape) -> Result<f64>;

    /// Identifies the calibration data, so cached scores from different sets
    /// never mix.
    fn fingerprint(&self) -> String;
}

/// Negated perplexity on fixed calibration batches.
pub struct PplEvaluator {
    pub batches: Vec<LmBatch>,
}

impl<T: Scalar> Evaluator<T> for PplEvaluator {
    fn kind(&self) -> MetricKind {
        MetricKind::Ppl
    }

    fn evaluate(&self, model: &ElasticModel<T>, shape: &ExecShape) -> Result<f64> {
        Ok(-perplexity(model, shape, &self.batches)?)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.batches {
            for &t in b.inputs.tokens.iter().chain(&b.targets) {
                h.update((t as u32).to_le_bytes());
            }
            h.update([0xff]);
        }
        format!("ppl:{:x}", h.finalize())
    }
}

pub struct FactEvaluator {
    pub probes: FactProbes,
}

impl<T: Scalar> Evaluator<T> for FactEvaluator {
    fn kind(&self) -> MetricKind {
        MetricKind::FactAccuracy
    }

    fn evaluate(&self, model: &ElasticModel<T>, shape: &ExecShape) -> Result<f64> {
        fact_accuracy(model, shape, &self.probes)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for &t in self.probes.batch.tokens.iter().chain(&self.probes.answers) {
            h.update((t as u32).to_le_bytes());
        }
        format!("fact_accuracy:{:x}", h.finalize())
    }
}

type CacheKey = (String, usize, MetricKind);

/// Scores keyed by (layer mask, width index, metric). Counts the misses that
/// reached the evaluator.
#[derive(Debug, Default)]
pub struct EvalCache {
    entries: Mutex<HashMap<CacheKey, f64>>,
    calls: AtomicUsize,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn evaluator_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn evaluate<T: Scalar, E: Evaluator<T> + ?Sized>(
        &self,
        evaluator: &E,
        model: &ElasticModel<T>,
        shape: &ExecShape,
    ) -> Result<f64> {
        let key = (shape.retained.to_string(), shape.width_index, evaluator.kind());
        if let Some(&v) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(v);
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let v = evaluator.evaluate(model, shape)?;
        self.entries.lock().expect("cache lock").entry(key).or_insert(v);
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sequential_batches, Fact, VOCAB_SIZE};
    use crate::model::ModelConfig;
    use crate::rng::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_ffn: 16,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 32,
            norm_eps: 1e-5,
        }
    }

    fn zero_head(m: &mut ElasticModel<f64>) {
        m.weights.head.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let mut m = ElasticModel::<f64>::init(tiny(), &mut Rng::new(1)).unwrap();
        zero_head(&mut m);
        let stream: Vec<usize> = (0..200).map(|i| (i * 7) % VOCAB_SIZE).collect();
        let b = sequential_batches(&stream, 16, 4, 1000).unwrap();
        let p = perplexity(&m, &ExecShape::full(2), &b).unwrap();
        assert!((p - VOCAB_SIZE as f64).abs() < 1e-9);
        assert!(perplexity(&m, &ExecShape::full(2), &[]).is_err());
    }

    #[test]
    fn certain_model_has_unit_perplexity() {
        let mut m = ElasticModel::<f64>::init(tiny(), &mut Rng::new(2)).unwrap();
        zero_head(&mut m);
        // no layers run, so the final state is the embedding e_0 and only token 5 scores
        let d = m.config.d_model;
        m.weights.pos_emb.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for (i, v) in m.weights.tok_emb.data_mut().iter_mut().enumerate() {
            *v = if i % d == 0 { 1.0 } else { 0.0 };
        }
        m.weights.head.data_mut()[5 * d] = 1e4;
        let stream = vec![5usize; 40];
        let b = sequential_batches(&stream, 8, 2, 1000).unwrap();
        let none = ExecShape::layers(crate::shape::LayerMask::keeping(2, &[]));
        let p = perplexity(&m, &none, &b).unwrap();
        assert!((p - 1.0).abs() < 1e-9, "{p}");
    }

    #[test]
    fn probes_point_at_prompt_ends() {
        let facts = FactSet {
            facts: vec![
                Fact {
                    subject: "Bo".into(),
                    object: 'X',
                },
                Fact {
                    subject: "Tralia".into(),
                    object: '7',
                },
            ],
        };
        let p = FactProbes::new(&facts).unwrap();
        let toks = &p.batch.tokens;
        assert_eq!(crate::data::decode(&toks[..p.positions[0] + 1]), "\nThe code of Bo is ");
        let l = p.batch.seq_len;
        assert_eq!(crate::data::decode(&toks[l..=p.positions[1]]), "\nThe code of Tralia is ");
        assert_eq!(p.answers, encode("X7").unwrap());
        assert!(FactProbes::new(&FactSet::default()).is_err());
    }

    struct Counting(std::sync::atomic::AtomicUsize);

    impl Evaluator<f64> for Counting {
        fn kind(&self) -> MetricKind {
            MetricKind::Ppl
        }
        fn evaluate(&self, _: &ElasticModel<f64>, shape: &ExecShape) -> Result<f64> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(shape.retained.retained_count() as f64)
        }
        fn fingerprint(&self) -> String {
            "c".into()
        }
    }

    #[test]
    fn cache_hits_skip_the_evaluator() {
        let m = ElasticModel::<f64>::init(tiny(), &mut Rng::new(3)).unwrap();
        let ev = Counting(AtomicUsize::new(0));
        let cache = EvalCache::new();
        let a = ExecShape::full(2);
        let b = ExecShape::layers(crate::shape::LayerMask::keeping(2, &[1]));
        let x = cache.evaluate(&ev, &m, &a).unwrap();
        assert_eq!(x.to_bits(), cache.evaluate(&ev, &m, &a).unwrap().to_bits());
        cache.evaluate(&ev, &m, &b).unwrap();
        assert_eq!(cache.evaluator_calls(), 2);
        assert_eq!(ev.0.load(Ordering::SeqCst), 2);
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn orientation_flips_perplexity() {
        assert_eq!(MetricKind::Ppl.raw(-3.0), 3.0);
        assert_eq!(MetricKind::FactAccuracy.raw(0.5), 0.5);
        assert!(MetricKind::parse("bleu").is_err());
    }
}

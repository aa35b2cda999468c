//! One-for-all fine-tuning of the adapter bank: sandwich sampling, in-place
//! distillation from the largest subnet and loss-magnitude balancing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, LmBatch};
use crate::error::{Error, Result};
use crate::model::{forward_graph, ActiveAdapter, BoundWeights, ElasticModel, ForwardArgs};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::shape::{ShapeGrid, SubnetShape};
use crate::smol::{BoundBank, GateMode};
use crate::tensor::{Graph, Tensor, Var};

/// Grid positions for one step: the largest shape, the smallest, then
/// `K - 2` distinct others drawn uniformly.
pub fn sandwich_sample(grid: &ShapeGrid, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    let k = grid.samples_per_step;
    if k > grid.len() {
        return Err(Error::config(
            "grid.samples_per_step",
            format!("K = {k} exceeds the {} grid shapes", grid.len()),
        ));
    }
    if k < 2 {
        return Err(Error::config("grid.samples_per_step", "K must be at least 2"));
    }
    let (largest, smallest) = (grid.largest(), grid.smallest());
    let rest: Vec<(usize, usize)> = grid.indices().filter(|&s| s != largest && s != smallest).collect();
    let mut out = vec![largest, smallest];
    out.extend(rng.sample_indices(rest.len(), k - 2).into_iter().map(|i| rest[i]));
    Ok(out)
}

/// Detached balancing scales `|L1| / (|Li| + eps)` and the balanced total.
/// With balancing off every scale is 1.
pub fn balanced_loss(l1: f64, distill: &[f64], eps: f64, balance: bool) -> Result<(Vec<f64>, f64)> {
    if !l1.is_finite() || distill.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("component loss".into()));
    }
    let scales: Vec<f64> = distill
        .iter()
        .map(|li| if balance { l1.abs() / (li.abs() + eps) } else { 1.0 })
        .collect();
    if scales.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("balancing scale".into()));
    }
    let total = l1 + scales.iter().zip(distill).map(|(s, l)| s * l).sum::<f64>();
    Ok((scales, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfaConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    #[serde(default = "default_eps")]
    pub balance_eps: f64,
    #[serde(default = "default_true")]
    pub balance: bool,
    /// Append one CSV row per subnet every this many steps (0 disables).
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_eps() -> f64 {
    1e-8
}

fn default_true() -> bool {
    true
}

fn default_log_every() -> usize {
    10
}

impl Default for OfaConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            seq_len: 128,
            lr: 2e-4,
            balance_eps: default_eps(),
            balance: true,
            log_every: default_log_every(),
        }
    }
}

impl OfaConfig {
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::config("finetune.batch_size", "batch size and sequence length must be positive"));
        }
        if self.seq_len > max_seq_len {
            return Err(Error::config("finetune.seq_len", "exceeds model.max_seq_len"));
        }
        if self.balance_eps < 0.0 {
            return Err(Error::config("finetune.balance_eps", "must be non-negative"));
        }
        AdamWConfig::with_lr(self.lr).validate("finetune")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    /// Shape ids in sampling order; the first is the teacher.
    pub shapes: Vec<String>,
    pub l1: f64,
    pub distill: Vec<f64>,
    pub scales: Vec<f64>,
    pub total: f64,
}

/// Logits of one subnet inside `g`, with the adapter gate in `mode`.
fn subnet_logits<T: Scalar>(
    g: &mut Graph<T>,
    model: &ElasticModel<T>,
    weights: &BoundWeights,
    bank_vars: &BoundBank,
    shape: &SubnetShape,
    batch: &LmBatch,
    mode: GateMode<'_>,
) -> Result<Var> {
    let bank = model.adapter.as_ref().ok_or_else(|| Error::invalid("no adapter attached"))?;
    let width = model.bind_width(g, shape.width_index)?;
    let (_, coefs) = bank.gate_in_graph(g, bank_vars, &shape.gate_mask, mode)?;
    let active = ActiveAdapter {
        bank: bank_vars,
        coefs,
    };
    let args = ForwardArgs {
        cfg: &model.config,
        weights,
        retained: &shape.retained_layers,
        width: width.as_ref(),
        adapter: Some(&active),
    };
    forward_graph(g, &args, &batch.inputs, None)
}

/// Losses and adapter gradients for one batch over `shapes`. The first
/// shape is the teacher: ground-truth loss, noise-free gate. The others
/// distill from its detached distribution with a noisy gate. Gradients are
/// in [`crate::smol::SmolBank::named`] order; base weights are constants.
pub fn ofa_gradients<T: Scalar>(
    model: &ElasticModel<T>,
    shapes: &[&SubnetShape],
    batch: &LmBatch,
    cfg: &OfaConfig,
    rng: &mut Rng,
) -> Result<(StepLosses, Vec<Option<Tensor<T>>>)> {
    let bank = model.adapter.as_ref().ok_or_else(|| Error::invalid("no adapter attached"))?;
    let Some((teacher, students)) = shapes.split_first() else {
        return Err(Error::invalid("no shapes to train"));
    };
    let mut g = Graph::new();
    let weights = model.weights.bind(&mut g, model.config.d_head, false);
    let bank_vars = bank.bind(&mut g, true);

    let wrap = |s: &SubnetShape, e: Error| Error::Subnet {
        shape: s.id(),
        source: Box::new(e),
    };
    let t_logits = subnet_logits(&mut g, model, &weights, &bank_vars, teacher, batch, GateMode::Eval)
        .map_err(|e| wrap(teacher, e))?;
    let l1 = g.cross_entropy(t_logits, &batch.targets).map_err(|e| wrap(teacher, e))?;
    let detached = g.detach(t_logits);
    let probs = g.softmax(detached);
    let teacher_probs = g.value(probs).clone();

    let mut li_vars = Vec::with_capacity(students.len());
    for s in students {
        let logits = subnet_logits(&mut g, model, &weights, &bank_vars, s, batch, GateMode::Train(rng))
            .map_err(|e| wrap(s, e))?;
        li_vars.push(g.soft_cross_entropy(logits, &teacher_probs).map_err(|e| wrap(s, e))?);
    }
    let l1_val = g.value(l1).item().as_f64();
    let distill: Vec<f64> = li_vars.iter().map(|&v| g.value(v).item().as_f64()).collect();
    let (scales, _) = balanced_loss(l1_val, &distill, cfg.balance_eps, cfg.balance)?;
    let mut total = l1;
    for (&v, &s) in li_vars.iter().zip(&scales) {
        let scaled = g.scale(v, T::of(s));
        total = g.add(total, scaled)?;
    }
    let total_val = g.value(total).item().as_f64();
    if !total_val.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    let mut grads = g.backward(total)?;
    let gs = bank_vars.vars().into_iter().map(|v| grads.take(v)).collect();
    let losses = StepLosses {
        shapes: shapes.iter().map(|s| s.id()).collect(),
        l1: l1_val,
        distill,
        scales,
        total: total_val,
    };
    Ok((losses, gs))
}

/// Gradient of the teacher loss alone or of one student's distillation loss
/// at unit scale; used to check that balancing acts as a constant factor.
pub fn component_gradients<T: Scalar>(
    model: &ElasticModel<T>,
    shapes: &[&SubnetShape],
    batch: &LmBatch,
    student: usize,
    noise_seed: u64,
) -> Result<Vec<Option<Tensor<T>>>> {
    let bank = model.adapter.as_ref().ok_or_else(|| Error::invalid("no adapter attached"))?;
    let mut rng = Rng::new(noise_seed);
    let mut g = Graph::new();
    let weights = model.weights.bind(&mut g, model.config.d_head, false);
    let bank_vars = bank.bind(&mut g, true);
    let t_logits = subnet_logits(&mut g, model, &weights, &bank_vars, shapes[0], batch, GateMode::Eval)?;
    let detached = g.detach(t_logits);
    let probs = g.softmax(detached);
    let teacher_probs = g.value(probs).clone();
    let mut target = None;
    for (i, s) in shapes.iter().enumerate().skip(1) {
        let logits = subnet_logits(&mut g, model, &weights, &bank_vars, s, batch, GateMode::Train(&mut rng))?;
        let l = g.soft_cross_entropy(logits, &teacher_probs)?;
        if i == student {
            target = Some(l);
        }
    }
    let loss = match target {
        Some(l) => l,
        None => g.cross_entropy(t_logits, &batch.targets)?,
    };
    let mut grads = g.backward(loss)?;
    Ok(bank_vars.vars().into_iter().map(|v| grads.take(v)).collect())
}

/// Cross-entropy of one subnet and its adapter gradients. `noise_seed`
/// selects the noisy gate with a fixed draw; `None` uses the clean gate.
pub fn subnet_gradients<T: Scalar>(
    model: &ElasticModel<T>,
    shape: &SubnetShape,
    batch: &LmBatch,
    noise_seed: Option<u64>,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let bank = model.adapter.as_ref().ok_or_else(|| Error::invalid("no adapter attached"))?;
    let mut g = Graph::new();
    let weights = model.weights.bind(&mut g, model.config.d_head, false);
    let bank_vars = bank.bind(&mut g, true);
    let mut rng = Rng::new(noise_seed.unwrap_or(0));
    let mode = match noise_seed {
        Some(_) => GateMode::Train(&mut rng),
        None => GateMode::Eval,
    };
    let logits = subnet_logits(&mut g, model, &weights, &bank_vars, shape, batch, mode)?;
    let loss = g.cross_entropy(logits, &batch.targets)?;
    let value = g.value(loss).item().as_f64();
    let mut grads = g.backward(loss)?;
    Ok((value, bank_vars.vars().into_iter().map(|v| grads.take(v)).collect()))
}

/// Applies one accumulated update to the adapter bank.
pub fn train_step<T: Scalar>(
    model: &mut ElasticModel<T>,
    shapes: &[&SubnetShape],
    batch: &LmBatch,
    opt: &mut AdamW<T>,
    cfg: &OfaConfig,
    rng: &mut Rng,
) -> Result<StepLosses> {
    let (losses, grads) = ofa_gradients(model, shapes, batch, cfg, rng)?;
    let bank = model.adapter.as_mut().ok_or_else(|| Error::invalid("no adapter attached"))?;
    let refs: Vec<_> = grads.iter().map(Option::as_ref).collect();
    let mut params: Vec<_> = bank.named_mut().into_iter().map(|(_, t)| t).collect();
    opt.step(&mut params, &refs, cfg.lr)?;
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfaReport {
    pub steps: usize,
    /// CSV with header `step,shape_id,l1,l_i,s_i`.
    pub loss_csv: String,
    pub last: Option<StepLosses>,
}

/// Runs `cfg.steps` sandwich steps. `shapes` lists every grid shape in
/// [`ShapeGrid::indices`] order.
pub fn finetune<T: Scalar>(
    model: &mut ElasticModel<T>,
    grid: &ShapeGrid,
    shapes: &[SubnetShape],
    train: &[usize],
    cfg: &OfaConfig,
    rng: &mut Rng,
) -> Result<OfaReport> {
    cfg.validate(model.config.max_seq_len)?;
    grid.validate(Some(model.n_layers()))?;
    if shapes.len() != grid.len() {
        return Err(Error::invalid(format!("{} shapes for a grid of {}", shapes.len(), grid.len())));
    }
    let bank = model.adapter.as_ref().ok_or_else(|| Error::invalid("no adapter attached"))?;
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr), bank.named().into_iter().map(|(_, t)| t));
    let n_widths = grid.widths.len();
    let mut data_rng = rng.fork(1);
    let mut shape_rng = rng.fork(2);
    let mut noise_rng = rng.fork(3);
    let mut csv = String::from("step,shape_id,l1,l_i,s_i\n");
    let mut last = None;
    for step in 0..cfg.steps {
        let picks = sandwich_sample(grid, &mut shape_rng)?;
        let chosen: Vec<&SubnetShape> = picks.iter().map(|&(d, w)| &shapes[d * n_widths + w]).collect();
        let batch = sample_batch(train, cfg.batch_size, cfg.seq_len, &mut data_rng)?;
        let l = train_step(model, &chosen, &batch, &mut opt, cfg, &mut noise_rng)?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            let _ = writeln!(csv, "{step},{},{},{},1", l.shapes[0], l.l1, l.l1);
            for ((id, li), si) in l.shapes[1..].iter().zip(&l.distill).zip(&l.scales) {
                let _ = writeln!(csv, "{step},{id},{},{li},{si}", l.l1);
            }
        }
        last = Some(l);
    }
    Ok(OfaReport {
        steps: cfg.steps,
        loss_csv: csv,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_total_by_hand() {
        let (s, total) = balanced_loss(2.0, &[8.0, 0.5], 0.0, true).unwrap();
        assert_eq!(s, vec![0.25, 4.0]);
        assert!((total - 6.0).abs() < 1e-12);
        let (_, t) = balanced_loss(1.5, &[1.5, 1.5, 1.5], 0.0, true).unwrap();
        assert!((t - 6.0).abs() < 1e-12);
        let (s, t) = balanced_loss(2.0, &[8.0, 0.5], 0.0, false).unwrap();
        assert_eq!(s, vec![1.0, 1.0]);
        assert_eq!(t, 10.5);
        assert!(balanced_loss(f64::NAN, &[1.0], 0.0, true).is_err());
        assert!(balanced_loss(1.0, &[0.0], 0.0, true).is_err());
        assert!(balanced_loss(1.0, &[0.0], 1e-8, true).is_ok());
    }

    fn grid(k: usize) -> ShapeGrid {
        ShapeGrid::new(vec![8, 7, 6, 5], vec![1.0, 0.75, 0.5], k).unwrap()
    }

    #[test]
    fn sandwich_has_extremes_and_distinct_middle() {
        let g = grid(4);
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let s = sandwich_sample(&g, &mut rng).unwrap();
            assert_eq!(s.len(), 4);
            assert_eq!(s[0], (0, 0));
            assert_eq!(s[1], (3, 2));
            let mut d = s.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 4);
        }
        assert_eq!(sandwich_sample(&grid(2), &mut rng).unwrap(), vec![(0, 0), (3, 2)]);
    }

    #[test]
    fn sandwich_is_seeded_and_covers_grid() {
        let g = grid(4);
        let a: Vec<_> = {
            let mut r = Rng::new(9);
            (0..20).map(|_| sandwich_sample(&g, &mut r).unwrap()).collect()
        };
        let mut r = Rng::new(9);
        let b: Vec<_> = (0..20).map(|_| sandwich_sample(&g, &mut r).unwrap()).collect();
        assert_eq!(a, b);
        let mut seen = std::collections::BTreeSet::new();
        let mut r = Rng::new(1);
        for _ in 0..1000 {
            seen.extend(sandwich_sample(&g, &mut r).unwrap());
        }
        assert_eq!(seen.len(), g.len());
    }
}

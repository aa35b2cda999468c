use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::{ExecShape, LayerMask};
use crate::smol::{BoundBank, GateMode};
use crate::tensor::{Graph, LoraTerm, Tensor, Var};

use super::{ElasticModel, MatrixId, MatrixKind, ModelConfig, ModelWeights};

/// `n_seq` equal-length token sequences stacked back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub n_seq: usize,
    pub seq_len: usize,
    pub tokens: Vec<usize>,
}

impl TokenBatch {
    pub fn new(n_seq: usize, seq_len: usize, tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() != n_seq * seq_len || seq_len == 0 {
            return Err(Error::invalid(format!(
                "batch of {} tokens is not {n_seq} x {seq_len}",
                tokens.len()
            )));
        }
        Ok(Self { n_seq, seq_len, tokens })
    }

    pub fn single(tokens: Vec<usize>) -> Result<Self> {
        let len = tokens.len();
        Self::new(1, len, tokens)
    }

    fn positions(&self) -> Vec<usize> {
        (0..self.n_seq).flat_map(|_| 0..self.seq_len).collect()
    }
}

/// Inputs of each retained block's last matrix, recorded during a forward
/// pass: the attention context feeding `wo` and the gated activation
/// feeding `w_down`.
#[derive(Debug, Clone, Copy)]
pub struct BlockCapture {
    pub layer: usize,
    pub attn_in: Var,
    pub ffn_in: Var,
}

pub(crate) struct BoundLayer {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bo: Var,
    ffn_norm: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
    b_down: Var,
    n_heads: usize,
}

/// Model weights recorded as leaves of one graph.
pub(crate) struct BoundWeights {
    pub(crate) tok_emb: Var,
    pos_emb: Var,
    pub(crate) layers: Vec<BoundLayer>,
    final_norm: Var,
    head: Var,
}

impl BoundWeights {
    /// Leaves in the order of [`ModelWeights::named`].
    pub(crate) fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([
                l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.bo, l.ffn_norm, l.w_gate, l.w_up, l.w_down, l.b_down,
            ]);
        }
        out.extend([self.final_norm, self.head]);
        out
    }
}

impl<T: Scalar> ModelWeights<T> {
    pub(crate) fn bind(&self, g: &mut Graph<T>, d_head: usize, trainable: bool) -> BoundWeights {
        let mut leaf = |t: &Tensor<T>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let tok_emb = leaf(&self.tok_emb);
        let pos_emb = leaf(&self.pos_emb);
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                attn_norm: leaf(&l.attn_norm),
                wq: leaf(&l.wq),
                wk: leaf(&l.wk),
                wv: leaf(&l.wv),
                wo: leaf(&l.wo),
                bo: leaf(&l.bo),
                ffn_norm: leaf(&l.ffn_norm),
                w_gate: leaf(&l.w_gate),
                w_up: leaf(&l.w_up),
                w_down: leaf(&l.w_down),
                b_down: leaf(&l.b_down),
                n_heads: l.attn_width() / d_head,
            })
            .collect();
        let final_norm = leaf(&self.final_norm);
        let head = leaf(&self.head);
        BoundWeights {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            head,
        }
    }
}

/// Per-layer width masks and compensation biases as graph constants;
/// `None` entries mean the block runs at full width.
pub(crate) struct BoundWidth {
    attn: Vec<Option<(Var, Var)>>,
    ffn: Vec<Option<(Var, Var)>>,
}

/// Active adapter for one forward: the bound bank and the gate coefficient
/// (as a scalar node) of every active LoRA.
pub(crate) struct ActiveAdapter<'a> {
    pub(crate) bank: &'a BoundBank,
    pub(crate) coefs: Vec<(usize, Var)>,
}

/// One elastic forward over already-bound weights.
pub(crate) struct ForwardArgs<'a> {
    pub(crate) cfg: &'a ModelConfig,
    pub(crate) weights: &'a BoundWeights,
    pub(crate) retained: &'a LayerMask,
    pub(crate) width: Option<&'a BoundWidth>,
    pub(crate) adapter: Option<&'a ActiveAdapter<'a>>,
}

fn linear<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    adapter: Option<&ActiveAdapter<'_>>,
    id: MatrixId,
) -> Result<Var> {
    let Some(ad) = adapter else {
        return g.matmul_nt(x, w);
    };
    let terms: Vec<LoraTerm> = ad
        .coefs
        .iter()
        .map(|&(i, coef)| {
            let (a, b) = ad.bank.pair(id, i);
            LoraTerm { a, b, coef }
        })
        .collect();
    g.linear_lora(x, w, &terms)
}

pub(crate) fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    args: &ForwardArgs<'_>,
    batch: &TokenBatch,
    mut capture: Option<&mut Vec<BlockCapture>>,
) -> Result<Var> {
    let ForwardArgs {
        cfg,
        weights: w,
        retained,
        width,
        adapter,
    } = *args;
    if retained.len() != w.layers.len() {
        return Err(Error::invalid(format!(
            "layer mask of length {} for a {}-layer model",
            retained.len(),
            w.layers.len()
        )));
    }
    if batch.seq_len > cfg.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence length {} exceeds {}",
            batch.seq_len, cfg.max_seq_len
        )));
    }
    let tok = g.embedding(w.tok_emb, &batch.tokens)?;
    let pos = g.embedding(w.pos_emb, &batch.positions())?;
    let mut x = g.add(tok, pos)?;

    for layer in retained.retained() {
        let l = &w.layers[layer];
        let id = |kind| MatrixId::new(layer, kind);

        let h = g.rms_norm(x, l.attn_norm, cfg.norm_eps)?;
        let q = linear(g, h, l.wq, adapter, id(MatrixKind::Q))?;
        let k = linear(g, h, l.wk, adapter, id(MatrixKind::K))?;
        let v = linear(g, h, l.wv, adapter, id(MatrixKind::V))?;
        let mut ctx = g.causal_attention(q, k, v, batch.n_seq, batch.seq_len, l.n_heads, cfg.d_head)?;
        let attn_comp = width.and_then(|wd| wd.attn[layer]);
        if let Some((mask, _)) = attn_comp {
            ctx = g.mul_row(ctx, mask)?;
        }
        let attn_in = ctx;
        let mut a = linear(g, ctx, l.wo, adapter, id(MatrixKind::O))?;
        a = g.add_row(a, l.bo)?;
        if let Some((_, bias)) = attn_comp {
            a = g.add_row(a, bias)?;
        }
        x = g.add(x, a)?;

        let h = g.rms_norm(x, l.ffn_norm, cfg.norm_eps)?;
        let gate = linear(g, h, l.w_gate, adapter, id(MatrixKind::Gate))?;
        let up = linear(g, h, l.w_up, adapter, id(MatrixKind::Up))?;
        let act = g.silu(gate);
        let mut f = g.mul(act, up)?;
        let ffn_comp = width.and_then(|wd| wd.ffn[layer]);
        if let Some((mask, _)) = ffn_comp {
            f = g.mul_row(f, mask)?;
        }
        if let Some(c) = capture.as_deref_mut() {
            c.push(BlockCapture {
                layer,
                attn_in,
                ffn_in: f,
            });
        }
        let mut d = linear(g, f, l.w_down, adapter, id(MatrixKind::Down))?;
        d = g.add_row(d, l.b_down)?;
        if let Some((_, bias)) = ffn_comp {
            d = g.add_row(d, bias)?;
        }
        x = g.add(x, d)?;
    }

    let h = g.rms_norm(x, w.final_norm, cfg.norm_eps)?;
    g.matmul_nt(h, w.head)
}

impl<T: Scalar> ElasticModel<T> {
    /// Records the width masks and biases of `width_index` as constants.
    /// Returns `None` at full width, so full-width forwards run the plain
    /// computation.
    pub(crate) fn bind_width(&self, g: &mut Graph<T>, width_index: usize) -> Result<Option<BoundWidth>> {
        let Some(plan) = &self.width_plan else {
            if width_index != 0 {
                return Err(Error::invalid(format!(
                    "width index {width_index} requested but no width plan is attached"
                )));
            }
            return Ok(None);
        };
        if width_index >= plan.ratios.len() {
            return Err(Error::invalid(format!("width index {width_index} outside the width plan")));
        }
        if plan.is_full(width_index) {
            return Ok(None);
        }
        let d_head = self.config.d_head;
        let to_t = |v: &[f64]| Tensor::new([v.len()], v.iter().map(|&x| T::of(x)).collect()).expect("1-d");
        let n = self.n_layers();
        let mut bw = BoundWidth {
            attn: Vec::with_capacity(n),
            ffn: Vec::with_capacity(n),
        };
        for layer in 0..n {
            let heads = plan.head_mask(width_index, layer);
            let channels: Vec<f64> = heads
                .iter()
                .flat_map(|&keep| std::iter::repeat_n(if keep { 1.0 } else { 0.0 }, d_head))
                .collect();
            let m = g.constant(to_t(&channels));
            let b = g.constant(to_t(plan.attn_bias(width_index, layer)));
            bw.attn.push(Some((m, b)));
            let ffn: Vec<f64> = plan
                .ffn_mask(width_index, layer)
                .iter()
                .map(|&keep| if keep { 1.0 } else { 0.0 })
                .collect();
            let m = g.constant(to_t(&ffn));
            let b = g.constant(to_t(plan.ffn_bias(width_index, layer)));
            bw.ffn.push(Some((m, b)));
        }
        Ok(Some(bw))
    }

    /// Builds the whole inference graph for `shape`, optionally capturing
    /// the last-matrix inputs of every executed block. The adapter gate runs
    /// noise-free.
    pub fn forward_with_capture(
        &self,
        g: &mut Graph<T>,
        batch: &TokenBatch,
        shape: &ExecShape,
        capture: Option<&mut Vec<BlockCapture>>,
    ) -> Result<Var> {
        let weights = self.weights.bind(g, self.config.d_head, false);
        let width = self.bind_width(g, shape.width_index)?;
        let bound_bank;
        let active;
        let adapter = match (&self.adapter, &shape.gate_mask) {
            (Some(bank), Some(mask)) => {
                bound_bank = bank.bind(g, false);
                let (_, coefs) = bank.gate_in_graph(g, &bound_bank, mask, GateMode::Eval)?;
                active = ActiveAdapter {
                    bank: &bound_bank,
                    coefs,
                };
                Some(&active)
            }
            _ => None,
        };
        let args = ForwardArgs {
            cfg: &self.config,
            weights: &weights,
            retained: &shape.retained,
            width: width.as_ref(),
            adapter,
        };
        forward_graph(g, &args, batch, capture)
    }

    /// Logits `[n_seq * seq_len, vocab]` of the subnet `shape`.
    pub fn forward(&self, batch: &TokenBatch, shape: &ExecShape) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward_with_capture(&mut g, batch, shape, None)?;
        Ok(g.value(out).clone())
    }

    /// Plain forward of every layer at full width without adapter.
    pub fn forward_full(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        self.forward(batch, &ExecShape::full(self.n_layers()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_ffn: 12,
            vocab_size: 11,
            max_seq_len: 6,
            norm_eps: 1e-5,
        }
    }

    fn batch(rng: &mut Rng) -> TokenBatch {
        TokenBatch::new(2, 5, (0..10).map(|_| rng.below(11)).collect()).unwrap()
    }

    #[test]
    fn logits_shape() {
        let mut rng = Rng::new(0);
        let m = ElasticModel::<f64>::init(tiny(), &mut rng).unwrap();
        let out = m.forward_full(&batch(&mut rng)).unwrap();
        assert_eq!(out.shape(), &[10, 11]);
        assert!(out.all_finite());
    }

    #[test]
    fn skipped_layer_is_residual_passthrough() {
        let mut rng = Rng::new(1);
        let m = ElasticModel::<f64>::init(tiny(), &mut rng).unwrap();
        let b = batch(&mut rng);
        let skipped = m
            .forward(&b, &ExecShape::layers(LayerMask::parse("101").unwrap()))
            .unwrap();
        // zeroing the middle block's output projections removes its contribution
        let mut zeroed = m.clone();
        let l = &mut zeroed.weights.layers[1];
        l.wo = Tensor::zeros(l.wo.shape().to_vec());
        l.w_down = Tensor::zeros(l.w_down.shape().to_vec());
        let reference = zeroed.forward_full(&b).unwrap();
        assert!(skipped.max_abs_diff(&reference) < 1e-12);
    }

    #[test]
    fn mask_length_and_sequence_length_are_checked() {
        let mut rng = Rng::new(2);
        let m = ElasticModel::<f64>::init(tiny(), &mut rng).unwrap();
        let b = batch(&mut rng);
        assert!(m.forward(&b, &ExecShape::layers(LayerMask::all(2))).is_err());
        let long = TokenBatch::single(vec![0; 7]).unwrap();
        assert!(m.forward_full(&long).is_err());
        let wide = ExecShape {
            width_index: 1,
            ..ExecShape::full(3)
        };
        assert!(m.forward(&b, &wide).is_err(), "width index without plan");
    }

    #[test]
    fn causal_prefix_independence() {
        let mut rng = Rng::new(3);
        let m = ElasticModel::<f64>::init(tiny(), &mut rng).unwrap();
        let a = TokenBatch::single(vec![1, 2, 3, 4]).unwrap();
        let b = TokenBatch::single(vec![1, 2, 3, 9]).unwrap();
        let la = m.forward_full(&a).unwrap();
        let lb = m.forward_full(&b).unwrap();
        for r in 0..3 {
            assert_eq!(la.row(r), lb.row(r));
        }
        assert_ne!(la.row(3), lb.row(3));
    }
}

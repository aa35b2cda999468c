use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::{ExecShape, SubnetShape};
use crate::smol::GateMode;
use crate::tensor::Tensor;

use super::{ElasticModel, LayerWeights, MatrixId, MatrixKind, ModelConfig, ModelWeights};

/// Retained attention and FFN channels of one layer. Attention channels are
/// whole heads expanded to their `d_head` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSpec {
    pub layer: usize,
    pub attn_channels: Vec<usize>,
    pub ffn_channels: Vec<usize>,
}

impl SliceSpec {
    /// Cuts a `[out, in]` matrix of this layer down to the retained neurons.
    pub fn slice<T: Scalar>(&self, kind: MatrixKind, w: &Tensor<T>) -> Result<Tensor<T>> {
        match kind {
            MatrixKind::Q | MatrixKind::K | MatrixKind::V => w.select_rows(&self.attn_channels),
            MatrixKind::O => w.select_cols(&self.attn_channels),
            MatrixKind::Gate | MatrixKind::Up => w.select_rows(&self.ffn_channels),
            MatrixKind::Down => w.select_cols(&self.ffn_channels),
        }
    }
}

impl<T: Scalar> ElasticModel<T> {
    /// Slicing recipe for every retained layer of `shape`, in layer order.
    pub fn slice_specs(&self, shape: &ExecShape) -> Result<Vec<SliceSpec>> {
        if shape.retained.len() != self.n_layers() {
            return Err(Error::invalid(format!(
                "layer mask of length {} for a {}-layer model",
                shape.retained.len(),
                self.n_layers()
            )));
        }
        let d_head = self.config.d_head;
        shape
            .retained
            .retained()
            .map(|layer| {
                let l = &self.weights.layers[layer];
                let (heads, ffn): (Vec<bool>, Vec<bool>) = match &self.width_plan {
                    Some(plan) => {
                        if shape.width_index >= plan.ratios.len() {
                            return Err(Error::invalid(format!("width index {} outside plan", shape.width_index)));
                        }
                        (
                            plan.head_mask(shape.width_index, layer).to_vec(),
                            plan.ffn_mask(shape.width_index, layer).to_vec(),
                        )
                    }
                    None if shape.width_index == 0 => {
                        (vec![true; l.attn_width() / d_head], vec![true; l.ffn_width()])
                    }
                    None => return Err(Error::invalid("width index without a width plan")),
                };
                Ok(SliceSpec {
                    layer,
                    attn_channels: heads
                        .iter()
                        .enumerate()
                        .filter(|(_, &k)| k)
                        .flat_map(|(h, _)| h * d_head..(h + 1) * d_head)
                        .collect(),
                    ffn_channels: ffn.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect(),
                })
            })
            .collect()
    }

    /// Standalone dense model for `shape`: retained layers only, matrices
    /// physically sliced to the retained heads/channels, active LoRAs merged
    /// with the noise-free gate, and compensation biases folded into the
    /// output-projection biases.
    pub fn extract(&self, shape: &SubnetShape) -> Result<ElasticModel<T>> {
        let exec = shape.exec();
        let specs = self.slice_specs(&exec)?;
        let mut deltas = match &self.adapter {
            Some(bank) => bank.merge(&shape.gate_mask, &specs, GateMode::Eval)?,
            None => Vec::new(),
        }
        .into_iter();

        let mut layers = Vec::with_capacity(specs.len());
        for spec in &specs {
            let src = &self.weights.layers[spec.layer];
            let mut mat = |kind: MatrixKind| -> Result<Tensor<T>> {
                let mut w = spec.slice(kind, src.matrix(kind))?;
                if self.adapter.is_some() {
                    let (id, delta) = deltas.next().expect("one delta per matrix");
                    debug_assert_eq!(id, MatrixId::new(spec.layer, kind));
                    w.add_assign(&delta)?;
                }
                Ok(w)
            };
            let (wq, wk, wv, wo) = (mat(MatrixKind::Q)?, mat(MatrixKind::K)?, mat(MatrixKind::V)?, mat(MatrixKind::O)?);
            let (w_gate, w_up, w_down) = (mat(MatrixKind::Gate)?, mat(MatrixKind::Up)?, mat(MatrixKind::Down)?);
            let mut bo = src.bo.clone();
            let mut b_down = src.b_down.clone();
            if let Some(plan) = &self.width_plan {
                if !plan.is_full(shape.width_index) {
                    let to_t = |v: &[f64]| Tensor::new([v.len()], v.iter().map(|&x| T::of(x)).collect());
                    bo.add_assign(&to_t(plan.attn_bias(shape.width_index, spec.layer))?)?;
                    b_down.add_assign(&to_t(plan.ffn_bias(shape.width_index, spec.layer))?)?;
                }
            }
            layers.push(LayerWeights {
                attn_norm: src.attn_norm.clone(),
                wq,
                wk,
                wv,
                wo,
                bo,
                ffn_norm: src.ffn_norm.clone(),
                w_gate,
                w_up,
                w_down,
                b_down,
            });
        }
        let weights = ModelWeights {
            tok_emb: self.weights.tok_emb.clone(),
            pos_emb: self.weights.pos_emb.clone(),
            layers,
            final_norm: self.weights.final_norm.clone(),
            head: self.weights.head.clone(),
        };
        let config = ModelConfig {
            n_layers: specs.len().max(1),
            ..self.config.clone()
        };
        ElasticModel::new(config, weights)
    }
}

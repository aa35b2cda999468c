//! Shape-aware mixture of LoRAs.
//!
//! Every adapted matrix owns `T` low-rank pairs `ΔWᵢ = BᵢAᵢ`. One gate,
//! shared by all matrices, maps the subnet's one-hot shape mask to sparse
//! mixing coefficients:
//!
//! ```text
//! H(m)ᵢ = (m·W_g)ᵢ + εᵢ · softplus((m·W_noise)ᵢ)      εᵢ ~ N(0, 1) while training
//! G(m)  = softmax(keep_top_k(H(m), k))
//! W     = W_base + Σᵢ G(m)ᵢ ΔWᵢ
//! ```
//!
//! Because the gate sees only the shape, the mixture for a fixed subnet is a
//! constant and can be merged into dense weights at extraction time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MatrixId, MatrixKind, ModelWeights, SliceSpec};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmolConfig {
    /// Number of LoRAs per adapted matrix.
    pub n_loras: usize,
    /// LoRAs active per subnet.
    pub top_k: usize,
    pub rank: usize,
    /// Gate noise while training.
    pub noise: bool,
    #[serde(default = "default_a_std")]
    pub a_std: f64,
    #[serde(default = "default_gate_std")]
    pub gate_std: f64,
}

fn default_a_std() -> f64 {
    0.02
}

fn default_gate_std() -> f64 {
    0.1
}

impl Default for SmolConfig {
    fn default() -> Self {
        Self {
            n_loras: 5,
            top_k: 2,
            rank: 4,
            noise: true,
            a_std: default_a_std(),
            gate_std: default_gate_std(),
        }
    }
}

impl SmolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_loras == 0 {
            return Err(Error::config("adapter.n_loras", "must be at least 1"));
        }
        if self.top_k == 0 || self.top_k > self.n_loras {
            return Err(Error::config("adapter.top_k", "must lie in 1..=n_loras"));
        }
        if self.rank == 0 {
            return Err(Error::config("adapter.rank", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    /// `[rank, in]`
    pub a: Tensor<T>,
    /// `[out, rank]`
    pub b: Tensor<T>,
}

/// Whether the gate samples noise.
pub enum GateMode<'a> {
    Eval,
    Train(&'a mut Rng),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    pub coefficients: Vec<f64>,
    /// Active LoRA indices, ascending.
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmolBank<T> {
    pub config: SmolConfig,
    /// `[mask_dim, n_loras]`
    pub w_gate: Tensor<T>,
    /// `[mask_dim, n_loras]`
    pub w_noise: Tensor<T>,
    /// Indexed by [`MatrixId::flat`], then by LoRA index.
    pub loras: Vec<Vec<LoraPair<T>>>,
}

/// Bank parameters recorded in a graph.
pub(crate) struct BoundBank {
    pub(crate) w_gate: Var,
    pub(crate) w_noise: Var,
    pairs: Vec<Vec<(Var, Var)>>,
}

impl BoundBank {
    pub(crate) fn pair(&self, id: MatrixId, i: usize) -> (Var, Var) {
        self.pairs[id.flat()][i]
    }

    /// Leaves in the order of [`SmolBank::named`].
    pub(crate) fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for m in &self.pairs {
            for &(a, b) in m {
                out.extend([a, b]);
            }
        }
        out.extend([self.w_gate, self.w_noise]);
        out
    }
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

impl<T: Scalar> SmolBank<T> {
    /// `Aᵢ ~ N(0, a_std²)`, `Bᵢ = 0`, `W_g ~ N(0, gate_std²)`, `W_noise = 0`.
    pub fn init(config: SmolConfig, weights: &ModelWeights<T>, mask_dim: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if mask_dim == 0 {
            return Err(Error::invalid("gate input dimension must be positive"));
        }
        let mut loras = Vec::with_capacity(weights.layers.len() * MatrixKind::ALL.len());
        for layer in &weights.layers {
            for kind in MatrixKind::ALL {
                let w = layer.matrix(kind);
                let (out, inp) = (w.shape()[0], w.shape()[1]);
                loras.push(
                    (0..config.n_loras)
                        .map(|_| LoraPair {
                            a: Tensor::new([config.rank, inp], rng.normal_vec(config.rank * inp, config.a_std))
                                .expect("shape"),
                            b: Tensor::zeros([out, config.rank]),
                        })
                        .collect(),
                );
            }
        }
        let t = config.n_loras;
        let w_gate = Tensor::new([mask_dim, t], rng.normal_vec(mask_dim * t, config.gate_std))?;
        Ok(Self {
            w_gate,
            w_noise: Tensor::zeros([mask_dim, t]),
            loras,
            config,
        })
    }

    pub fn mask_dim(&self) -> usize {
        self.w_gate.shape()[0]
    }

    pub fn n_loras(&self) -> usize {
        self.config.n_loras
    }

    pub(crate) fn check_model(&self, weights: &ModelWeights<T>) -> Result<()> {
        if self.loras.len() != weights.layers.len() * MatrixKind::ALL.len() {
            return Err(Error::invalid(format!(
                "adapter covers {} matrices, model has {}",
                self.loras.len(),
                weights.layers.len() * MatrixKind::ALL.len()
            )));
        }
        for (l, layer) in weights.layers.iter().enumerate() {
            for kind in MatrixKind::ALL {
                let w = layer.matrix(kind);
                for p in &self.loras[MatrixId::new(l, kind).flat()] {
                    if p.b.shape()[0] != w.shape()[0] || p.a.shape()[1] != w.shape()[1] {
                        return Err(Error::invalid(format!("adapter for layer {l} {kind:?} does not fit the weight")));
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundBank {
        let mut leaf = |t: &Tensor<T>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let pairs = self
            .loras
            .iter()
            .map(|m| m.iter().map(|p| (leaf(&p.a), leaf(&p.b))).collect())
            .collect();
        let w_gate = leaf(&self.w_gate);
        let w_noise = leaf(&self.w_noise);
        BoundBank { w_gate, w_noise, pairs }
    }

    /// Gate evaluated inside `g`. Returns the full coefficient vector and a
    /// scalar node per active LoRA.
    pub(crate) fn gate_in_graph(
        &self,
        g: &mut Graph<T>,
        bound: &BoundBank,
        mask: &[f64],
        mode: GateMode<'_>,
    ) -> Result<(Var, Vec<(usize, Var)>)> {
        if mask.len() != self.mask_dim() {
            return Err(Error::ShapeMismatch {
                op: "gate",
                lhs: vec![mask.len()],
                rhs: self.w_gate.shape().to_vec(),
            });
        }
        let t = self.n_loras();
        let m = g.constant(Tensor::new([1, mask.len()], mask.iter().map(|&v| T::of(v)).collect())?);
        let mut h = g.matmul(m, bound.w_gate)?;
        if let GateMode::Train(rng) = mode {
            if self.config.noise {
                let raw = g.matmul(m, bound.w_noise)?;
                let std = g.softplus(raw);
                let eps = g.constant(Tensor::new([1, t], rng.normal_vec(t, 1.0))?);
                let noise = g.mul(std, eps)?;
                h = g.add(h, noise)?;
            }
        }
        let hv: Vec<f64> = g.value(h).data().iter().map(|v| v.as_f64()).collect();
        let active = top_k_indices(&hv, self.config.top_k);
        let drop: Vec<bool> = (0..t).map(|i| !active.contains(&i)).collect();
        let kept = g.masked_fill(h, &drop, T::neg_infinity())?;
        let coef = g.softmax(kept);
        let coefs = active
            .iter()
            .map(|&i| g.select(coef, i).map(|v| (i, v)))
            .collect::<Result<Vec<_>>>()?;
        Ok((coef, coefs))
    }

    /// `G(mask)` as plain values.
    pub fn gate(&self, mask: &[f64], mode: GateMode<'_>) -> Result<GateOutput> {
        let mut g = Graph::new();
        let bound = BoundBank {
            w_gate: g.constant(self.w_gate.clone()),
            w_noise: g.constant(self.w_noise.clone()),
            pairs: Vec::new(),
        };
        let (coef, coefs) = self.gate_in_graph(&mut g, &bound, mask, mode)?;
        Ok(GateOutput {
            coefficients: g.value(coef).data().iter().map(|v| v.as_f64()).collect(),
            active: coefs.into_iter().map(|(i, _)| i).collect(),
        })
    }

    fn pairs(&self, id: MatrixId) -> Result<&[LoraPair<T>]> {
        self.loras
            .get(id.flat())
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::invalid(format!("no adapter for layer {} {:?}", id.layer, id.kind)))
    }

    /// Dense `Σᵢ G(m)ᵢ BᵢAᵢ` for one matrix.
    pub fn delta(&self, id: MatrixId, gate: &GateOutput) -> Result<Tensor<T>> {
        let pairs = self.pairs(id)?;
        let (out, inp) = (pairs[0].b.shape()[0], pairs[0].a.shape()[1]);
        let mut acc = Tensor::zeros([out, inp]);
        for (i, &c) in gate.coefficients.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let mut ba = pairs[i].b.matmul(&pairs[i].a)?;
            ba.scale_assign(T::of(c));
            acc.add_assign(&ba)?;
        }
        Ok(acc)
    }

    /// Effective weight `W_base + Σᵢ G(m)ᵢ ΔWᵢ`.
    pub fn composite(&self, base: &ModelWeights<T>, id: MatrixId, gate: &GateOutput) -> Result<Tensor<T>> {
        let layer = base
            .layers
            .get(id.layer)
            .ok_or_else(|| Error::invalid(format!("no layer {}", id.layer)))?;
        let mut w = layer.matrix(id.kind).clone();
        w.add_assign(&self.delta(id, gate)?)?;
        Ok(w)
    }

    /// Noise-free dense deltas for every matrix of the retained layers,
    /// sliced to the retained rows and columns of the subnet.
    pub fn merge(&self, mask: &[f64], slices: &[SliceSpec], mode: GateMode<'_>) -> Result<Vec<(MatrixId, Tensor<T>)>> {
        if matches!(mode, GateMode::Train(_)) {
            return Err(Error::invalid("adapter merge requires the noise-free gate"));
        }
        let gate = self.gate(mask, GateMode::Eval)?;
        let mut out = Vec::with_capacity(slices.len() * MatrixKind::ALL.len());
        for spec in slices {
            for kind in MatrixKind::ALL {
                let id = MatrixId::new(spec.layer, kind);
                out.push((id, spec.slice(kind, &self.delta(id, &gate)?)?));
            }
        }
        Ok(out)
    }

    /// Tensors under the reserved `smol.` prefix.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (flat, pairs) in self.loras.iter().enumerate() {
            let layer = flat / MatrixKind::ALL.len();
            let kind = MatrixKind::ALL[flat % MatrixKind::ALL.len()];
            for (i, p) in pairs.iter().enumerate() {
                out.push((format!("smol.layers.{layer}.{}.{i}.a", kind.name()), &p.a));
                out.push((format!("smol.layers.{layer}.{}.{i}.b", kind.name()), &p.b));
            }
        }
        out.push(("smol.w_gate".into(), &self.w_gate));
        out.push(("smol.w_noise".into(), &self.w_noise));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (flat, pairs) in self.loras.iter_mut().enumerate() {
            let layer = flat / MatrixKind::ALL.len();
            let kind = MatrixKind::ALL[flat % MatrixKind::ALL.len()];
            for (i, p) in pairs.iter_mut().enumerate() {
                out.push((format!("smol.layers.{layer}.{}.{i}.a", kind.name()), &mut p.a));
                out.push((format!("smol.layers.{layer}.{}.{i}.b", kind.name()), &mut p.b));
            }
        }
        out.push(("smol.w_gate".into(), &mut self.w_gate));
        out.push(("smol.w_noise".into(), &mut self.w_noise));
        out
    }

    /// Rebuilds a bank from `smol.`-prefixed tensors.
    pub fn from_named(
        config: SmolConfig,
        weights: &ModelWeights<T>,
        tensors: &mut std::collections::BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let mut take = |name: String| tensors.remove(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")));
        let mut loras = Vec::new();
        for layer in 0..weights.layers.len() {
            for kind in MatrixKind::ALL {
                let mut pairs = Vec::with_capacity(config.n_loras);
                for i in 0..config.n_loras {
                    pairs.push(LoraPair {
                        a: take(format!("smol.layers.{layer}.{}.{i}.a", kind.name()))?,
                        b: take(format!("smol.layers.{layer}.{}.{i}.b", kind.name()))?,
                    });
                }
                loras.push(pairs);
            }
        }
        let bank = Self {
            w_gate: take("smol.w_gate".into())?,
            w_noise: take("smol.w_noise".into())?,
            loras,
            config,
        };
        bank.check_model(weights)?;
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelWeights};

    fn bank_with_gate(w_gate: Vec<f64>, mask_dim: usize, k: usize) -> SmolBank<f64> {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 1,
            d_head: 4,
            d_ffn: 6,
            vocab_size: 5,
            max_seq_len: 4,
            norm_eps: 1e-5,
        };
        let mut rng = Rng::new(0);
        let w = ModelWeights::init(&cfg, &mut rng);
        let t = w_gate.len() / mask_dim;
        let mut bank = SmolBank::init(
            SmolConfig {
                n_loras: t,
                top_k: k,
                ..SmolConfig::default()
            },
            &w,
            mask_dim,
            &mut rng,
        )
        .unwrap();
        bank.w_gate = Tensor::new([mask_dim, t], w_gate).unwrap();
        bank
    }

    #[test]
    fn hand_case_two_of_three() {
        // mask = [1] so H = W_g row = (1, 2, 0)
        let bank = bank_with_gate(vec![1.0, 2.0, 0.0], 1, 2);
        let out = bank.gate(&[1.0], GateMode::Eval).unwrap();
        assert_eq!(out.active, vec![0, 1]);
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        assert!((out.coefficients[0] - e1 / (e1 + e2)).abs() < 1e-12);
        assert!((out.coefficients[1] - e2 / (e1 + e2)).abs() < 1e-12);
        assert_eq!(out.coefficients[2], 0.0);
        assert!((out.coefficients[0] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn k_equals_t_is_plain_softmax_and_k_one_is_one_hot() {
        let bank = bank_with_gate(vec![0.3, -1.0, 2.0, 0.5], 1, 4);
        let out = bank.gate(&[1.0], GateMode::Eval).unwrap();
        let z: f64 = [0.3f64, -1.0, 2.0, 0.5].iter().map(|v| v.exp()).sum();
        assert!((out.coefficients[2] - 2f64.exp() / z).abs() < 1e-12);
        let bank = bank_with_gate(vec![0.3, -1.0, 2.0, 0.5], 1, 1);
        assert_eq!(bank.gate(&[1.0], GateMode::Eval).unwrap().coefficients, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 3.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.0; 5], 2), vec![0, 1]);
    }

    #[test]
    fn noise_only_in_training() {
        let mut bank = bank_with_gate(vec![0.0, 0.1, 0.2, 0.3, 0.4], 1, 2);
        bank.w_noise = Tensor::full([1, 5], 3.0);
        let a = bank.gate(&[1.0], GateMode::Eval).unwrap();
        let b = bank.gate(&[1.0], GateMode::Eval).unwrap();
        assert_eq!(a, b);
        let mut rng = Rng::new(5);
        let sets: Vec<_> = (0..20)
            .map(|_| bank.gate(&[1.0], GateMode::Train(&mut rng)).unwrap().active)
            .collect();
        assert!(sets.iter().any(|s| s != &a.active), "noise should perturb selection");
    }

    #[test]
    fn gate_rejects_wrong_mask_dim() {
        let bank = bank_with_gate(vec![0.0, 1.0], 1, 1);
        assert!(bank.gate(&[1.0, 0.0], GateMode::Eval).is_err());
    }

    #[test]
    fn zero_b_means_zero_delta_and_merge_rejects_noise() {
        let bank = bank_with_gate(vec![0.5, 0.1, 0.2], 1, 2);
        let gate = bank.gate(&[1.0], GateMode::Eval).unwrap();
        let d = bank.delta(MatrixId::new(0, MatrixKind::Up), &gate).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        let mut rng = Rng::new(1);
        assert!(bank.merge(&[1.0], &[], GateMode::Train(&mut rng)).is_err());
    }
}

//! Small pre-norm decoder-only transformer with elastic execution.

pub mod checkpoint;
mod extract;
mod forward;
mod pretrain;

pub use extract::SliceSpec;
pub use forward::{BlockCapture, TokenBatch};
pub use pretrain::{full_nll, pretrain, pretrain_step, PretrainConfig, PretrainReport};
pub(crate) use forward::{forward_graph, ActiveAdapter, BoundWeights, ForwardArgs};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::smol::SmolBank;
use crate::tensor::Tensor;
use crate::width::WidthPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            d_ffn: 256,
            vocab_size: crate::data::VOCAB_SIZE,
            max_seq_len: 128,
            norm_eps: default_norm_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("model.n_layers", self.n_layers),
            ("model.d_model", self.d_model),
            ("model.n_heads", self.n_heads),
            ("model.d_head", self.d_head),
            ("model.d_ffn", self.d_ffn),
            ("model.vocab_size", self.vocab_size),
            ("model.max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("model.norm_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn attn_width(&self) -> usize {
        self.n_heads * self.d_head
    }
}

/// The seven adapted matrices of a decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatrixKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 7] = [
        MatrixKind::Q,
        MatrixKind::K,
        MatrixKind::V,
        MatrixKind::O,
        MatrixKind::Gate,
        MatrixKind::Up,
        MatrixKind::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MatrixKind::Q => "wq",
            MatrixKind::K => "wk",
            MatrixKind::V => "wv",
            MatrixKind::O => "wo",
            MatrixKind::Gate => "w_gate",
            MatrixKind::Up => "w_up",
            MatrixKind::Down => "w_down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Identifies one adapted matrix: `(layer, kind)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MatrixId {
    pub layer: usize,
    pub kind: MatrixKind,
}

impl MatrixId {
    pub fn new(layer: usize, kind: MatrixKind) -> Self {
        Self { layer, kind }
    }

    pub fn flat(self) -> usize {
        self.layer * MatrixKind::ALL.len() + self.kind.index()
    }
}

/// Parameters of one decoder block. Projection weights are stored
/// `[out, in]`; the attention width is `wq.rows()` and may be narrower than
/// the config for extracted models, as may the FFN width.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
    pub b_down: Tensor<T>,
}

impl<T: Scalar> LayerWeights<T> {
    pub fn matrix(&self, kind: MatrixKind) -> &Tensor<T> {
        match kind {
            MatrixKind::Q => &self.wq,
            MatrixKind::K => &self.wk,
            MatrixKind::V => &self.wv,
            MatrixKind::O => &self.wo,
            MatrixKind::Gate => &self.w_gate,
            MatrixKind::Up => &self.w_up,
            MatrixKind::Down => &self.w_down,
        }
    }

    pub fn attn_width(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn ffn_width(&self) -> usize {
        self.w_gate.shape()[0]
    }

    fn named(&self) -> [(&'static str, &Tensor<T>); 11] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ffn_norm", &self.ffn_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 11] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ffn_norm", &mut self.ffn_norm),
            ("w_gate", &mut self.w_gate),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
            ("b_down", &mut self.b_down),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
}

impl<T: Scalar> ModelWeights<T> {
    /// GPT-style initialization: N(0, 0.02) everywhere, block output
    /// projections scaled by `1/√(2N)`, unit norm gains, zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let std = 0.02;
        let out_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let (d, a, f) = (cfg.d_model, cfg.attn_width(), cfg.d_ffn);
        let mut normal = |shape: [usize; 2], s: f64| Tensor::new(shape, rng.normal_vec(shape[0] * shape[1], s)).expect("shape");
        let tok_emb = normal([cfg.vocab_size, d], std);
        let pos_emb = normal([cfg.max_seq_len, d], std);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::full([d], T::one()),
                wq: normal([a, d], std),
                wk: normal([a, d], std),
                wv: normal([a, d], std),
                wo: normal([d, a], out_std),
                bo: Tensor::zeros([d]),
                ffn_norm: Tensor::full([d], T::one()),
                w_gate: normal([f, d], std),
                w_up: normal([f, d], std),
                w_down: normal([d, f], out_std),
                b_down: Tensor::zeros([d]),
            })
            .collect();
        let head = normal([cfg.vocab_size, d], std);
        Self {
            tok_emb,
            pos_emb,
            layers,
            final_norm: Tensor::full([d], T::one()),
            head,
        }
    }

    /// All tensors with stable, sorted-by-construction names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.named_mut().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Sum of squares over every parameter, accumulated in f64.
    pub fn squared_norm(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let expect = |name: &str, t: &Tensor<T>, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(())
        };
        expect("tok_emb", &self.tok_emb, &[cfg.vocab_size, d])?;
        expect("pos_emb", &self.pos_emb, &[cfg.max_seq_len, d])?;
        expect("final_norm", &self.final_norm, &[d])?;
        expect("head", &self.head, &[cfg.vocab_size, d])?;
        if self.layers.len() > cfg.n_layers {
            return Err(Error::Format(format!("{} layers exceed config", self.layers.len())));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let (a, f) = (l.attn_width(), l.ffn_width());
            if a % cfg.d_head != 0 || a > cfg.attn_width() || f > cfg.d_ffn {
                return Err(Error::Format(format!("layer {i}: widths ({a}, {f}) inconsistent with config")));
            }
            for (n, t, s) in [
                ("attn_norm", &l.attn_norm, vec![d]),
                ("wq", &l.wq, vec![a, d]),
                ("wk", &l.wk, vec![a, d]),
                ("wv", &l.wv, vec![a, d]),
                ("wo", &l.wo, vec![d, a]),
                ("bo", &l.bo, vec![d]),
                ("ffn_norm", &l.ffn_norm, vec![d]),
                ("w_gate", &l.w_gate, vec![f, d]),
                ("w_up", &l.w_up, vec![f, d]),
                ("w_down", &l.w_down, vec![d, f]),
                ("b_down", &l.b_down, vec![d]),
            ] {
                expect(&format!("layers.{i}.{n}"), t, &s)?;
            }
        }
        Ok(())
    }
}

/// A base model plus the optional width plan and shape-aware adapter that
/// make it elastic.
#[derive(Debug, Clone)]
pub struct ElasticModel<T> {
    pub config: ModelConfig,
    pub weights: ModelWeights<T>,
    pub width_plan: Option<WidthPlan>,
    pub adapter: Option<SmolBank<T>>,
}

impl<T: Scalar> ElasticModel<T> {
    pub fn new(config: ModelConfig, weights: ModelWeights<T>) -> Result<Self> {
        config.validate()?;
        weights.check(&config)?;
        Ok(Self {
            config,
            weights,
            width_plan: None,
            adapter: None,
        })
    }

    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let weights = ModelWeights::init(&config, rng);
        Self::new(config, weights)
    }

    pub fn n_layers(&self) -> usize {
        self.weights.layers.len()
    }

    pub fn with_width_plan(mut self, plan: WidthPlan) -> Result<Self> {
        plan.check_model(&self)?;
        self.width_plan = Some(plan);
        Ok(self)
    }

    pub fn with_adapter(mut self, bank: SmolBank<T>) -> Result<Self> {
        bank.check_model(&self.weights)?;
        self.adapter = Some(bank);
        Ok(self)
    }

    /// Drops plan and adapter, keeping only the base weights.
    pub fn base(&self) -> Self {
        Self {
            config: self.config.clone(),
            weights: self.weights.clone(),
            width_plan: None,
            adapter: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }
}

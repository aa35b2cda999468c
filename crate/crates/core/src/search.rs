//! Analytic efficiency model, wall-clock profiling of extracted subnets and
//! the two-stage grid search for the final subnet.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalCache, Evaluator};
use crate::model::{ElasticModel, ModelConfig, TokenBatch};
use crate::scalar::Scalar;
use crate::shape::{ShapeGrid, SubnetShape};

/// Retained attention and FFN channels of each executed layer.
pub fn layer_widths<T: Scalar>(model: &ElasticModel<T>, shape: &SubnetShape) -> Result<Vec<(usize, usize)>> {
    Ok(model
        .slice_specs(&shape.exec())?
        .into_iter()
        .map(|s| (s.attn_channels.len(), s.ffn_channels.len()))
        .collect())
}

/// Parameters of a dense model whose layers have the given `(attention,
/// ffn)` inner widths.
pub fn param_count(cfg: &ModelConfig, widths: &[(usize, usize)]) -> usize {
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let outer = v * d + cfg.max_seq_len * d + d + v * d;
    let per_layer: usize = widths.iter().map(|&(a, f)| 4 * d * a + 3 * d * f + 4 * d).sum();
    outer + per_layer
}

/// Multiply-add FLOPs (2 per MAC) of one token's forward at context length
/// `ctx`: all projections, attention scores and context mixing, and the
/// output head. Norms, activations and embedding lookups are not counted.
pub fn flops_per_token(cfg: &ModelConfig, widths: &[(usize, usize)], ctx: usize) -> u64 {
    let d = cfg.d_model as u64;
    let ctx = ctx as u64;
    let layers: u64 = widths
        .iter()
        .map(|&(a, f)| {
            let (a, f) = (a as u64, f as u64);
            2 * d * 3 * a + 2 * a * d + 2 * a * ctx * 2 + 2 * d * f * 3
        })
        .sum();
    layers + 2 * d * cfg.vocab_size as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub shape_id: String,
    pub depth: usize,
    pub width_ratio: f64,
    pub params: usize,
    pub flops_per_token: u64,
    pub latency_ms_p50: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    pub runs: usize,
    pub warmup: usize,
    pub seq_len: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            runs: 20,
            warmup: 3,
            seq_len: 128,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median forward latency of a dense model on one sequence, in ms.
pub fn measure_latency<T: Scalar>(model: &ElasticModel<T>, cfg: &ProfileConfig) -> Result<f64> {
    let tokens: Vec<usize> = (0..cfg.seq_len).map(|i| (i * 31 + 7) % model.config.vocab_size).collect();
    let batch = TokenBatch::single(tokens)?;
    for _ in 0..cfg.warmup {
        model.forward_full(&batch)?;
    }
    let mut times = Vec::with_capacity(cfg.runs);
    for _ in 0..cfg.runs.max(1) {
        let t = Instant::now();
        std::hint::black_box(model.forward_full(&batch)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(times))
}

/// Extracts every shape and records its size, analytic cost and measured
/// latency. Runs on the calling thread only.
pub fn profile<T: Scalar>(model: &ElasticModel<T>, shapes: &[SubnetShape], cfg: &ProfileConfig) -> Result<Vec<ProfileRow>> {
    shapes
        .iter()
        .map(|s| {
            let wrap = |e: Error| Error::Subnet {
                shape: s.id(),
                source: Box::new(e),
            };
            let dense = model.extract(s).map_err(wrap)?;
            let widths = layer_widths(model, s).map_err(wrap)?;
            let params = dense.param_count();
            debug_assert_eq!(params, param_count(&model.config, &widths));
            Ok(ProfileRow {
                shape_id: s.id(),
                depth: s.depth,
                width_ratio: s.width_ratio,
                params,
                flops_per_token: flops_per_token(&model.config, &widths, cfg.seq_len),
                latency_ms_p50: measure_latency(&dense, cfg).map_err(wrap)?,
            })
        })
        .collect()
}

pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut s = String::from("shape_id,depth,width_ratio,params,flops_per_token,latency_ms_p50\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.4}",
            r.shape_id, r.depth, r.width_ratio, r.params, r.flops_per_token, r.latency_ms_p50
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    MaxParams,
    MaxFlops,
    MaxLatencyMs,
}

impl Constraint {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "params" | "max_params" => Ok(Constraint::MaxParams),
            "flops" | "max_flops" => Ok(Constraint::MaxFlops),
            "latency" | "latency_ms" | "max_latency_ms" => Ok(Constraint::MaxLatencyMs),
            other => Err(Error::config("search.constraint", format!("unknown constraint `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpec {
    pub constraint: Constraint,
    pub budget: f64,
    #[serde(default = "default_stride")]
    pub depth_stride: usize,
    #[serde(default = "default_stride")]
    pub width_stride: usize,
    #[serde(default = "default_radius")]
    pub radius: usize,
    #[serde(default = "default_ctx")]
    pub context: usize,
}

fn default_stride() -> usize {
    2
}
fn default_radius() -> usize {
    1
}
fn default_ctx() -> usize {
    128
}

impl SearchSpec {
    pub fn new(constraint: Constraint, budget: f64) -> Self {
        Self {
            constraint,
            budget,
            depth_stride: default_stride(),
            width_stride: default_stride(),
            radius: default_radius(),
            context: default_ctx(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return Err(Error::config("search.budget", "must be positive"));
        }
        if self.depth_stride == 0 || self.width_stride == 0 {
            return Err(Error::config("search.stride", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub shape_id: String,
    pub depth_index: usize,
    pub width_index: usize,
    pub params: usize,
    pub cost: f64,
    pub feasible: bool,
    /// Calibration score; only feasible shapes are evaluated.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SearchOutcome {
    Found {
        shape: SubnetShape,
        score: f64,
        cost: f64,
        slack: f64,
        stage1_score: f64,
        /// Measured re-check for latency budgets (10% tolerance).
        latency_verified: Option<bool>,
    },
    Infeasible {
        /// The cheapest shape of the grid and its cost.
        tightest: SubnetShape,
        cost: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub spec: SearchSpec,
    pub outcome: SearchOutcome,
    pub stage1: Vec<TraceEntry>,
    pub stage2: Vec<TraceEntry>,
    /// Set when no coarse shape was feasible and stage 2 scanned the grid.
    pub fallback: bool,
}

/// Cost of a shape under the constraint. Latency uses `latency` when given
/// (e.g. a profile) and measures otherwise.
pub fn shape_cost<T: Scalar>(
    model: &ElasticModel<T>,
    shape: &SubnetShape,
    spec: &SearchSpec,
    latency: &dyn Fn(&SubnetShape) -> Result<f64>,
) -> Result<(usize, f64)> {
    let widths = layer_widths(model, shape)?;
    let params = param_count(&model.config, &widths);
    let cost = match spec.constraint {
        Constraint::MaxParams => params as f64,
        Constraint::MaxFlops => flops_per_token(&model.config, &widths, spec.context) as f64,
        Constraint::MaxLatencyMs => latency(shape)?,
    };
    Ok((params, cost))
}

/// Coarse search on every `stride`-th grid point, then a full scan of the
/// neighbourhood around the coarse winner. Higher scores win; ties go to
/// fewer parameters, then to the earlier grid position.
pub fn search<T: Scalar, E: Evaluator<T> + ?Sized>(
    model: &ElasticModel<T>,
    grid: &ShapeGrid,
    shapes: &[SubnetShape],
    evaluator: &E,
    cache: &EvalCache,
    spec: &SearchSpec,
    latency: &dyn Fn(&SubnetShape) -> Result<f64>,
) -> Result<SearchResult> {
    spec.validate()?;
    if shapes.len() != grid.len() {
        return Err(Error::invalid(format!("{} shapes for a grid of {}", shapes.len(), grid.len())));
    }
    let nw = grid.widths.len();
    let at = |d: usize, w: usize| &shapes[d * nw + w];
    let mut costs = Vec::with_capacity(shapes.len());
    for s in shapes {
        costs.push(shape_cost(model, s, spec, latency)?);
    }
    let entry = |d: usize, w: usize| -> Result<TraceEntry> {
        let s = at(d, w);
        let (params, cost) = costs[d * nw + w];
        let feasible = cost <= spec.budget;
        let score = if feasible {
            Some(cache.evaluate(evaluator, model, &s.exec())?)
        } else {
            None
        };
        Ok(TraceEntry {
            shape_id: s.id(),
            depth_index: d,
            width_index: w,
            params,
            cost,
            feasible,
            score,
        })
    };
    let better = |a: &TraceEntry, b: &TraceEntry| -> bool {
        let (sa, sb) = (a.score.unwrap_or(f64::NEG_INFINITY), b.score.unwrap_or(f64::NEG_INFINITY));
        sa > sb || (sa == sb && a.params < b.params)
    };
    let pick = |trace: &[TraceEntry]| -> Option<TraceEntry> {
        let mut best: Option<&TraceEntry> = None;
        for e in trace.iter().filter(|e| e.feasible) {
            if best.is_none_or(|b| better(e, b)) {
                best = Some(e);
            }
        }
        best.cloned()
    };

    let mut stage1 = Vec::new();
    for (d, w) in grid.indices() {
        if d % spec.depth_stride == 0 && w % spec.width_stride == 0 {
            stage1.push(entry(d, w)?);
        }
    }
    let winner1 = pick(&stage1);
    let fallback = winner1.is_none();
    let mut stage2 = Vec::new();
    for (d, w) in grid.indices() {
        let near = match &winner1 {
            Some(c) => d.abs_diff(c.depth_index) <= spec.radius && w.abs_diff(c.width_index) <= spec.radius,
            None => true,
        };
        if near {
            stage2.push(entry(d, w)?);
        }
    }
    let outcome = match pick(&stage2) {
        Some(best) => {
            let shape = at(best.depth_index, best.width_index).clone();
            let latency_verified = if spec.constraint == Constraint::MaxLatencyMs {
                let measured = measure_latency(&model.extract(&shape)?, &ProfileConfig::default())?;
                Some(measured <= spec.budget * 1.1)
            } else {
                None
            };
            SearchOutcome::Found {
                score: best.score.unwrap_or(f64::NAN),
                cost: best.cost,
                slack: spec.budget - best.cost,
                stage1_score: winner1.as_ref().and_then(|w| w.score).unwrap_or(f64::NEG_INFINITY),
                shape,
                latency_verified,
            }
        }
        None => {
            let (i, c) = costs
                .iter()
                .enumerate()
                .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
                .map(|(i, c)| (i, c.1))
                .expect("grid is not empty");
            SearchOutcome::Infeasible {
                tightest: shapes[i].clone(),
                cost: c,
            }
        }
    };
    Ok(SearchResult {
        spec: spec.clone(),
        outcome,
        stage1,
        stage2,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn full_desk_param_count_by_hand() {
        let c = cfg();
        let widths = vec![(64, 256); 8];
        // embeddings 96*64 + 128*64, final norm 64, head 96*64
        let outer = 6144 + 8192 + 64 + 6144;
        // q,k,v,o 4*64*64, gate/up/down 3*64*256, two norms and two biases 4*64
        let layer = 16384 + 49152 + 256;
        assert_eq!(param_count(&c, &widths), outer + 8 * layer);
    }

    #[test]
    fn layer_flops_are_linear_in_depth() {
        let c = cfg();
        let head = 2 * 64 * 96;
        let f4 = flops_per_token(&c, &[(64, 256); 4], 128) - head;
        let f8 = flops_per_token(&c, &[(64, 256); 8], 128) - head;
        assert_eq!(f8, 2 * f4);
        assert!(param_count(&c, &[(32, 128); 8]) < param_count(&c, &[(48, 192); 8]));
    }

    #[test]
    fn extracted_param_count_matches_analytic() {
        use crate::{LayerMask, Rng, ShapeGrid, TokenBatch, WidthPlan};
        let c = ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_head: 8,
            d_ffn: 24,
            vocab_size: 11,
            max_seq_len: 8,
            norm_eps: 1e-5,
        };
        let mut rng = Rng::new(3);
        let base = ElasticModel::<f64>::init(c.clone(), &mut rng).unwrap();
        let grid = ShapeGrid::new(vec![3, 2], vec![1.0, 0.75, 0.5], 2).unwrap();
        let calib = vec![TokenBatch::new(2, 8, (0..16).map(|_| rng.below(11)).collect()).unwrap()];
        let plan = WidthPlan::calibrate(&base, &calib, &grid.widths).unwrap();
        let model = base.with_width_plan(plan).unwrap();
        for (di, wi) in grid.indices() {
            let mask = if di == 0 { LayerMask::all(3) } else { LayerMask::keeping(3, &[0, 2]) };
            let shape = SubnetShape::new(&grid, di, wi, mask).unwrap();
            let widths = layer_widths(&model, &shape).unwrap();
            assert_eq!(model.extract(&shape).unwrap().param_count(), param_count(&c, &widths));
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn budget_must_be_positive() {
        assert!(SearchSpec::new(Constraint::MaxParams, 0.0).validate().is_err());
        assert!(Constraint::parse("watts").is_err());
    }
}

//! Width selection: per-channel activation statistics of each block's last
//! matrix, fluctuation scores, globally ranked nested masks and the
//! compensation biases that stand in for pruned channels.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{ElasticModel, MatrixKind, TokenBatch};
use crate::scalar::Scalar;
use crate::shape::ExecShape;
use crate::tensor::{Graph, Tensor};

/// Running mean and population variance of a set of channels (Chan et al.
/// parallel update, so partial statistics merge exactly).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub count: u64,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
}

impl ChannelStats {
    pub fn new(width: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Adds every row of a row-major `[rows, width]` buffer.
    pub fn push_rows<T: Scalar>(&mut self, data: &[T]) -> Result<()> {
        let w = self.width();
        if w == 0 {
            return Ok(());
        }
        if data.len() % w != 0 {
            return Err(Error::invalid(format!("{} values do not form rows of width {w}", data.len())));
        }
        let rows = data.len() / w;
        if rows == 0 {
            return Ok(());
        }
        let mut batch = ChannelStats::new(w);
        batch.count = rows as u64;
        for row in data.chunks_exact(w) {
            for (m, v) in batch.mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        for m in &mut batch.mean {
            *m /= rows as f64;
        }
        for row in data.chunks_exact(w) {
            for ((s, m), v) in batch.m2.iter_mut().zip(&batch.mean).zip(row) {
                let d = v.as_f64() - m;
                *s += d * d;
            }
        }
        self.merge(&batch)
    }

    pub fn merge(&mut self, other: &ChannelStats) -> Result<()> {
        if other.width() != self.width() {
            return Err(Error::invalid(format!(
                "cannot merge statistics of width {} into width {}",
                other.width(),
                self.width()
            )));
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.width() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
        Ok(())
    }

    /// Population variance (divides by the sample count).
    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.width()];
        }
        self.m2.iter().map(|s| (s / self.count as f64).max(0.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub attn: ChannelStats,
    pub ffn: ChannelStats,
}

/// Statistics of the last-matrix inputs of every block, gathered on the
/// full-width base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub layers: Vec<LayerStats>,
}

impl ActivationStats {
    pub fn for_model<T: Scalar>(model: &ElasticModel<T>) -> Self {
        Self {
            layers: model
                .weights
                .layers
                .iter()
                .map(|l| LayerStats {
                    attn: ChannelStats::new(l.attn_width()),
                    ffn: ChannelStats::new(l.ffn_width()),
                })
                .collect(),
        }
    }

    /// Number of token positions observed.
    pub fn tokens(&self) -> u64 {
        self.layers.first().map_or(0, |l| l.ffn.count)
    }

    pub fn merge(&mut self, other: &ActivationStats) -> Result<()> {
        if other.layers.len() != self.layers.len() {
            return Err(Error::invalid("statistics cover different layer counts"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.attn.merge(&b.attn)?;
            a.ffn.merge(&b.ffn)?;
        }
        Ok(())
    }
}

/// Runs the full-width base model over the calibration batches and records
/// per-channel statistics of each block's last-matrix inputs.
pub fn collect_stats<T: Scalar>(model: &ElasticModel<T>, calibration: &[TokenBatch]) -> Result<ActivationStats> {
    if calibration.iter().all(|b| b.tokens.is_empty()) {
        return Err(Error::invalid("calibration set is empty"));
    }
    let base = model.base();
    let shape = ExecShape::full(base.n_layers());
    let mut stats = ActivationStats::for_model(&base);
    for batch in calibration {
        let mut g = Graph::new();
        let mut caps = Vec::new();
        base.forward_with_capture(&mut g, batch, &shape, Some(&mut caps))?;
        for c in caps {
            let s = &mut stats.layers[c.layer];
            s.attn.push_rows(g.value(c.attn_in).data())?;
            s.ffn.push_rows(g.value(c.ffn_in).data())?;
        }
    }
    Ok(stats)
}

/// Scores and variances of one block's input channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScores {
    pub scores: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawScores {
    pub d_head: usize,
    pub attn: Vec<BlockScores>,
    pub ffn: Vec<BlockScores>,
}

/// Squared L2 norm of every column of a `[out, in]` matrix.
pub fn column_sq_norms<T: Scalar>(w: &Tensor<T>) -> Vec<f64> {
    let cols = w.shape().get(1).copied().unwrap_or(0);
    let mut out = vec![0.0; cols];
    if cols == 0 {
        return out;
    }
    for row in w.data().chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            let v = v.as_f64();
            *o += v * v;
        }
    }
    out
}

fn block_scores<T: Scalar>(stats: &ChannelStats, w: &Tensor<T>, what: &str) -> Result<BlockScores> {
    let norms = column_sq_norms(w);
    if norms.len() != stats.width() {
        return Err(Error::invalid(format!(
            "{what}: statistics of width {} for a matrix with {} inputs",
            stats.width(),
            norms.len()
        )));
    }
    let variance = stats.variance();
    Ok(BlockScores {
        scores: variance.iter().zip(&norms).map(|(v, n)| v * n).collect(),
        variance,
    })
}

/// Fluctuation score of every input channel: its variance times the squared
/// norm of the matching column of the block's last matrix.
pub fn score<T: Scalar>(stats: &ActivationStats, model: &ElasticModel<T>) -> Result<RawScores> {
    let n = model.n_layers();
    if stats.layers.len() != n {
        return Err(Error::invalid(format!(
            "statistics for {} blocks but the model has {n} layers",
            stats.layers.len()
        )));
    }
    let mut attn = Vec::with_capacity(n);
    let mut ffn = Vec::with_capacity(n);
    for (i, (s, l)) in stats.layers.iter().zip(&model.weights.layers).enumerate() {
        if s.ffn.count == 0 || s.attn.count == 0 {
            return Err(Error::invalid(format!("no statistics for layer {i}")));
        }
        attn.push(block_scores(&s.attn, l.matrix(MatrixKind::O), &format!("layers.{i}.wo"))?);
        ffn.push(block_scores(&s.ffn, l.matrix(MatrixKind::Down), &format!("layers.{i}.w_down"))?);
    }
    Ok(RawScores {
        d_head: model.config.d_head,
        attn,
        ffn,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Attn,
    Ffn,
}

/// One prunable unit: a whole head or a single FFN channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub layer: usize,
    pub kind: BlockKind,
    pub index: usize,
    pub channels: usize,
    pub score: f64,
    pub variance: f64,
}

/// Divides by the sum; an all-zero block stays zero.
pub fn normalize(scores: &[f64]) -> Vec<f64> {
    let s: f64 = scores.iter().sum();
    if s > 0.0 {
        scores.iter().map(|v| v / s).collect()
    } else {
        vec![0.0; scores.len()]
    }
}

/// All groups ordered from most to least important. Ties fall to the higher
/// variance, then to the earlier position.
pub fn rank_groups(raw: &RawScores) -> Result<Vec<Group>> {
    if raw.d_head == 0 {
        return Err(Error::invalid("d_head must be positive"));
    }
    let mut groups = Vec::new();
    for (layer, b) in raw.attn.iter().enumerate() {
        if b.scores.len() % raw.d_head != 0 {
            return Err(Error::invalid(format!(
                "attention block {layer} has {} channels, not a multiple of d_head {}",
                b.scores.len(),
                raw.d_head
            )));
        }
        let norm = normalize(&b.scores);
        for (h, (s, v)) in norm.chunks(raw.d_head).zip(b.variance.chunks(raw.d_head)).enumerate() {
            groups.push(Group {
                layer,
                kind: BlockKind::Attn,
                index: h,
                channels: raw.d_head,
                score: s.iter().sum::<f64>() / raw.d_head as f64,
                variance: v.iter().sum::<f64>() / raw.d_head as f64,
            });
        }
    }
    for (layer, b) in raw.ffn.iter().enumerate() {
        let norm = normalize(&b.scores);
        for (i, (&s, &v)) in norm.iter().zip(&b.variance).enumerate() {
            groups.push(Group {
                layer,
                kind: BlockKind::Ffn,
                index: i,
                channels: 1,
                score: s,
                variance: v,
            });
        }
    }
    groups.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(b.variance.partial_cmp(&a.variance).unwrap_or(Ordering::Equal))
            .then((a.layer, a.kind, a.index).cmp(&(b.layer, b.kind, b.index)))
    });
    Ok(groups)
}

fn check_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.is_empty() {
        return Err(Error::invalid("no width ratios"));
    }
    for &r in ratios {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::invalid(format!("width ratio {r} outside (0, 1]")));
        }
    }
    if ratios[0] != 1.0 {
        return Err(Error::invalid("the first width ratio must be 1"));
    }
    if ratios.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("width ratios must be strictly descending"));
    }
    Ok(())
}

/// Retention masks of one width ratio: `heads[layer][h]`, `ffn[layer][c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioMasks {
    pub ratio: f64,
    pub heads: Vec<Bits>,
    pub ffn: Vec<Bits>,
}

impl RatioMasks {
    pub fn retained_channels(&self, d_head: usize) -> usize {
        self.heads.iter().map(|h| h.count() * d_head).sum::<usize>() + self.ffn.iter().map(Bits::count).sum::<usize>()
    }

    /// Channel mask of a layer's attention context (heads expanded).
    pub fn attn_channels(&self, layer: usize, d_head: usize) -> Vec<bool> {
        self.heads[layer].0.iter().flat_map(|&k| std::iter::repeat_n(k, d_head)).collect()
    }
}

/// For each ratio keeps the highest-ranked groups until at least
/// `ceil(ratio * total channels)` channels are retained.
pub fn build_masks(raw: &RawScores, ratios: &[f64]) -> Result<(Vec<Group>, Vec<RatioMasks>)> {
    check_ratios(ratios)?;
    let ranking = rank_groups(raw)?;
    let total: usize = ranking.iter().map(|g| g.channels).sum();
    let masks = ratios
        .iter()
        .map(|&r| {
            let target = (r * total as f64 - 1e-9).ceil().max(0.0) as usize;
            let mut m = RatioMasks {
                ratio: r,
                heads: raw.attn.iter().map(|b| Bits(vec![false; b.scores.len() / raw.d_head])).collect(),
                ffn: raw.ffn.iter().map(|b| Bits(vec![false; b.scores.len()])).collect(),
            };
            let mut kept = 0;
            for g in &ranking {
                if kept >= target {
                    break;
                }
                match g.kind {
                    BlockKind::Attn => m.heads[g.layer].0[g.index] = true,
                    BlockKind::Ffn => m.ffn[g.layer].0[g.index] = true,
                }
                kept += g.channels;
            }
            m
        })
        .collect();
    Ok((ranking, masks))
}

/// `W ((1 - mask) * mean)` for a `[out, in]` matrix.
pub fn compensation_bias<T: Scalar>(w: &Tensor<T>, keep: &[bool], mean: &[f64]) -> Result<Vec<f64>> {
    let (out, inp) = w.dims2("compensation_bias")?;
    if keep.len() != inp || mean.len() != inp {
        return Err(Error::invalid(format!(
            "mask of {} and mean of {} for a matrix with {inp} inputs",
            keep.len(),
            mean.len()
        )));
    }
    let mut b = vec![0.0; out];
    for (o, row) in b.iter_mut().zip(w.data().chunks_exact(inp.max(1))) {
        for ((v, &k), &m) in row.iter().zip(keep).zip(mean) {
            if !k {
                *o += v.as_f64() * m;
            }
        }
    }
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBias {
    pub attn: Vec<f64>,
    pub ffn: Vec<f64>,
}

/// One bias pair per layer for every ratio's masks.
pub fn compensate<T: Scalar>(
    model: &ElasticModel<T>,
    stats: &ActivationStats,
    masks: &[RatioMasks],
) -> Result<Vec<Vec<LayerBias>>> {
    let d_head = model.config.d_head;
    masks
        .iter()
        .map(|m| {
            if m.heads.len() != model.n_layers() || stats.layers.len() != model.n_layers() {
                return Err(Error::invalid("mask, statistics and model disagree on the layer count"));
            }
            model
                .weights
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    Ok(LayerBias {
                        attn: compensation_bias(&l.wo, &m.attn_channels(i, d_head), &stats.layers[i].attn.mean)?,
                        ffn: compensation_bias(&l.w_down, &m.ffn[i].0, &stats.layers[i].ffn.mean)?,
                    })
                })
                .collect()
        })
        .collect()
}

/// Everything needed to run or extract a model at any configured width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidthPlan {
    pub ratios: Vec<f64>,
    pub d_head: usize,
    pub raw_scores: RawScores,
    pub ranking: Vec<Group>,
    pub masks: Vec<RatioMasks>,
    pub biases: Vec<Vec<LayerBias>>,
}

impl WidthPlan {
    /// Scores, masks and biases from precomputed statistics.
    pub fn build<T: Scalar>(model: &ElasticModel<T>, stats: &ActivationStats, ratios: &[f64]) -> Result<Self> {
        let raw_scores = score(stats, model)?;
        let (ranking, masks) = build_masks(&raw_scores, ratios)?;
        let biases = compensate(model, stats, &masks)?;
        Ok(Self {
            ratios: ratios.to_vec(),
            d_head: model.config.d_head,
            raw_scores,
            ranking,
            masks,
            biases,
        })
    }

    pub fn calibrate<T: Scalar>(model: &ElasticModel<T>, calibration: &[TokenBatch], ratios: &[f64]) -> Result<Self> {
        let stats = collect_stats(model, calibration)?;
        Self::build(model, &stats, ratios)
    }

    pub fn is_full(&self, width_index: usize) -> bool {
        let m = &self.masks[width_index];
        m.heads.iter().chain(&m.ffn).all(|b| b.0.iter().all(|&k| k))
    }

    pub fn head_mask(&self, width_index: usize, layer: usize) -> &[bool] {
        &self.masks[width_index].heads[layer].0
    }

    pub fn ffn_mask(&self, width_index: usize, layer: usize) -> &[bool] {
        &self.masks[width_index].ffn[layer].0
    }

    pub fn attn_bias(&self, width_index: usize, layer: usize) -> &[f64] {
        &self.biases[width_index][layer].attn
    }

    pub fn ffn_bias(&self, width_index: usize, layer: usize) -> &[f64] {
        &self.biases[width_index][layer].ffn
    }

    /// Fraction of prunable channels kept at `width_index`.
    pub fn realized_ratio(&self, width_index: usize) -> f64 {
        let m = &self.masks[width_index];
        let total: usize = self.ranking.iter().map(|g| g.channels).sum();
        m.retained_channels(self.d_head) as f64 / total.max(1) as f64
    }

    pub fn check_model<T: Scalar>(&self, model: &ElasticModel<T>) -> Result<()> {
        let bad = |why: String| Err(Error::Format(format!("width plan does not fit the model: {why}")));
        if self.d_head != model.config.d_head {
            return bad(format!("d_head {} vs {}", self.d_head, model.config.d_head));
        }
        if self.masks.len() != self.ratios.len() || self.biases.len() != self.ratios.len() {
            return bad("ratio count differs between masks and biases".into());
        }
        let d = model.config.d_model;
        for (m, b) in self.masks.iter().zip(&self.biases) {
            if m.heads.len() != model.n_layers() || m.ffn.len() != model.n_layers() || b.len() != model.n_layers() {
                return bad(format!("{} layers vs {}", m.heads.len(), model.n_layers()));
            }
            for (i, l) in model.weights.layers.iter().enumerate() {
                if m.heads[i].len() * self.d_head != l.attn_width() || m.ffn[i].len() != l.ffn_width() {
                    return bad(format!("layer {i} widths"));
                }
                if b[i].attn.len() != d || b[i].ffn.len() != d {
                    return bad(format!("layer {i} bias length"));
                }
            }
        }
        Ok(())
    }
}

/// Boolean vector persisted as a `0`/`1` string.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bits(pub Vec<bool>);

impl Bits {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Bits) -> bool {
        self.len() == other.len() && self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl Serialize for Bits {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Bits {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(serde::de::Error::custom(format!("invalid mask character {other:?}"))),
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Bits)
    }
}

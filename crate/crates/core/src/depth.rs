//! Layer-removal dynamic program. `D[n][m]` is the best score reachable by
//! removing exactly `m` of the first `n` layers, `S[n][m]` the layer mask
//! achieving it; the candidate for removing layer `n` is built on top of
//! `S[n-1][m-1]`, so the whole table costs one evaluation per cell.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{EvalCache, Evaluator, MetricKind};
use crate::model::ElasticModel;
use crate::scalar::Scalar;
use crate::shape::{ExecShape, LayerMask, ShapeGrid, SubnetShape};

/// Table score with the infinite sentinels kept distinguishable in JSON.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Score(pub f64);

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else if self.0 == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Score(v)),
            Raw::Str(s) if s == "inf" => Ok(Score(f64::INFINITY)),
            Raw::Str(s) if s == "-inf" => Ok(Score(f64::NEG_INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("invalid score {s:?}"))),
        }
    }
}

/// Which side of the max produced a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Base,
    Keep,
    Remove,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpTable {
    pub n_layers: usize,
    pub max_remove: usize,
    pub metric: MetricKind,
    pub fingerprint: String,
    /// Oriented score of the unpruned model.
    pub full_score: f64,
    pub d: Vec<Vec<Score>>,
    /// `None` for infeasible cells.
    pub s: Vec<Vec<Option<LayerMask>>>,
    pub branch: Vec<Vec<Branch>>,
    /// Candidate scores `P(n, m)`; `None` where no candidate exists.
    pub p: Vec<Vec<Option<f64>>>,
}

/// `mask` with layer `n` (1-based) removed.
pub fn remove(mask: &LayerMask, n: usize) -> Result<LayerMask> {
    if n == 0 {
        return Err(Error::invalid("layers are numbered from 1"));
    }
    mask.remove(n - 1)
}

impl DpTable {
    fn empty(n_layers: usize, max_remove: usize, metric: MetricKind, fingerprint: String) -> Self {
        let rows = n_layers + 1;
        let cols = max_remove + 1;
        let mut t = Self {
            n_layers,
            max_remove,
            metric,
            fingerprint,
            full_score: f64::NAN,
            d: vec![vec![Score(f64::NEG_INFINITY); cols]; rows],
            s: vec![vec![None; cols]; rows],
            branch: vec![vec![Branch::Infeasible; cols]; rows],
            p: vec![vec![None; cols]; rows],
        };
        for i in 0..rows {
            t.d[i][0] = Score(f64::INFINITY);
            t.s[i][0] = Some(LayerMask::all(n_layers));
            t.branch[i][0] = Branch::Base;
        }
        t
    }

    /// Candidate mask for `P(n, m)`: layer `n` removed from `S[n-1][m-1]`.
    pub fn candidate(&self, n: usize, m: usize) -> Result<LayerMask> {
        if n == 0 || m == 0 || n > self.n_layers || m > self.max_remove {
            return Err(Error::invalid(format!("no candidate for cell ({n}, {m})")));
        }
        let prev = self.s[n - 1][m - 1]
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("cell ({}, {}) is not filled", n - 1, m - 1)))?;
        remove(prev, n)
    }

    /// Final strategy for removing `m` layers.
    pub fn select(&self, m: usize) -> Result<LayerMask> {
        if m > self.max_remove {
            return Err(Error::invalid(format!("removal budget {m} exceeds the table's {}", self.max_remove)));
        }
        self.s[self.n_layers][m]
            .clone()
            .ok_or_else(|| Error::invalid(format!("no strategy for m = {m}")))
    }

    /// Checks the structural invariants of a filled table.
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::Format(format!("dp table: {why}")));
        if self.max_remove >= self.n_layers || self.max_remove == 0 {
            return bad(format!("M = {} with N = {}", self.max_remove, self.n_layers));
        }
        let (rows, cols) = (self.n_layers + 1, self.max_remove + 1);
        if self.d.len() != rows || self.s.len() != rows || self.branch.len() != rows || self.p.len() != rows {
            return bad("row count".into());
        }
        for n in 0..rows {
            if self.d[n].len() != cols || self.s[n].len() != cols || self.branch[n].len() != cols || self.p[n].len() != cols {
                return bad(format!("row {n} width"));
            }
            if self.d[n][0].0 != f64::INFINITY || self.s[n][0] != Some(LayerMask::all(self.n_layers)) {
                return bad(format!("base case in row {n}"));
            }
            for m in 1..cols {
                let d = self.d[n][m].0;
                if m > n {
                    if d != f64::NEG_INFINITY || self.s[n][m].is_some() {
                        return bad(format!("infeasible cell ({n}, {m}) is filled"));
                    }
                    continue;
                }
                let Some(s) = &self.s[n][m] else {
                    return bad(format!("cell ({n}, {m}) is empty"));
                };
                let zeros_in_prefix = s.bits()[..n].iter().filter(|&&b| !b).count();
                if s.len() != self.n_layers || zeros_in_prefix != m || s.retained_count() != self.n_layers - m {
                    return bad(format!("mask {s} in cell ({n}, {m})"));
                }
                let p = self.p[n][m].unwrap_or(f64::NEG_INFINITY);
                let expect = if self.d[n - 1][m].0 >= p { self.d[n - 1][m].0 } else { p };
                if d != expect {
                    return bad(format!("recurrence fails at ({n}, {m})"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    /// Rejects a table built for another model or calibration set.
    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        if self.fingerprint != expected {
            return Err(Error::Format(format!(
                "dp table fingerprint {} does not match {expected}",
                self.fingerprint
            )));
        }
        Ok(())
    }

    /// The `m` layers whose individual removal scored highest, using the
    /// single-removal candidates `P(n, 1)` already in the table.
    pub fn individually_worst(&self, m: usize) -> Result<LayerMask> {
        let mut singles: Vec<(usize, f64)> = (1..=self.n_layers)
            .map(|n| {
                self.p[n][1]
                    .map(|v| (n - 1, v))
                    .ok_or_else(|| Error::invalid(format!("P({n}, 1) missing")))
            })
            .collect::<Result<_>>()?;
        singles.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(b.0.cmp(&a.0)));
        individually_worst_of(self.n_layers, &singles, m)
    }
}

fn individually_worst_of(n_layers: usize, ranked: &[(usize, f64)], m: usize) -> Result<LayerMask> {
    if m > n_layers {
        return Err(Error::invalid("cannot remove more layers than exist"));
    }
    let removed: Vec<usize> = ranked.iter().take(m).map(|&(l, _)| l).collect();
    let keep: Vec<usize> = (0..n_layers).filter(|l| !removed.contains(l)).collect();
    Ok(LayerMask::keeping(n_layers, &keep))
}

/// Removes the last `m` layers.
pub fn drop_last(n_layers: usize, m: usize) -> Result<LayerMask> {
    if m > n_layers {
        return Err(Error::invalid("cannot remove more layers than exist"));
    }
    Ok(LayerMask::keeping(n_layers, &(0..n_layers - m).collect::<Vec<_>>()))
}

/// Fills the table with scores from `score`, which receives each candidate
/// mask. Exact ties keep layer `n`.
pub fn build_dp_with<F>(
    n_layers: usize,
    max_remove: usize,
    metric: MetricKind,
    fingerprint: String,
    mut score: F,
) -> Result<DpTable>
where
    F: FnMut(&LayerMask) -> Result<f64>,
{
    if max_remove == 0 || max_remove >= n_layers {
        return Err(Error::config(
            "depth.max_remove",
            format!("must satisfy 1 <= M < N, got M = {max_remove}, N = {n_layers}"),
        ));
    }
    let mut t = DpTable::empty(n_layers, max_remove, metric, fingerprint);
    t.full_score = score(&LayerMask::all(n_layers))?;
    for n in 1..=n_layers {
        for m in 1..=max_remove.min(n) {
            let cand = t.candidate(n, m).map_err(|e| Error::DpCell {
                n,
                m,
                source: Box::new(e),
            })?;
            let p = score(&cand).map_err(|e| Error::DpCell {
                n,
                m,
                source: Box::new(e),
            })?;
            if p.is_nan() {
                return Err(Error::DpCell {
                    n,
                    m,
                    source: Box::new(Error::NonFinite("evaluator returned NaN".into())),
                });
            }
            t.p[n][m] = Some(p);
            let keep = t.d[n - 1][m].0;
            if keep >= p {
                t.d[n][m] = t.d[n - 1][m];
                t.s[n][m] = t.s[n - 1][m].clone();
                t.branch[n][m] = Branch::Keep;
            } else {
                t.d[n][m] = Score(p);
                t.s[n][m] = Some(cand);
                t.branch[n][m] = Branch::Remove;
            }
        }
    }
    Ok(t)
}

/// Every grid shape with its retained layers taken from the table, in
/// [`ShapeGrid::indices`] order.
pub fn grid_shapes(grid: &ShapeGrid, table: &DpTable) -> Result<Vec<SubnetShape>> {
    grid.validate(Some(table.n_layers))?;
    grid.indices()
        .map(|(di, wi)| {
            let m = table.n_layers - grid.depths[di];
            let mask = if m == 0 { LayerMask::all(table.n_layers) } else { table.select(m)? };
            SubnetShape::new(grid, di, wi, mask)
        })
        .collect()
}

/// Digest of the model weights that the table's scores depend on.
pub fn model_digest<T: Scalar>(model: &ElasticModel<T>) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.weights.named() {
        h.update(name.as_bytes());
        let mut buf = Vec::with_capacity(t.numel() * T::BYTES);
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    format!("{:x}", h.finalize())
}

/// Runs the dynamic program on the full-width base model with a cached
/// evaluator.
pub fn build_dp<T: Scalar, E: Evaluator<T> + ?Sized>(
    model: &ElasticModel<T>,
    evaluator: &E,
    cache: &EvalCache,
    max_remove: usize,
) -> Result<DpTable> {
    let base = model.base();
    let fingerprint = format!("{}|model:{}", evaluator.fingerprint(), model_digest(&base));
    build_dp_with(base.n_layers(), max_remove, evaluator.kind(), fingerprint, |mask| {
        cache.evaluate(evaluator, &base, &ExecShape::layers(mask.clone()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn additive(weights: Vec<f64>) -> impl FnMut(&LayerMask) -> Result<f64> {
        move |m| Ok(m.retained().map(|l| weights[l]).sum())
    }

    #[test]
    fn two_layer_hand_trace() {
        let t = build_dp_with(2, 1, MetricKind::FactAccuracy, "x".into(), |m| {
            Ok(match m.to_string().as_str() {
                "10" => 0.7,
                "01" => 0.4,
                _ => 1.0,
            })
        })
        .unwrap();
        assert_eq!(t.d[1][1], Score(0.4));
        assert_eq!(t.s[1][1].as_ref().unwrap().to_string(), "01");
        assert_eq!(t.d[2][1], Score(0.7));
        assert_eq!(t.s[2][1].as_ref().unwrap().to_string(), "10");
        assert_eq!(t.branch[2][1], Branch::Remove);
        t.validate().unwrap();
    }

    #[test]
    fn additive_four_layers_drops_smallest() {
        let t = build_dp_with(4, 3, MetricKind::FactAccuracy, "x".into(), additive(vec![0.4, 0.1, 0.3, 0.2])).unwrap();
        assert_eq!(t.select(0).unwrap().to_string(), "1111");
        assert_eq!(t.select(1).unwrap().to_string(), "1011");
        assert_eq!(t.select(2).unwrap().to_string(), "1010");
        assert_eq!(t.select(3).unwrap().to_string(), "1000");
        assert!(t.select(4).is_err());
        assert_eq!(t.individually_worst(2).unwrap().to_string(), "1010");
    }

    #[test]
    fn base_cases_and_sentinels() {
        let t = build_dp_with(5, 2, MetricKind::Ppl, "x".into(), additive(vec![1.0; 5])).unwrap();
        for i in 0..=5 {
            assert_eq!(t.d[i][0].0, f64::INFINITY);
            assert_eq!(t.s[i][0], Some(LayerMask::all(5)));
        }
        assert_eq!(t.d[1][2].0, f64::NEG_INFINITY);
        assert!(t.s[0][1].is_none());
    }

    #[test]
    fn exact_ties_keep_the_layer() {
        let t = build_dp_with(3, 1, MetricKind::Ppl, "x".into(), |_| Ok(0.0)).unwrap();
        assert_eq!(t.select(1).unwrap().to_string(), "011");
        assert_eq!(t.branch[3][1], Branch::Keep);
    }

    #[test]
    fn budget_validation_and_error_coordinates() {
        assert!(build_dp_with(3, 3, MetricKind::Ppl, "x".into(), |_| Ok(0.0)).is_err());
        assert!(build_dp_with(3, 0, MetricKind::Ppl, "x".into(), |_| Ok(0.0)).is_err());
        let err = build_dp_with(3, 1, MetricKind::Ppl, "x".into(), |m| {
            if m.retained_count() == 2 && !m.is_retained(1) {
                Err(Error::invalid("boom"))
            } else {
                Ok(1.0)
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::DpCell { n: 2, m: 1, .. }), "{err}");
    }

    #[test]
    fn removal_flips_one_bit_or_errors() {
        let m = LayerMask::all(3);
        assert_eq!(remove(&m, 2).unwrap().to_string(), "101");
        assert!(remove(&remove(&m, 2).unwrap(), 2).is_err());
        assert!(remove(&m, 0).is_err());
    }

    #[test]
    fn json_roundtrip_keeps_sentinels() {
        let t = build_dp_with(4, 2, MetricKind::Ppl, "fp".into(), additive(vec![-0.4, -0.1, -0.3, -0.2])).unwrap();
        let j = t.to_json().unwrap();
        assert!(j.contains("\"inf\"") && j.contains("\"-inf\""));
        let back = DpTable::from_json(&j).unwrap();
        assert_eq!(back, t);
        assert!(back.check_fingerprint("other").is_err());
    }

    #[test]
    fn baselines() {
        assert_eq!(drop_last(5, 2).unwrap().to_string(), "11100");
        assert!(drop_last(2, 3).is_err());
    }
}

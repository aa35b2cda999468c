//! Subnet identities: layer-retention masks, the (depth, width) grid and the
//! one-hot shape mask fed to the adapter gate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which decoder layers a subnet keeps; `true` means retained.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerMask(Vec<bool>);

impl LayerMask {
    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    /// Retains exactly the listed zero-based layers.
    pub fn keeping(n: usize, keep: &[usize]) -> Self {
        let mut bits = vec![false; n];
        for &i in keep {
            bits[i] = true;
        }
        Self(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn is_retained(&self, layer: usize) -> bool {
        self.0[layer]
    }

    pub fn retained_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn retained(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// Clears the bit of zero-based `layer`. Removing an already removed
    /// layer is an error.
    pub fn remove(&self, layer: usize) -> Result<Self> {
        match self.0.get(layer) {
            Some(true) => {
                let mut bits = self.0.clone();
                bits[layer] = false;
                Ok(Self(bits))
            }
            Some(false) => Err(Error::invalid(format!("layer {} is already removed in {self}", layer + 1))),
            None => Err(Error::invalid(format!("layer {} outside a {}-layer mask", layer + 1, self.len()))),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::Format(format!("bad layer mask `{s}`"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

impl fmt::Display for LayerMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl Serialize for LayerMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        LayerMask::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// What a forward pass executes: retained layers, a width-ratio index into
/// the model's width plan, and optionally the shape mask that drives the
/// adapter gate (no adapter contribution when absent).
#[derive(Debug, Clone, PartialEq)]
pub struct ExecShape {
    pub retained: LayerMask,
    pub width_index: usize,
    pub gate_mask: Option<Vec<f64>>,
}

impl ExecShape {
    pub fn full(n_layers: usize) -> Self {
        Self {
            retained: LayerMask::all(n_layers),
            width_index: 0,
            gate_mask: None,
        }
    }

    pub fn layers(retained: LayerMask) -> Self {
        Self {
            retained,
            width_index: 0,
            gate_mask: None,
        }
    }
}

/// Depth values and width ratios of the elastic design space, plus the number
/// of subnets sampled per training step. Both axes are stored largest first,
/// so index `(0, 0)` is the largest subnet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeGrid {
    pub depths: Vec<usize>,
    pub widths: Vec<f64>,
    pub samples_per_step: usize,
}

impl ShapeGrid {
    pub fn new(mut depths: Vec<usize>, mut widths: Vec<f64>, samples_per_step: usize) -> Result<Self> {
        depths.sort_unstable_by(|a, b| b.cmp(a));
        depths.dedup();
        widths.sort_by(|a, b| b.total_cmp(a));
        widths.dedup();
        let grid = Self {
            depths,
            widths,
            samples_per_step,
        };
        grid.validate(None)?;
        Ok(grid)
    }

    /// Checks ordering, ranges and `K ≥ 2`; with `n_layers`, also that every
    /// depth fits the model.
    pub fn validate(&self, n_layers: Option<usize>) -> Result<()> {
        if self.depths.is_empty() {
            return Err(Error::config("grid.depths", "must not be empty"));
        }
        if self.depths.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::config("grid.depths", "must be strictly descending"));
        }
        if let Some(n) = n_layers {
            if self.depths[0] > n {
                return Err(Error::config("grid.depths", format!("depth {} exceeds {n} layers", self.depths[0])));
            }
            if self.max_remove(n) >= n {
                return Err(Error::config(
                    "grid.depths",
                    format!("removal budget M = {} must be below N = {n}", self.max_remove(n)),
                ));
            }
        }
        if self.widths.is_empty() || (self.widths[0] - 1.0).abs() > 0.0 {
            return Err(Error::config("grid.widths", "must start with ratio 1"));
        }
        if self.widths.windows(2).any(|w| w[0] <= w[1]) || self.widths.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::config("grid.widths", "ratios must be strictly descending within (0, 1]"));
        }
        if self.samples_per_step < 2 {
            return Err(Error::config("grid.samples_per_step", "K must be at least 2"));
        }
        if self.samples_per_step > self.len() {
            return Err(Error::config(
                "grid.samples_per_step",
                format!("K = {} exceeds the {} grid shapes", self.samples_per_step, self.len()),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.depths.len() * self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest number of layers any grid subnet removes.
    pub fn max_remove(&self, n_layers: usize) -> usize {
        n_layers.saturating_sub(*self.depths.last().unwrap_or(&n_layers))
    }

    pub fn mask_dim(&self) -> usize {
        self.depths.len() + self.widths.len()
    }

    /// One-hot depth segment followed by one-hot width segment.
    pub fn gate_mask(&self, depth_index: usize, width_index: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.mask_dim()];
        m[depth_index] = 1.0;
        m[self.depths.len() + width_index] = 1.0;
        m
    }

    /// All `(depth_index, width_index)` pairs, row-major from the largest.
    pub fn indices(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.depths.len()).flat_map(move |d| (0..self.widths.len()).map(move |w| (d, w)))
    }

    pub fn largest(&self) -> (usize, usize) {
        (0, 0)
    }

    pub fn smallest(&self) -> (usize, usize) {
        (self.depths.len() - 1, self.widths.len() - 1)
    }

    pub fn width_index_of(&self, ratio: f64) -> Option<usize> {
        self.widths.iter().position(|&r| (r - ratio).abs() < 1e-9)
    }

    pub fn depth_index_of(&self, depth: usize) -> Option<usize> {
        self.depths.iter().position(|&d| d == depth)
    }
}

/// One extractable subnet of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubnetShape {
    pub depth_index: usize,
    pub width_index: usize,
    pub depth: usize,
    pub width_ratio: f64,
    pub retained_layers: LayerMask,
    pub gate_mask: Vec<f64>,
}

impl SubnetShape {
    /// Binds a grid point to the layers that the depth plan retains for it.
    pub fn new(grid: &ShapeGrid, depth_index: usize, width_index: usize, retained_layers: LayerMask) -> Result<Self> {
        let depth = *grid
            .depths
            .get(depth_index)
            .ok_or_else(|| Error::invalid(format!("depth index {depth_index} outside grid")))?;
        let width_ratio = *grid
            .widths
            .get(width_index)
            .ok_or_else(|| Error::invalid(format!("width index {width_index} outside grid")))?;
        if retained_layers.retained_count() != depth {
            return Err(Error::invalid(format!(
                "mask {retained_layers} keeps {} layers, depth {depth} expected",
                retained_layers.retained_count()
            )));
        }
        Ok(Self {
            depth_index,
            width_index,
            depth,
            width_ratio,
            retained_layers,
            gate_mask: grid.gate_mask(depth_index, width_index),
        })
    }

    pub fn id(&self) -> String {
        format!("d{}_w{}", self.depth, self.width_ratio)
    }

    pub fn exec(&self) -> ExecShape {
        ExecShape {
            retained: self.retained_layers.clone(),
            width_index: self.width_index,
            gate_mask: Some(self.gate_mask.clone()),
        }
    }

    /// Same subnet without adapter contribution.
    pub fn exec_base(&self) -> ExecShape {
        ExecShape {
            gate_mask: None,
            ..self.exec()
        }
    }
}

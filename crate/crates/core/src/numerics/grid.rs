use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// A `C×H×W` feature map stored row-major in (channel, row, column) order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(
            channels > 0 && height > 0 && width > 0,
            "feature dimensions must be positive, got {channels}x{height}x{width}"
        );
        ensure!(
            values.len() == channels * height * width,
            "feature grid {channels}x{height}x{width} needs {} values, got {}",
            channels * height * width,
            values.len()
        );
        ensure!(
            values.iter().all(|v| v.is_finite()),
            "feature values must be finite"
        );
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(
            channels > 0 && height > 0 && width > 0,
            "feature dimensions must be positive"
        );
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn spatial_len(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial_len();
        &self.values[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Elementwise `a·self + b·other`; shapes must agree.
    pub fn axpby(&self, a: f64, other: &FeatureGrid, b: f64) -> Result<FeatureGrid> {
        ensure!(self.dims() == other.dims(), "axpby shape mismatch");
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, z)| a * x + b * z)
            .collect();
        FeatureGrid::new(self.channels, self.height, self.width, values)
    }

    pub fn scaled(&self, factor: f64) -> FeatureGrid {
        FeatureGrid {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    BinaryLabel,
    ScoreMap,
}

/// An `H×W` mask; either binary labels or real-valued scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
    kind: MaskKind,
}

impl MaskGrid {
    pub fn binary(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(
            values.len() == height * width,
            "mask {height}x{width} needs {} values, got {}",
            height * width,
            values.len()
        );
        ensure!(
            values.iter().all(|&v| v == 0.0 || v == 1.0),
            "binary-label mask values must be 0 or 1"
        );
        Ok(Self {
            height,
            width,
            values,
            kind: MaskKind::BinaryLabel,
        })
    }

    pub fn from_bits(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        MaskGrid::binary(
            height,
            width,
            bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn scores(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(
            values.len() == height * width,
            "score map {height}x{width} needs {} values, got {}",
            height * width,
            values.len()
        );
        ensure!(
            values.iter().all(|v| v.is_finite()),
            "score values must be finite"
        );
        Ok(Self {
            height,
            width,
            values,
            kind: MaskKind::ScoreMap,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Binary mask of pixels strictly above `threshold`.
    pub fn threshold(&self, threshold: f64) -> MaskGrid {
        MaskGrid {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|&v| if v > threshold { 1.0 } else { 0.0 })
                .collect(),
            kind: MaskKind::BinaryLabel,
        }
    }

    pub fn bits(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v > 0.5).collect()
    }

    pub fn positive_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn positive_fraction(&self) -> f64 {
        self.positive_count() as f64 / self.values.len() as f64
    }

    pub fn matches_spatial(&self, feature: &FeatureGrid) -> bool {
        self.height == feature.height() && self.width == feature.width()
    }
}

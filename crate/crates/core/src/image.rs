//! Image, mask and score-map containers.

use mdps_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const RANGE_SLACK: f32 = 1e-6;

/// Declared value interval of an [`ImageTensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// Raw pixels in `[0, 1]`.
    Unit,
    /// Model space, `[-1, 1]`.
    Symmetric,
    /// Noisy latents and noise draws.
    Unbounded,
}

impl ValueRange {
    fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Symmetric => (-1.0, 1.0),
            ValueRange::Unbounded => (f32::NEG_INFINITY, f32::INFINITY),
        }
    }
}

/// Channel-first `f32` image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        range: ValueRange,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        let (lo, hi) = range.bounds();
        if let Some(bad) = data
            .iter()
            .find(|v| !v.is_finite() || **v < lo - RANGE_SLACK || **v > hi + RANGE_SLACK)
        {
            return Err(Error::InvalidArgument(format!(
                "value {bad} is not finite or lies outside {range:?}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            range,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32, range: ValueRange) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width], range)
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

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Converts a `[0,1]` image to model space; other ranges are returned as is.
    pub fn to_model_space(&self) -> Self {
        match self.range {
            ValueRange::Unit => Self {
                data: self.data.iter().map(|v| v * 2.0 - 1.0).collect(),
                range: ValueRange::Symmetric,
                ..self.clone()
            },
            _ => self.clone(),
        }
    }

    /// Converts a model-space image back to `[0,1]`.
    ///
    /// Unbounded images are clamped to model space first.
    pub fn to_unit(&self) -> Self {
        match self.range {
            ValueRange::Unit => self.clone(),
            _ => Self {
                data: self
                    .data
                    .iter()
                    .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 0.5).clamp(0.0, 1.0))
                    .collect(),
                range: ValueRange::Unit,
                ..self.clone()
            },
        }
    }

    /// Clamps every value into `range` and relabels the tensor.
    pub fn clamp_to(&self, range: ValueRange) -> Self {
        let (lo, hi) = range.bounds();
        Self {
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
            range,
            ..self.clone()
        }
    }

    /// Single-item batch `[1, C, H, W]`.
    pub fn to_batch(&self) -> Tensor {
        Tensor::from_vec([1, self.channels, self.height, self.width], self.data.clone())
            .expect("dimensions validated at construction")
    }

    /// Extracts batch item `b` of `t`.
    pub fn from_batch_item(t: &Tensor, b: usize, range: ValueRange) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        Self::new(c, h, w, t.item(b).to_vec(), range)
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &ImageTensor, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Binary `H x W` mask; 1 marks suspected anomalous pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} mask values for {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width)
            .map(|i| u8::from(f(i / width, i % width)))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn matches(&self, image: &ImageTensor) -> bool {
        self.height == image.height() && self.width == image.width()
    }
}

/// Non-negative per-pixel anomaly scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} scores for {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "score maps must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Mean score over pixels where `mask` equals `value`.
    pub fn masked_mean(&self, mask: &MaskImage, value: bool) -> Option<f64> {
        let (sum, n) = self
            .data
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| (m == 1) == value)
            .fold((0.0f64, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_non_finite() {
        assert!(ImageTensor::new(1, 1, 2, vec![0.0, 1.5], ValueRange::Unit).is_err());
        assert!(ImageTensor::new(1, 1, 2, vec![0.0, f32::NAN], ValueRange::Unbounded).is_err());
        assert!(ImageTensor::new(1, 1, 2, vec![-1.0, 1.0 + 5e-7], ValueRange::Symmetric).is_ok());
        assert!(ImageTensor::new(0, 1, 1, vec![], ValueRange::Unit).is_err());
    }

    #[test]
    fn model_space_round_trip() {
        let img = ImageTensor::new(1, 1, 3, vec![0.0, 0.25, 1.0], ValueRange::Unit).unwrap();
        let m = img.to_model_space();
        assert_eq!(m.data(), &[-1.0, -0.5, 1.0]);
        assert_eq!(m.to_unit(), img);
    }

    #[test]
    fn masks_are_binary() {
        assert!(MaskImage::new(1, 2, vec![0, 2]).is_err());
        let m = MaskImage::from_fn(2, 2, |y, x| y == x);
        assert_eq!(m.count(), 2);
        assert_eq!(m.fraction(), 0.5);
    }

    #[test]
    fn score_maps_are_non_negative() {
        assert!(ScoreMap::new(1, 2, vec![0.0, -1.0]).is_err());
        let s = ScoreMap::new(1, 2, vec![1.0, 3.0]).unwrap();
        let m = MaskImage::new(1, 2, vec![0, 1]).unwrap();
        assert_eq!(s.masked_mean(&m, true), Some(3.0));
        assert_eq!(s.masked_mean(&m, false), Some(1.0));
    }
}

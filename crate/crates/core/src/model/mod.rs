//! The encoder-decoder deblurring backbone, its output heads and weight
//! initialization.

mod backbone;
pub(crate) mod layers;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use backbone::Backbone;
pub use layers::{BN_EPS, BN_MOMENTUM};

/// Largest feature width any layer may have.
pub const MAX_CHANNELS: usize = 4096;

/// Output nonlinearity of the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Sigmoid,
    #[default]
    Linear,
}

/// Connection count used to scale MSRA initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FanMode {
    FanIn,
    FanOut,
    #[default]
    FanMax,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Sigmoid => "sigmoid",
            HeadKind::Linear => "linear",
        })
    }
}

impl std::fmt::Display for FanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FanMode::FanIn => "fan_in",
            FanMode::FanOut => "fan_out",
            FanMode::FanMax => "fan_max",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Feature maps of the full-resolution stage.
    pub base_width: usize,
    /// Number of stride-2 encoder stages.
    pub depth: usize,
    pub head: HeadKind,
    pub fan_mode: FanMode,
    /// First input channel of the reference frame. When set, those
    /// `out_channels` input planes are added to the output before the head,
    /// and the network learns a correction of the blurry reference.
    #[serde(default)]
    pub input_skip: Option<usize>,
}

impl ModelConfig {
    /// Hourglass approximating the DBN layout: three downsampling stages
    /// starting at 64 feature maps.
    pub fn dbn(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            base_width: 64,
            depth: 3,
            head: HeadKind::Linear,
            fan_mode: FanMode::FanMax,
            input_skip: None,
        }
    }

    /// The small model used for desk-scale experiments.
    pub fn tiny(in_channels: usize, out_channels: usize) -> Self {
        Self {
            base_width: 16,
            depth: 2,
            ..Self::dbn(in_channels, out_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::InvalidModel("in_channels must be at least 1".into()));
        }
        if !matches!(self.out_channels, 1 | 3) {
            return Err(Error::InvalidModel(format!(
                "out_channels must be 1 or 3, got {}",
                self.out_channels
            )));
        }
        if self.depth == 0 {
            return Err(Error::InvalidModel("depth must be at least 1".into()));
        }
        if self.base_width == 0 {
            return Err(Error::InvalidModel("base_width must be at least 1".into()));
        }
        if let Some(o) = self.input_skip {
            if o + self.out_channels > self.in_channels {
                return Err(Error::InvalidModel(format!(
                    "input skip at channel {o} needs {} channels but the input has {}",
                    self.out_channels, self.in_channels
                )));
            }
        }
        let widest = u32::try_from(self.depth)
            .ok()
            .and_then(|d| 1usize.checked_shl(d))
            .and_then(|f| f.checked_mul(self.base_width));
        match widest {
            Some(w) if w <= MAX_CHANNELS && self.in_channels <= MAX_CHANNELS => Ok(()),
            _ => Err(Error::InvalidModel(format!(
                "base_width {} at depth {} exceeds the {MAX_CHANNELS}-channel limit",
                self.base_width, self.depth
            ))),
        }
    }

    /// Spatial sizes fed to the model must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Feature width of stage `level` (0 = full resolution).
    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Kernel and channel extents of one convolution, in data-flow direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub channels_in: usize,
    pub channels_out: usize,
}

impl LayerShape {
    pub fn new(kernel_h: usize, kernel_w: usize, channels_in: usize, channels_out: usize) -> Result<Self> {
        if kernel_h == 0 || kernel_w == 0 || channels_in == 0 || channels_out == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer shape {kernel_h}x{kernel_w}, {channels_in}->{channels_out} has a zero extent"
            )));
        }
        Ok(Self {
            kernel_h,
            kernel_w,
            channels_in,
            channels_out,
        })
    }

    pub fn square(kernel: usize, channels_in: usize, channels_out: usize) -> Result<Self> {
        Self::new(kernel, kernel, channels_in, channels_out)
    }

    pub fn weight_count(&self) -> usize {
        self.kernel_h * self.kernel_w * self.channels_in * self.channels_out
    }
}

pub fn fan_value(shape: LayerShape, mode: FanMode) -> usize {
    let area = shape.kernel_h * shape.kernel_w;
    let fan_in = shape.channels_in * area;
    let fan_out = shape.channels_out * area;
    match mode {
        FanMode::FanIn => fan_in,
        FanMode::FanOut => fan_out,
        FanMode::FanMax => fan_in.max(fan_out),
    }
}

/// Standard deviation of the MSRA Gaussian for a layer.
pub fn msra_std(shape: LayerShape, mode: FanMode) -> f64 {
    (2.0 / fan_value(shape, mode) as f64).sqrt()
}

/// Draws `shape.weight_count()` zero-mean Gaussian weights with variance
/// `2 / fan`.
pub fn msra_init<T: Scalar, R: Rng + ?Sized>(shape: LayerShape, mode: FanMode, rng: &mut R) -> Vec<T> {
    let std = msra_std(shape, mode);
    (0..shape.weight_count())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
        .collect()
}

/// Applies the output nonlinearity. A linear head is the identity while
/// training and clamps to `[0, 1]` at test time.
pub fn apply_head<T: Scalar>(pre_activation: &Tensor<T>, head: HeadKind, test_time: bool) -> Tensor<T> {
    match head {
        HeadKind::Sigmoid => pre_activation.map(sigmoid),
        HeadKind::Linear if test_time => pre_activation.map(|v| v.max(T::ZERO).min(T::ONE)),
        HeadKind::Linear => pre_activation.clone(),
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::ONE / (T::ONE + (-v).exp())
}

/// Histogram of raw network outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationHistogram {
    /// `counts.len() + 1` strictly increasing bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Values below `-margin` or above `1 + margin`, with `margin` as passed
    /// to [`activation_histogram`].
    pub outside_range: u64,
    pub margin: f64,
}

impl ActivationHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn fraction_outside(&self) -> f64 {
        self.outside_range as f64 / self.total().max(1) as f64
    }

    /// Index of the bin holding `v`.
    pub fn bin_of(&self, v: f64) -> Option<usize> {
        let last = *self.edges.last()?;
        if v < self.edges[0] || v > last {
            return None;
        }
        let idx = self.edges.partition_point(|&e| e <= v).saturating_sub(1);
        Some(idx.min(self.counts.len() - 1))
    }
}

/// Histograms the unclamped outputs of `model` over a set of prepared
/// network inputs. The binned range covers `[0, 1]` and every observed value,
/// so the counts sum to the number of output samples.
pub fn activation_histogram(
    model: &Backbone<f32>,
    inputs: &[Tensor<f32>],
    bins: usize,
    margin: f64,
) -> Result<ActivationHistogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no clips to histogram".into()));
    }
    if model.config().head != HeadKind::Linear {
        return Err(Error::InvalidArgument(
            "activation statistics are defined for a linear head".into(),
        ));
    }
    let outputs = inputs
        .iter()
        .map(|x| model.infer(x))
        .collect::<Result<Vec<_>>>()?;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for out in &outputs {
        for &v in out.data() {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    let mut outside = 0u64;
    for out in &outputs {
        for &v in out.data() {
            let v = v as f64;
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
            if v < -margin || v > 1.0 + margin {
                outside += 1;
            }
        }
    }
    Ok(ActivationHistogram {
        edges,
        counts,
        outside_range: outside,
        margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(k: usize, cin: usize, cout: usize) -> LayerShape {
        LayerShape::square(k, cin, cout).unwrap()
    }

    #[test]
    fn fan_values() {
        assert_eq!(fan_value(shape(3, 64, 128), FanMode::FanIn), 576);
        assert_eq!(fan_value(shape(3, 64, 128), FanMode::FanOut), 1152);
        assert_eq!(fan_value(shape(3, 64, 128), FanMode::FanMax), 1152);
        assert_eq!(fan_value(shape(5, 15, 64), FanMode::FanMax), 1600);
        assert_eq!(fan_value(shape(3, 128, 64), FanMode::FanMax), 1152);
    }

    #[test]
    fn zero_extent_shape_rejected() {
        assert!(LayerShape::new(0, 3, 1, 1).is_err());
        assert!(LayerShape::new(3, 3, 1, 0).is_err());
    }

    #[test]
    fn unit_fan_gives_sqrt_two() {
        assert_eq!(msra_std(shape(1, 1, 1), FanMode::FanIn), 2f64.sqrt());
    }

    #[test]
    fn msra_is_deterministic_per_seed() {
        let s = shape(3, 64, 128);
        let a: Vec<f32> = msra_init(s, FanMode::FanMax, &mut ChaCha8Rng::seed_from_u64(3));
        let b: Vec<f32> = msra_init(s, FanMode::FanMax, &mut ChaCha8Rng::seed_from_u64(3));
        let c: Vec<f32> = msra_init(s, FanMode::FanMax, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 9 * 64 * 128);
    }

    #[test]
    fn heads() {
        let t = Tensor::from_vec(1, 1, 1, 3, vec![1.2f32, -0.3, 0.0]).unwrap();
        assert_eq!(apply_head(&t, HeadKind::Linear, true).data(), &[1.0, 0.0, 0.0]);
        assert_eq!(apply_head(&t, HeadKind::Linear, false).data(), &[1.2, -0.3, 0.0]);
        assert_eq!(apply_head(&t, HeadKind::Sigmoid, false).data()[2], 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::dbn(15, 3).validate().is_ok());
        let mut c = ModelConfig::dbn(15, 3);
        c.depth = 0;
        assert!(c.validate().is_err());
        c = ModelConfig::dbn(15, 2);
        assert!(c.validate().is_err());
        c = ModelConfig::dbn(15, 3);
        c.base_width = 1024;
        assert!(c.validate().is_err(), "1024 << 3 overflows the channel limit");
        c.depth = 200;
        assert!(c.validate().is_err());
    }

    #[test]
    fn histogram_bin_lookup() {
        let h = ActivationHistogram {
            edges: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            counts: vec![0; 4],
            outside_range: 0,
            margin: 0.05,
        };
        assert_eq!(h.bin_of(0.5), Some(2));
        assert_eq!(h.bin_of(1.0), Some(3));
        assert_eq!(h.bin_of(-0.1), None);
    }
}

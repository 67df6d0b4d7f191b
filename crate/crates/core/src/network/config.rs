use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Channel width multiplier in `(0, 1]`, kept as an exact fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WidthScale {
    num: u32,
    den: u32,
}

impl WidthScale {
    pub const ONE: WidthScale = WidthScale { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::Config(format!("width_scale {num}/{den} must lie in (0, 1]")));
        }
        Ok(WidthScale { num, den })
    }

    /// `1/den`.
    pub fn inverse(den: u32) -> Self {
        WidthScale::new(1, den).expect("den >= 1")
    }

    /// Scaled channel count, rounded up, at least 1.
    pub fn apply(&self, channels: usize) -> usize {
        (channels * self.num as usize).div_ceil(self.den as usize).max(1)
    }
}

impl Default for WidthScale {
    fn default() -> Self {
        WidthScale::ONE
    }
}

impl fmt::Display for WidthScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for WidthScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("width_scale `{s}` is not a fraction like 1/16"));
        match s.trim().split_once('/') {
            Some((a, b)) => WidthScale::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => WidthScale::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

impl Serialize for WidthScale {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WidthScale {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which encoder features reach the decoder concatenation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Only the last encoder stage (alongside the pyramid levels).
    #[default]
    Single,
    /// Additionally every earlier stage, reduced by a 1x1 convolution.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// `(height, width)` the data pipeline resizes to.
    pub input_size: (usize, usize),
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub stage_dilations: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub pyramid_scales: Vec<usize>,
    pub pyramid_channels: usize,
    pub head_conv1_channels: usize,
    pub num_classes: usize,
    pub dropout_p: f64,
    pub skip_mode: SkipMode,
    pub width_scale: WidthScale,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: (384, 384),
            stem_channels: 64,
            stage_channels: vec![256, 512, 1024, 2048],
            stage_strides: vec![1, 2, 1, 1],
            stage_dilations: vec![1, 1, 2, 4],
            stage_depths: vec![1, 1, 1, 1],
            pyramid_scales: vec![1, 2, 3, 6],
            pyramid_channels: 1024,
            head_conv1_channels: 512,
            num_classes: 2,
            dropout_p: 0.5,
            skip_mode: SkipMode::Single,
            width_scale: WidthScale::ONE,
        }
    }
}

/// Spatial downsampling of the stem (strided convolution, then strided pooling).
pub const STEM_DOWNSAMPLE: usize = 4;
/// Total encoder downsampling.
pub const ENCODER_DOWNSAMPLE: usize = 8;

impl NetworkConfig {
    /// ResNet-50 stage depths.
    pub fn full_depth(mut self) -> Self {
        self.stage_depths = vec![3, 4, 6, 3];
        self
    }

    /// Reduced width at a small input size, for fast experiments.
    pub fn desk(width_den: u32, input: usize) -> Self {
        NetworkConfig { input_size: (input, input), width_scale: WidthScale::inverse(width_den), ..Default::default() }
    }

    pub fn with_skip_mode(mut self, skip_mode: SkipMode) -> Self {
        self.skip_mode = skip_mode;
        self
    }

    pub fn ch(&self, channels: usize) -> usize {
        self.width_scale.apply(channels)
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn encoder_channels(&self) -> usize {
        self.ch(*self.stage_channels.last().expect("validated"))
    }

    /// Channels entering the first head convolution.
    pub fn concat_channels(&self) -> usize {
        let mut c = self.encoder_channels() + self.pyramid_scales.len() * self.ch(self.pyramid_channels);
        if self.skip_mode == SkipMode::All {
            c += (self.num_stages() - 1) * self.ch(self.pyramid_channels);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 {
            return Err(Error::Config("network needs at least one stage".into()));
        }
        for (name, len) in [
            ("stage_strides", self.stage_strides.len()),
            ("stage_dilations", self.stage_dilations.len()),
            ("stage_depths", self.stage_depths.len()),
        ] {
            if len != n {
                return Err(Error::Config(format!("network.{name} has {len} entries, stage_channels has {n}")));
            }
        }
        let positive = |name: &str, v: &[usize]| {
            if v.contains(&0) {
                Err(Error::Config(format!("network.{name} entries must be positive")))
            } else {
                Ok(())
            }
        };
        positive("stage_channels", &self.stage_channels)?;
        positive("stage_strides", &self.stage_strides)?;
        positive("stage_dilations", &self.stage_dilations)?;
        positive("stage_depths", &self.stage_depths)?;
        positive("pyramid_scales", &self.pyramid_scales)?;
        let stride: usize = self.stage_strides.iter().product();
        if stride * STEM_DOWNSAMPLE != ENCODER_DOWNSAMPLE {
            return Err(Error::Config(format!(
                "stage strides multiply to {stride}; with the stem's x{STEM_DOWNSAMPLE} the encoder must downsample by {ENCODER_DOWNSAMPLE}"
            )));
        }
        if self.pyramid_scales.is_empty() {
            return Err(Error::Config("network.pyramid_scales must not be empty".into()));
        }
        if self.stem_channels == 0 || self.pyramid_channels == 0 || self.head_conv1_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("network.num_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("network.dropout_p = {} outside [0, 1)", self.dropout_p)));
        }
        let (h, w) = self.input_size;
        check_input_size(self, h, w)
    }

    pub fn max_pyramid_scale(&self) -> usize {
        self.pyramid_scales.iter().copied().max().unwrap_or(1)
    }
}

/// Inputs must downsample evenly by 8 and leave an encoder map at least as large as the
/// coarsest pyramid grid.
pub(crate) fn check_input_size(config: &NetworkConfig, h: usize, w: usize) -> Result<()> {
    let m = config.max_pyramid_scale();
    if h == 0 || w == 0 || !h.is_multiple_of(ENCODER_DOWNSAMPLE) || !w.is_multiple_of(ENCODER_DOWNSAMPLE) {
        return Err(Error::InputSize {
            height: h,
            width: w,
            requirement: format!("height and width must be positive multiples of {ENCODER_DOWNSAMPLE}"),
        });
    }
    if h / ENCODER_DOWNSAMPLE < m || w / ENCODER_DOWNSAMPLE < m {
        return Err(Error::InputSize {
            height: h,
            width: w,
            requirement: format!(
                "height and width must be at least {} so the encoder map covers the {m}x{m} pyramid grid",
                m * ENCODER_DOWNSAMPLE
            ),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_scale_parsing() {
        assert_eq!("1/16".parse::<WidthScale>().unwrap().apply(2048), 128);
        assert_eq!("1".parse::<WidthScale>().unwrap(), WidthScale::ONE);
        assert!("0/4".parse::<WidthScale>().is_err());
        assert!("3/2".parse::<WidthScale>().is_err());
        assert_eq!(WidthScale::new(1, 3).unwrap().apply(64), 22);
        assert_eq!(WidthScale::inverse(1024).apply(64), 1);
    }

    #[test]
    fn default_concat_width() {
        assert_eq!(NetworkConfig::default().concat_channels(), 6144);
        assert_eq!(NetworkConfig::default().with_skip_mode(SkipMode::All).concat_channels(), 6144 + 3 * 1024);
    }

    #[test]
    fn stride_product_enforced() {
        let mut c = NetworkConfig::default();
        c.stage_strides = vec![1, 2, 2, 1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn size_requirements() {
        let c = NetworkConfig::default();
        assert!(check_input_size(&c, 64, 64).is_ok());
        assert!(check_input_size(&c, 60, 64).is_err());
        let err = check_input_size(&c, 40, 40).unwrap_err().to_string();
        assert!(err.contains("at least 48"), "{err}");
    }
}

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::segrn::{self, downsampled_extent};
use crate::superpix::SlicConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Backbone plus one classification head.
    Fcn,
    /// Spatial reasoning branch only.
    Sagrn,
    /// Spectral reasoning branch only.
    Segrn,
    /// Both branches fused with the backbone feature.
    Ssgrn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Fcn, Variant::Sagrn, Variant::Segrn, Variant::Ssgrn];

    pub fn has_spatial(self) -> bool {
        matches!(self, Self::Sagrn | Self::Ssgrn)
    }

    pub fn has_spectral(self) -> bool {
        matches!(self, Self::Segrn | Self::Ssgrn)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcn" => Ok(Self::Fcn),
            "sagrn" => Ok(Self::Sagrn),
            "segrn" => Ok(Self::Segrn),
            "ssgrn" => Ok(Self::Ssgrn),
            _ => invalid(format!("unknown variant `{s}` (expected fcn, sagrn, segrn or ssgrn)")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fcn => "fcn",
            Self::Sagrn => "sagrn",
            Self::Segrn => "segrn",
            Self::Ssgrn => "ssgrn",
        })
    }
}

/// Architecture of a model.
///
/// The input extent is part of the architecture: spectral descriptors are
/// flattened feature maps, so the spectral projections are sized by it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_bands: usize,
    /// Input image extent before even-padding.
    pub height: usize,
    pub width: usize,
    /// Backbone block widths.
    pub widths: [usize; 3],
    /// Hidden width of every classification head.
    pub head_hidden: usize,
    /// Superpixel settings; `slic.k` is the spatial descriptor count `K`.
    pub slic: SlicConfig,
    /// Spectral descriptor count `M`.
    pub spectral_descriptors: usize,
    pub spectral_stride: usize,
    pub classes: usize,
    pub variant: Variant,
}

impl ModelConfig {
    /// Full-size defaults: widths 64/128/256, `K = 256`, `M = min(C, 256)`,
    /// head width 128, spectral stride 4.
    pub fn new(in_bands: usize, height: usize, width: usize, classes: usize, variant: Variant) -> Self {
        Self {
            in_bands,
            height,
            width,
            widths: [64, 128, 256],
            head_hidden: 128,
            slic: SlicConfig::default(),
            spectral_descriptors: 256,
            spectral_stride: segrn::DEFAULT_STRIDE,
            classes,
            variant,
        }
    }

    /// Sets backbone widths and derives head width (`widths[2] / 2`) and
    /// `M = min(widths[2], M)`.
    pub fn with_widths(mut self, widths: [usize; 3]) -> Self {
        self.widths = widths;
        self.head_hidden = (widths[2] / 2).max(1);
        self.spectral_descriptors = self.spectral_descriptors.min(widths[2]);
        self
    }

    pub fn descriptors(&self) -> usize {
        self.slic.k
    }

    /// Input extent after even-padding.
    pub fn padded_extent(&self) -> (usize, usize) {
        (self.height + self.height % 2, self.width + self.width % 2)
    }

    /// Backbone feature extent.
    pub fn feature_extent(&self) -> (usize, usize) {
        let (h, w) = self.padded_extent();
        (h / 2, w / 2)
    }

    /// Length `L` of a spectral descriptor.
    pub fn descriptor_len(&self) -> usize {
        let (h, w) = self.feature_extent();
        let (hp, wp) = downsampled_extent(h, w, self.spectral_stride.max(1));
        hp * wp
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_bands == 0 || self.height == 0 || self.width == 0 {
            return invalid("bands and image extents must be positive");
        }
        if self.widths.contains(&0) || self.head_hidden == 0 {
            return invalid(format!("layer widths must be positive, got {:?}", self.widths));
        }
        if self.classes == 0 || self.classes > u16::MAX as usize {
            return invalid(format!("class count {} out of range", self.classes));
        }
        if self.spectral_stride == 0 {
            return invalid("spectral stride must be at least 1");
        }
        let (fh, fw) = self.feature_extent();
        if self.variant.has_spatial() {
            self.slic.validate()?;
            if self.slic.k > fh * fw {
                return invalid(format!(
                    "{} descriptors exceed the {}×{} feature map",
                    self.slic.k, fh, fw
                ));
            }
        }
        if self.variant.has_spectral() && (self.spectral_descriptors == 0 || self.spectral_descriptors > self.widths[2]) {
            return invalid(format!(
                "spectral descriptor count {} must be in 1..={}",
                self.spectral_descriptors, self.widths[2]
            ));
        }
        Ok(())
    }

    /// `key=value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let w = self.widths;
        vec![
            ("variant", self.variant.to_string()),
            ("in_bands", self.in_bands.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("classes", self.classes.to_string()),
            ("widths", format!("{},{},{}", w[0], w[1], w[2])),
            ("head_hidden", self.head_hidden.to_string()),
            ("descriptors", self.slic.k.to_string()),
            ("slic_iters", self.slic.iters.to_string()),
            ("compactness", self.slic.compactness.to_string()),
            ("temperature", self.slic.temperature.to_string()),
            ("spectral_descriptors", self.spectral_descriptors.to_string()),
            ("spectral_stride", self.spectral_stride.to_string()),
        ]
    }

    /// Inverse of [`to_pairs`](Self::to_pairs). Every key must be present.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = Self::new(1, 1, 1, 1, Variant::Fcn);
        let mut seen = Vec::new();
        for (k, v) in pairs {
            let bad = |e: &dyn fmt::Display| Error::Format(format!("config key `{k}`: {e}"));
            let num = |v: &str| v.trim().parse::<usize>().map_err(|e| bad(&e));
            let real = |v: &str| v.trim().parse::<f64>().map_err(|e| bad(&e));
            match k {
                "variant" => c.variant = v.parse()?,
                "in_bands" => c.in_bands = num(v)?,
                "height" => c.height = num(v)?,
                "width" => c.width = num(v)?,
                "classes" => c.classes = num(v)?,
                "widths" => {
                    let parts: Vec<usize> = v.split(',').map(num).collect::<Result<_>>()?;
                    c.widths = parts
                        .try_into()
                        .map_err(|_| bad(&"expected three comma-separated widths"))?;
                }
                "head_hidden" => c.head_hidden = num(v)?,
                "descriptors" => c.slic.k = num(v)?,
                "slic_iters" => c.slic.iters = num(v)?,
                "compactness" => c.slic.compactness = real(v)?,
                "temperature" => c.slic.temperature = real(v)?,
                "spectral_descriptors" => c.spectral_descriptors = num(v)?,
                "spectral_stride" => c.spectral_stride = num(v)?,
                _ => return Err(Error::Format(format!("unknown config key `{k}`"))),
            }
            seen.push(k.to_string());
        }
        for (k, _) in c.to_pairs() {
            if !seen.iter().any(|s| s == k) {
                return Err(Error::Missing(format!("config key `{k}`")));
            }
        }
        c.validate()?;
        Ok(c)
    }
}

use crate::error::{Error, Result};

/// Row-major `H×W×C` image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "image {height}×{width}×{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Single-channel copy of channel `c`.
    pub fn channel(&self, c: usize) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self
                .data
                .chunks_exact(self.channels)
                .map(|px| px[c])
                .collect(),
        }
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Crop of `h×w` pixels starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Image {
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in y0..y0 + h {
            let s = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[s..s + w * self.channels]);
        }
        Image {
            height: h,
            width: w,
            channels: self.channels,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DisparityMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "disparity map {height}×{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(DisparityMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        DisparityMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> DisparityMap {
        let data = (y0..y0 + h)
            .flat_map(|y| self.data[y * self.width + x0..y * self.width + x0 + w].iter().copied())
            .collect();
        DisparityMap {
            height: h,
            width: w,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl ValidityMask {
    pub fn all(height: usize, width: usize, valid: bool) -> Self {
        ValidityMask {
            height,
            width,
            data: vec![valid; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> ValidityMask {
        let data = (y0..y0 + h)
            .flat_map(|y| self.data[y * self.width + x0..y * self.width + x0 + w].iter().copied())
            .collect();
        ValidityMask {
            height: h,
            width: w,
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfidenceKind {
    Estimated,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub kind: ConfidenceKind,
}

impl ConfidenceMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>, kind: ConfidenceKind) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "confidence map {height}×{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(ConfidenceMap {
            height,
            width,
            data,
            kind,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        ConfidenceMap {
            height,
            width,
            data: vec![value; height * width],
            kind: ConfidenceKind::Estimated,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostKind {
    /// Non-negative matching costs.
    Raw,
    /// Network output; unconstrained reals.
    Refined,
}

/// `H×W×D` matching costs, candidate index innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub height: usize,
    pub width: usize,
    pub disparities: usize,
    pub data: Vec<f64>,
    pub kind: CostKind,
}

impl CostVolume {
    pub fn new(
        height: usize,
        width: usize,
        disparities: usize,
        data: Vec<f64>,
        kind: CostKind,
    ) -> Result<Self> {
        if data.len() != height * width * disparities {
            return Err(Error::shape(format!(
                "cost volume {height}×{width}×{disparities} needs {} values, got {}",
                height * width * disparities,
                data.len()
            )));
        }
        if kind == CostKind::Raw && data.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("raw costs must be non-negative"));
        }
        Ok(CostVolume {
            height,
            width,
            disparities,
            data,
            kind,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, d: usize) -> f64 {
        self.data[(y * self.width + x) * self.disparities + d]
    }

    #[inline]
    pub fn costs(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.disparities;
        &self.data[i..i + self.disparities]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> CostVolume {
        let d = self.disparities;
        let mut data = Vec::with_capacity(h * w * d);
        for y in y0..y0 + h {
            let s = (y * self.width + x0) * d;
            data.extend_from_slice(&self.data[s..s + w * d]);
        }
        CostVolume {
            height: h,
            width: w,
            disparities: d,
            data,
            kind: self.kind,
        }
    }
}

/// A rectified stereo pair with (possibly sparse) ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: Image,
    pub right: Image,
    pub gt_disparity: DisparityMap,
    pub gt_valid: ValidityMask,
    pub d_max: usize,
    /// Generator seed for synthetic samples.
    pub seed: Option<u64>,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.left.height
    }

    pub fn width(&self) -> usize {
        self.left.width
    }

    /// Checks the shape and range invariants.
    pub fn validate(&self) -> Result<()> {
        if self.left.height != self.right.height
            || self.left.width != self.right.width
            || self.left.channels != self.right.channels
        {
            return Err(Error::shape("left and right images differ in shape"));
        }
        let (h, w) = (self.height(), self.width());
        if self.gt_disparity.height != h
            || self.gt_disparity.width != w
            || self.gt_valid.height != h
            || self.gt_valid.width != w
        {
            return Err(Error::shape("ground truth does not match image size"));
        }
        if self.d_max == 0 {
            return Err(Error::invalid("d_max must be positive"));
        }
        let top = (self.d_max - 1) as f64;
        for (&d, &v) in self.gt_disparity.data.iter().zip(&self.gt_valid.data) {
            if v && !(0.0..=top).contains(&d) {
                return Err(Error::invalid(format!(
                    "valid ground-truth disparity {d} outside [0, {top}]"
                )));
            }
        }
        Ok(())
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> StereoSample {
        StereoSample {
            left: self.left.crop(y0, x0, h, w),
            right: self.right.crop(y0, x0, h, w),
            gt_disparity: self.gt_disparity.crop(y0, x0, h, w),
            gt_valid: self.gt_valid.crop(y0, x0, h, w),
            d_max: self.d_max,
            seed: self.seed,
        }
    }
}

//! HDR/LDR image containers, the gamma tonemap with exposure scaling, and
//! multi-exposure merging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rgb = [f64; 3];

/// Gamma used throughout the pipeline for HDR to LDR conversion.
pub const DEFAULT_GAMMA: f64 = 2.4;

/// LDR values at or above `1 - SATURATION_EPS` count as clipped.
pub const SATURATION_EPS: f64 = 1.0 / 512.0;

pub const DEFAULT_EV_MIN: f64 = -5.0;

/// Linear RGB radiance, row-major, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Display-referred RGB in `[0, 1]`, row-major, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct LdrImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

macro_rules! image_common {
    ($ty:ident) => {
        impl $ty {
            pub fn zeros(width: usize, height: usize) -> Self {
                Self {
                    width,
                    height,
                    data: vec![0.0; width * height * 3],
                }
            }

            pub fn filled(width: usize, height: usize, value: Rgb) -> Self {
                let mut img = Self::zeros(width, height);
                for px in img.data.chunks_exact_mut(3) {
                    px.copy_from_slice(&value);
                }
                img
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn dims(&self) -> (usize, usize) {
                (self.width, self.height)
            }

            pub fn len_pixels(&self) -> usize {
                self.width * self.height
            }

            pub fn data(&self) -> &[f64] {
                &self.data
            }

            /// Mutable access to the raw samples. Callers are responsible for
            /// keeping the value invariants; consumers re-validate.
            pub fn data_mut(&mut self) -> &mut [f64] {
                &mut self.data
            }

            pub fn into_data(self) -> Vec<f64> {
                self.data
            }

            #[inline]
            pub fn get(&self, x: usize, y: usize) -> Rgb {
                let i = (y * self.width + x) * 3;
                [self.data[i], self.data[i + 1], self.data[i + 2]]
            }

            #[inline]
            pub fn pixel(&self, index: usize) -> Rgb {
                let i = index * 3;
                [self.data[i], self.data[i + 1], self.data[i + 2]]
            }

            #[inline]
            pub fn set(&mut self, x: usize, y: usize, value: Rgb) {
                let i = (y * self.width + x) * 3;
                self.data[i..i + 3].copy_from_slice(&value);
            }

            #[inline]
            pub fn set_pixel(&mut self, index: usize, value: Rgb) {
                let i = index * 3;
                self.data[i..i + 3].copy_from_slice(&value);
            }

            pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
                self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
            }

            pub fn same_dims<O>(&self, other: &O) -> Result<()>
            where
                O: HasDims,
            {
                let (w, h) = other.image_dims();
                if (w, h) != (self.width, self.height) {
                    return Err(Error::mismatch(
                        format!("{}x{}", self.width, self.height),
                        format!("{}x{}", w, h),
                    ));
                }
                Ok(())
            }
        }

        impl HasDims for $ty {
            fn image_dims(&self) -> (usize, usize) {
                (self.width, self.height)
            }
        }
    };
}

pub trait HasDims {
    fn image_dims(&self) -> (usize, usize);
}

image_common!(HdrImage);
image_common!(LdrImage);

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if len != width * height * 3 {
        return Err(Error::mismatch(width * height * 3, len));
    }
    Ok(())
}

impl HdrImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        let img = Self { width, height, data };
        img.validate()?;
        Ok(img)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((i, v)) = self
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidData(format!(
                "HDR sample {} at pixel {} is not a finite non-negative value",
                v,
                i / 3
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> HdrImage {
        HdrImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

impl LdrImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        let img = Self { width, height, data };
        img.validate()?;
        Ok(img)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self { width, height, data }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((i, v)) = self
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidData(format!(
                "LDR sample {} at pixel {} is outside [0, 1]",
                v,
                i / 3
            )));
        }
        Ok(())
    }
}

/// An exposure offset in stops, constrained to `[ev_min, 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureValue {
    ev: f64,
    ev_min: f64,
}

impl ExposureValue {
    pub fn new(ev: f64, ev_min: f64) -> Result<Self> {
        if !(ev_min < 0.0) || !ev_min.is_finite() {
            return Err(Error::InvalidArgument(format!("ev_min must be negative, got {ev_min}")));
        }
        if !(ev_min..=0.0).contains(&ev) {
            return Err(Error::InvalidArgument(format!(
                "ev {ev} outside [{ev_min}, 0]"
            )));
        }
        Ok(Self { ev, ev_min })
    }

    /// `ev` within the default `[-5, 0]` range.
    pub fn with_default_floor(ev: f64) -> Result<Self> {
        Self::new(ev, DEFAULT_EV_MIN)
    }

    pub fn nominal() -> Self {
        Self {
            ev: 0.0,
            ev_min: DEFAULT_EV_MIN,
        }
    }

    pub fn ev(&self) -> f64 {
        self.ev
    }

    pub fn ev_min(&self) -> f64 {
        self.ev_min
    }

    /// Linear radiance multiplier `2^ev`.
    pub fn gain(&self) -> f64 {
        self.ev.exp2()
    }
}

#[inline]
pub fn tonemap_value(v: f64, gain: f64, gamma: f64) -> f64 {
    (gain * v).clamp(0.0, 1.0).powf(1.0 / gamma)
}

/// Derivative of [`tonemap_value`] with respect to `v`. Zero where clipped.
#[inline]
pub fn tonemap_derivative(v: f64, gain: f64, gamma: f64) -> f64 {
    let s = gain * v;
    if s <= 0.0 || s >= 1.0 {
        return 0.0;
    }
    gain / gamma * s.powf(1.0 / gamma - 1.0)
}

#[inline]
pub fn tonemap_rgb(c: Rgb, gain: f64, gamma: f64) -> Rgb {
    c.map(|v| tonemap_value(v, gain, gamma))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    Ok(())
}

/// `clamp(2^ev * hdr, 0, 1)^(1/gamma)` per channel.
pub fn tonemap(img: &HdrImage, ev: ExposureValue, gamma: f64) -> Result<LdrImage> {
    check_gamma(gamma)?;
    img.validate()?;
    let gain = ev.gain();
    Ok(LdrImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| tonemap_value(v, gain, gamma)).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct InverseTonemapped {
    pub image: HdrImage,
    /// Per pixel: any channel at or above `1 - SATURATION_EPS`.
    pub saturated: Vec<bool>,
}

pub fn inverse_tonemap(img: &LdrImage, ev: ExposureValue, gamma: f64) -> Result<InverseTonemapped> {
    check_gamma(gamma)?;
    img.validate()?;
    let inv_gain = 1.0 / ev.gain();
    let data = img.data.iter().map(|&v| v.powf(gamma) * inv_gain).collect();
    let saturated = img
        .data
        .chunks_exact(3)
        .map(|px| px.iter().any(|&v| v >= 1.0 - SATURATION_EPS))
        .collect();
    Ok(InverseTonemapped {
        image: HdrImage {
            width: img.width,
            height: img.height,
            data,
        },
        saturated,
    })
}

/// Triangular weight peaking at 0.5, zero at both ends and in the clipped band.
#[inline]
pub fn hat_weight(v: f64) -> f64 {
    if v >= 1.0 - SATURATION_EPS {
        return 0.0;
    }
    (1.0 - (2.0 * v - 1.0).abs()).clamp(0.0, 1.0)
}

/// Merges LDR brackets of the same scene into one HDR image.
///
/// Per channel, unsaturated brackets are averaged with [`hat_weight`] after
/// inversion. When every bracket is clipped the darkest (lowest ev) bracket
/// is used as is.
pub fn merge_exposures(brackets: &[(LdrImage, ExposureValue)], gamma: f64) -> Result<HdrImage> {
    check_gamma(gamma)?;
    let (first, _) = brackets
        .first()
        .ok_or_else(|| Error::InvalidArgument("merge_exposures needs at least one bracket".into()))?;
    for (img, _) in brackets {
        first.same_dims(img)?;
        img.validate()?;
    }
    for (i, (_, a)) in brackets.iter().enumerate() {
        if brackets[i + 1..].iter().any(|(_, b)| b.ev() == a.ev()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate bracket exposure {}",
                a.ev()
            )));
        }
    }
    let darkest = brackets
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.ev().total_cmp(&b.1 .1.ev()))
        .map(|(i, _)| i)
        .unwrap_or(0);

    let gains: Vec<f64> = brackets.iter().map(|(_, ev)| 1.0 / ev.gain()).collect();
    let n = first.data.len();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut wsum = 0.0;
        let mut acc = 0.0;
        // fallback among unsaturated brackets when all weights vanish (pure black)
        let mut brightest_unsat: Option<(f64, f64)> = None;
        for (b, (img, _)) in brackets.iter().enumerate() {
            let v = img.data[i];
            if v >= 1.0 - SATURATION_EPS {
                continue;
            }
            let radiance = v.powf(gamma) * gains[b];
            let w = hat_weight(v);
            wsum += w;
            acc += w * radiance;
            if brightest_unsat.is_none_or(|(bv, _)| v > bv) {
                brightest_unsat = Some((v, radiance));
            }
        }
        *o = if wsum > 0.0 {
            acc / wsum
        } else if let Some((_, radiance)) = brightest_unsat {
            radiance
        } else {
            brackets[darkest].0.data[i].powf(gamma) * gains[darkest]
        };
    }
    HdrImage::new(first.width, first.height, out)
}

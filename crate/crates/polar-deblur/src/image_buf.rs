//! Planar three-channel image container used throughout the pipeline.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of color channels in every image and per-pixel map.
pub const CHANNELS: usize = 3;

/// A three-channel image in linear radiance, stored planar
/// (`[channel][row][column]`).
///
/// The same container carries every per-pixel map in the pipeline: radiance
/// is non-negative, while derived maps such as the Stokes components `S1`
/// and `S2` are signed. Values are nominally in `[0, 1]` but may exceed 1
/// before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceImage<T = f32> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> RadianceImage<T> {
    /// All-zero image of the given dimensions.
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        RadianceImage {
            height,
            width,
            data: vec![T::zero(); CHANNELS * height * width],
        }
    }

    /// Image with every sample set to `value`.
    pub fn constant(height: usize, width: usize, value: T) -> Self {
        let mut img = Self::zeros(height, width);
        img.data.fill(value);
        img
    }

    /// Build from a per-sample closure `(channel, y, x) -> value`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut img = Self::zeros(height, width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    let v = f(c, y, x);
                    img.data[(c * height + y) * width + x] = v;
                }
            }
        }
        img
    }

    /// Wrap an existing planar buffer (`CHANNELS * height * width` samples).
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::Domain(format!(
                "buffer length {} does not match {}x{}x{}",
                data.len(),
                CHANNELS,
                height,
                width
            )));
        }
        Ok(RadianceImage { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// One channel plane as a contiguous slice.
    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_shape<U: Scalar>(&self, other: &RadianceImage<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn shape_check<U: Scalar>(
        &self,
        other: &RadianceImage<U>,
        context: &'static str,
    ) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                context,
                expected_h: self.height,
                expected_w: self.width,
                got_h: other.height,
                got_w: other.width,
            })
        }
    }

    /// Elementwise map into a new image.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        RadianceImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped images.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert!(self.same_shape(other), "zip_map shape mismatch");
        RadianceImage {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Largest absolute difference against another image.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert!(self.same_shape(other), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// True when every sample is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert the element type (used to lift f32 pipeline data into f64
    /// oracle checks).
    pub fn cast<U: Scalar>(&self) -> RadianceImage<U> {
        RadianceImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

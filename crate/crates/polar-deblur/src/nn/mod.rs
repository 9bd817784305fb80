//! Minimal deterministic tape autodiff engine.
//!
//! The training core needs exact control over numerics: bit-identical
//! reruns on a fixed seed, an `f64` instantiation for finite-difference
//! verification, and single-threaded deterministic reductions. The engine
//! is a classic define-by-run tape over NCHW tensors: every operation
//! appends a node holding its forward value, and [`Graph::backward`] walks
//! the tape in reverse accumulating gradients.
//!
//! Convolutions are lowered to GEMM via im2col (see [`conv`]); everything
//! else is plain loops. No threading anywhere: results are a pure function
//! of inputs on every machine.

pub mod adam;
pub mod conv;
pub mod graph;
pub mod init;

pub use adam::Adam;
pub use conv::PadMode;
pub use graph::{Graph, NodeId};

use crate::image_buf::{RadianceImage, CHANNELS};
use crate::scalar::Scalar;

/// Dimensions of an NCHW tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn nchw(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn filled(shape: Shape, v: T) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(shape.numel(), data.len(), "tensor data length mismatch");
        Tensor { shape, data }
    }

    /// Scalar tensor `[1,1,1,1]`.
    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(Shape::nchw(1, 1, 1, 1), vec![v])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Stack images into a `[N, 3, H, W]` batch tensor.
    pub fn from_images(images: &[&RadianceImage<T>]) -> Self {
        assert!(!images.is_empty(), "empty batch");
        let (h, w) = (images[0].height(), images[0].width());
        let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
        for img in images {
            assert!(
                img.height() == h && img.width() == w,
                "batch images must share dimensions"
            );
            data.extend_from_slice(img.data());
        }
        Tensor::from_vec(Shape::nchw(images.len(), CHANNELS, h, w), data)
    }

    /// Extract batch element `n` as an image (channel count must be 3).
    pub fn to_image(&self, n: usize) -> RadianceImage<T> {
        let Shape { c, h, w, .. } = self.shape;
        assert_eq!(c, CHANNELS, "tensor is not an image batch");
        let len = c * h * w;
        RadianceImage::from_vec(h, w, self.data[n * len..(n + 1) * len].to_vec())
            .expect("image extraction")
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().map(|v| v.abs()).fold(T::zero(), T::max)
    }
}

//! Polarization-aware motion deblurring.
//!
//! A snapshot polarization camera captures four linear-polarized images at
//! polarizer angles 0°, 45°, 90° and 135°. The degree and angle of linear
//! polarization (DoLP / AoLP) are computed from per-pixel differences between
//! those images, which makes them brutally sensitive to motion blur: the
//! blur mixes neighbouring polarization states before the non-linear
//! DoLP/AoLP recovery, and the micro-polarizer array forces longer exposures
//! in the first place.
//!
//! This crate implements the full desk-scale pipeline for studying and
//! solving that problem:
//!
//! * [`polar`] — image-formation and inversion math (Malus-law rendering,
//!   Stokes parameters, DoLP/AoLP recovery, physical validity checks);
//! * [`blur`] — camera-shake trajectory generation and spatially-variant
//!   blur synthesis with a shared per-scene kernel field;
//! * [`scene`] / [`dataset`] — procedural polarized scene generation and a
//!   deterministic on-disk corpus format;
//! * [`nn`] — a small deterministic tape autodiff engine (f32 for training,
//!   f64 for gradient verification);
//! * [`model`] — the two-stage restoration network: an unpolarized image
//!   estimator with Stokes-guided skip connections, and a polarized image
//!   reconstructor with multiscale context transfer and polarization-based
//!   grouping;
//! * [`loss`] — content and Stokes losses with their training weights;
//! * [`train`] / [`eval`] — the three-phase training schedule and the
//!   PSNR/SSIM evaluation harness on DoLP, AoLP and intensity;
//! * [`cli`] — the `polar-deblur` command-line surface.
//!
//! The `book/` directory of the repository is an mdBook guide whose code
//! snippets double as this crate's doc-tests (see `book_doctests`).

pub mod blur;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image_buf;
pub mod loss;
pub mod model;
pub mod nn;
pub mod polar;
pub mod scalar;
pub mod scene;
pub mod train;
pub mod vis;

mod book_doctests;

pub use error::{Error, Result};
pub use image_buf::RadianceImage;
pub use polar::{PolarizationState, PolarizedImageSet, StokesMaps};

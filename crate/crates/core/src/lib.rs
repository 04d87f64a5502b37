//! Thickness measurement of a thin bright layer in grayscale micrographs.
//!
//! The pipeline runs left to right:
//!
//! 1. [`synth`] produces layered test images with known thickness.
//! 2. [`nnet`] trains an encoder-decoder segmenter and a regressive CNN.
//! 3. [`postprocess`] keeps the largest connected region of a prediction.
//! 4. [`measure`] estimates thickness along normals to the midline fit, or
//!    with the legacy three-chord procedure.
//! 5. [`metrics`] scores segmentations and thickness agreement.
//!
//! [`image`], [`pgm`] and [`overlay`] hold the raster types and file formats.

pub mod error;
pub mod image;
pub mod measure;
pub mod metrics;
pub mod nnet;
pub mod overlay;
pub mod pgm;
pub mod postprocess;
pub mod synth;

pub use error::{Error, Result};
pub use image::{normalize, BinaryMask, Gray8, GrayImage, RgbImage};
pub use measure::{orthogonal_report, three_line_report, Method, ThicknessReport};
pub use postprocess::postprocess;

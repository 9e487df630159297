//! CT leukoencephalopathy classification pipeline.
//!
//! Stages, in pipeline order:
//!
//! * [`dicom`]: minimal DICOM parsing/writing and per-patient loading.
//! * [`hu`]: Hounsfield-unit conversion and the `<0, 100>` HU brain window.
//! * [`volume_prep`]: center-based slice selection and bilinear resizing.
//! * [`preprocess`]: preprocessing variants A, B and C.
//! * [`augment`]: rotation and horizontal-flip augmentation.
//! * [`cnn`]: the small three-block CNN, Adam and training.
//! * [`gradcam`]: gradient-weighted class activation maps.
//! * [`evaluate`]: splits, metrics, slice voting and experiment reports.
//! * [`phantom`]: synthetic CT phantoms for testing without patient data.
//! * [`cli`]: the command-line pipeline driver.

pub mod augment;
pub mod cli;
pub mod cnn;
pub mod dicom;
pub mod evaluate;
pub mod gradcam;
pub mod grid;
pub mod hu;
pub mod phantom;
pub mod preprocess;
pub mod volume_prep;

pub use grid::{Image, UnitSlice, UnitVolume};

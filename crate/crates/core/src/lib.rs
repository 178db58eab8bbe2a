//! Brain-age regression from structural MRI.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! 1. [`ingest`]: discover MINC / DICOM / PNG sources, join age labels and
//!    convert everything to 224×224 8-bit RGB PNG files.
//! 2. [`preprocess`]: load converted files as `[0,1]` tensors.
//! 3. [`isoforest`]: score images with an isolation forest and drop the
//!    most anomalous fraction.
//! 4. [`model`]: a convolutional backbone with a global-average-pooling
//!    regression head, trained with Adam on squared error.
//! 5. [`evaluation`]: k-fold cross-validation, error metrics and the
//!    before/after-filtering comparison report.
//!
//! [`cli`] ties the stages to a run directory.

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod isoforest;
pub mod model;
pub mod preprocess;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};

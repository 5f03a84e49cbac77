//! Driver stress classification from ECG.
//!
//! The pipeline runs pre-processing (resampling, band-pass filtering,
//! Pan-Tompkins R-peak detection), RR interval extraction, sliding-window
//! segmentation with HRV feature extraction, and Random Forest
//! classification. The two windowing hyperparameters (window size and overlap
//! degree) are tuned by particle swarm optimization, with uniform random
//! search as a baseline.

pub mod dsp;
pub mod forest;
pub mod hrv;
pub mod ingest;
pub mod optimize;
pub mod qrs;
pub mod synth;
pub mod windowing;

pub use ingest::{AnnotationSpan, EcgRecord, StressLabel};
pub use windowing::{FeatureMatrix, FeatureSet, WindowParams};

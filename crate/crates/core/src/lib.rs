//! Language identification toolkit built around phonetic temporal neural models.
//!
//! The crate covers the full pipeline: WAV input and filterbank/MFCC extraction
//! ([`dsp`]), a small explicit-backward numerical core ([`nn`]), the LSTM unit
//! with dual projections and diagonal peepholes ([`lstmp`]), time-delay phone
//! classifiers ([`tdnn`]), model composition for the acoustic, phonetically
//! aware and phonetic-only input modes ([`model`]), SGD training ([`train`]),
//! detection metrics ([`metrics`]) and a synthetic-language corpus generator
//! ([`synth`]) for end-to-end evaluation without licensed speech data.

pub mod dsp;
pub mod lstmp;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod suite;
pub mod synth;
pub mod tdnn;
pub mod train;

pub use dsp::{FeatureKind, FeatureMatrix, FrontendConfig, Waveform};
pub use model::{build_model, InputMode, Model, ModelSpec, Posteriorgram};
pub use nn::{ParamMat, ParamSet, ParamVec};

//! Waveform I/O and acoustic feature extraction.
//!
//! All operations are pure functions of (input, config, seed); nothing here
//! keeps mutable state, so utterances can be processed concurrently.

mod archive;
mod augment;
mod feats;
mod wav;

pub use archive::{read_archive, write_archive, ArchiveRecord, ARCHIVE_MAGIC};
pub use augment::{add_noise, slice_utterance, white_noise};
pub use feats::{deltas, dct_ii_truncated, fbank, mel_center_freqs, mfcc, splice};
pub use wav::{read_wav, write_wav};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("wav: {0}")]
    Wav(String),
    #[error("utterance shorter than one frame ({samples} samples, frame {frame} samples)")]
    TooShort { samples: usize, frame: usize },
    #[error("zero-power {0} signal")]
    ZeroPower(&'static str),
    #[error("sample rate mismatch: {0} vs {1}")]
    SampleRateMismatch(u32, u32),
    #[error("requested {requested} samples from a {available}-sample utterance")]
    SliceTooLong { requested: usize, available: usize },
    #[error("feature archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mono PCM audio with samples normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        debug_assert!(sample_rate > 0);
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Root-mean-square amplitude.
    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Fbank,
    Mfcc,
    Spliced,
    Phonetic,
}

impl FeatureKind {
    pub fn to_u8(self) -> u8 {
        match self {
            FeatureKind::Fbank => 0,
            FeatureKind::Mfcc => 1,
            FeatureKind::Spliced => 2,
            FeatureKind::Phonetic => 3,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(FeatureKind::Fbank),
            1 => Some(FeatureKind::Mfcc),
            2 => Some(FeatureKind::Spliced),
            3 => Some(FeatureKind::Phonetic),
            _ => None,
        }
    }
}

/// Frames-by-dims feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f64>,
    pub kind: FeatureKind,
    pub frame_shift: f64,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Raised cosine taken to the power 0.85.
    Povey,
    Hamming,
}

/// Front-end configuration shared by fbank and MFCC extraction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub frame_length: f64,
    pub frame_shift: f64,
    pub num_mel_bins: usize,
    pub mfcc_ceps: usize,
    pub append_energy: bool,
    pub delta_order: usize,
    pub preemphasis: f64,
    pub window: WindowKind,
    pub dither: f64,
    pub mean_normalize: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            frame_length: 0.025,
            frame_shift: 0.010,
            num_mel_bins: 23,
            mfcc_ceps: 12,
            append_energy: true,
            delta_order: 2,
            preemphasis: 0.97,
            window: WindowKind::Povey,
            dither: 0.0,
            mean_normalize: false,
        }
    }
}

impl FrontendConfig {
    pub fn frame_length_samples(&self, sample_rate: u32) -> usize {
        (self.frame_length * sample_rate as f64).round() as usize
    }

    pub fn frame_shift_samples(&self, sample_rate: u32) -> usize {
        (self.frame_shift * sample_rate as f64).round() as usize
    }

    /// Number of frames for an utterance of `samples` samples.
    pub fn num_frames(&self, samples: usize, sample_rate: u32) -> usize {
        let flen = self.frame_length_samples(sample_rate);
        let shift = self.frame_shift_samples(sample_rate);
        if samples < flen {
            0
        } else {
            (samples - flen) / shift + 1
        }
    }
}

/// Energy floor applied before every log.
pub const LOG_ENERGY_FLOOR: f64 = 1e-10;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{
    DspError, FeatureKind, FeatureMatrix, FrontendConfig, Result, Waveform, WindowKind,
    LOG_ENERGY_FLOOR,
};

/// HTK mel scale.
fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Lowest frequency covered by the filterbank.
const MEL_LOW_HZ: f64 = 20.0;

fn next_pow2(n: usize) -> usize {
    let mut p = 1;
    while p < n {
        p <<= 1;
    }
    p
}

/// Center frequencies (Hz) of the mel triangles for a given setup.
pub fn mel_center_freqs(num_bins: usize, sample_rate: u32) -> Vec<f64> {
    let m_lo = hz_to_mel(MEL_LOW_HZ);
    let m_hi = hz_to_mel(sample_rate as f64 / 2.0);
    let delta = (m_hi - m_lo) / (num_bins + 1) as f64;
    (0..num_bins)
        .map(|j| mel_to_hz(m_lo + (j + 1) as f64 * delta))
        .collect()
}

/// Triangle weights over power-spectrum bins, one row per mel filter.
/// Triangles are built in the mel domain and peak at 1.
fn mel_filterbank(num_bins: usize, nfft: usize, sample_rate: u32) -> Array2<f64> {
    let n_freqs = nfft / 2 + 1;
    let m_lo = hz_to_mel(MEL_LOW_HZ);
    let m_hi = hz_to_mel(sample_rate as f64 / 2.0);
    let delta = (m_hi - m_lo) / (num_bins + 1) as f64;
    let mut weights = Array2::zeros((num_bins, n_freqs));
    for j in 0..num_bins {
        let left = m_lo + j as f64 * delta;
        let center = left + delta;
        let right = center + delta;
        for k in 0..n_freqs {
            let mel_k = hz_to_mel(k as f64 * sample_rate as f64 / nfft as f64);
            let w = if mel_k >= left && mel_k <= center {
                (mel_k - left) / delta
            } else if mel_k > center && mel_k <= right {
                (right - mel_k) / delta
            } else {
                0.0
            };
            weights[[j, k]] = w;
        }
    }
    weights
}

fn window_coeffs(kind: WindowKind, len: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    (0..len)
        .map(|n| {
            let c = (2.0 * PI * n as f64 / (len - 1) as f64).cos();
            match kind {
                WindowKind::Povey => (0.5 - 0.5 * c).powf(0.85),
                WindowKind::Hamming => 0.54 - 0.46 * c,
            }
        })
        .collect()
}

struct FramePipeline {
    nfft: usize,
    window: Vec<f64>,
    mel: Array2<f64>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl FramePipeline {
    fn new(cfg: &FrontendConfig, sample_rate: u32) -> Self {
        let flen = cfg.frame_length_samples(sample_rate);
        let nfft = next_pow2(flen);
        FramePipeline {
            nfft,
            window: window_coeffs(cfg.window, flen),
            mel: mel_filterbank(cfg.num_mel_bins, nfft, sample_rate),
            fft: FftPlanner::new().plan_fft_forward(nfft),
        }
    }

    /// Log-mel energies and raw log energy for one frame.
    fn process(&self, frame: &mut [f64], preemph: f64) -> (Array1<f64>, f64) {
        let raw_energy = frame.iter().map(|s| s * s).sum::<f64>();
        let log_energy = raw_energy.max(LOG_ENERGY_FLOOR).ln();
        if preemph != 0.0 {
            for i in (1..frame.len()).rev() {
                frame[i] -= preemph * frame[i - 1];
            }
            frame[0] -= preemph * frame[0];
        }
        let mut buf: Vec<Complex64> = frame
            .iter()
            .zip(&self.window)
            .map(|(s, w)| Complex64::new(s * w, 0.0))
            .collect();
        buf.resize(self.nfft, Complex64::new(0.0, 0.0));
        self.fft.process(&mut buf);
        let power: Array1<f64> = (0..self.nfft / 2 + 1)
            .map(|k| buf[k].norm_sqr())
            .collect();
        let logmel = self
            .mel
            .dot(&power)
            .mapv(|e| e.max(LOG_ENERGY_FLOOR).ln());
        (logmel, log_energy)
    }
}

fn extract_frames(wave: &Waveform, cfg: &FrontendConfig) -> Result<Vec<Vec<f64>>> {
    let flen = cfg.frame_length_samples(wave.sample_rate);
    let shift = cfg.frame_shift_samples(wave.sample_rate);
    if wave.samples.len() < flen {
        return Err(DspError::TooShort {
            samples: wave.samples.len(),
            frame: flen,
        });
    }
    let num = (wave.samples.len() - flen) / shift + 1;
    let mut frames: Vec<Vec<f64>> = (0..num)
        .map(|t| wave.samples[t * shift..t * shift + flen].to_vec())
        .collect();
    if cfg.dither > 0.0 {
        // seeded from the sample bytes so extraction stays a pure function
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for s in &wave.samples {
            for b in s.to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        use rand::Rng;
        for frame in &mut frames {
            for s in frame.iter_mut() {
                let g: f64 = rng.sample(rand_distr_standard_normal());
                *s += cfg.dither * g;
            }
        }
    }
    Ok(frames)
}

// Box-Muller over the uniform stream keeps us off extra distribution deps.
struct StdNormal;
fn rand_distr_standard_normal() -> StdNormal {
    StdNormal
}
impl rand::distributions::Distribution<f64> for StdNormal {
    fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        use std::f64::consts::PI;
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }
}

fn mean_normalize(data: &mut Array2<f64>) {
    let means = data.mean_axis(ndarray::Axis(0)).unwrap();
    for mut row in data.rows_mut() {
        row -= &means;
    }
}

/// Log mel-filterbank energies, one row per frame.
pub fn fbank(wave: &Waveform, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    let frames = extract_frames(wave, cfg)?;
    let pipe = FramePipeline::new(cfg, wave.sample_rate);
    let mut data = Array2::zeros((frames.len(), cfg.num_mel_bins));
    for (t, frame) in frames.into_iter().enumerate() {
        let mut frame = frame;
        let (logmel, _) = pipe.process(&mut frame, cfg.preemphasis);
        data.row_mut(t).assign(&logmel);
    }
    if cfg.mean_normalize {
        mean_normalize(&mut data);
    }
    Ok(FeatureMatrix {
        data,
        kind: FeatureKind::Fbank,
        frame_shift: cfg.frame_shift,
    })
}

/// Orthonormal DCT-II of `x` keeping coefficients 1..=n_keep (c0 dropped).
pub fn dct_ii_truncated(x: &[f64], n_keep: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let b = x.len() as f64;
    let scale = (2.0 / b).sqrt();
    (1..=n_keep)
        .map(|n| {
            scale
                * x.iter()
                    .enumerate()
                    .map(|(m, &v)| v * (PI * n as f64 * (m as f64 + 0.5) / b).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Delta features with the standard +-2 regression window, edges clamped.
pub fn deltas(data: &Array2<f64>) -> Array2<f64> {
    let t_max = data.nrows();
    let norm = 2.0 * (1 + 4) as f64; // 2 * sum(d^2) for d in 1..=2
    let mut out = Array2::zeros(data.raw_dim());
    for t in 0..t_max {
        for d in 1..=2usize {
            let hi = (t + d).min(t_max - 1);
            let lo = t.saturating_sub(d);
            let coeff = d as f64 / norm;
            let diff = &data.row(hi) - &data.row(lo);
            out.row_mut(t).scaled_add(coeff, &diff);
        }
    }
    out
}

/// MFCCs: truncated DCT of the log-mel energies, log energy appended,
/// then delta blocks per `delta_order`.
pub fn mfcc(wave: &Waveform, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    let frames = extract_frames(wave, cfg)?;
    let pipe = FramePipeline::new(cfg, wave.sample_rate);
    let static_dim = cfg.mfcc_ceps + usize::from(cfg.append_energy);
    let mut stat = Array2::zeros((frames.len(), static_dim));
    for (t, frame) in frames.into_iter().enumerate() {
        let mut frame = frame;
        let (logmel, log_energy) = pipe.process(&mut frame, cfg.preemphasis);
        let ceps = dct_ii_truncated(logmel.as_slice().unwrap(), cfg.mfcc_ceps);
        for (j, c) in ceps.iter().enumerate() {
            stat[[t, j]] = *c;
        }
        if cfg.append_energy {
            stat[[t, cfg.mfcc_ceps]] = log_energy;
        }
    }
    let mut blocks = vec![stat];
    for _ in 0..cfg.delta_order {
        let next = deltas(blocks.last().unwrap());
        blocks.push(next);
    }
    let mut data = Array2::zeros((blocks[0].nrows(), static_dim * blocks.len()));
    for (b, block) in blocks.iter().enumerate() {
        data.slice_mut(ndarray::s![.., b * static_dim..(b + 1) * static_dim])
            .assign(block);
    }
    if cfg.mean_normalize {
        mean_normalize(&mut data);
    }
    Ok(FeatureMatrix {
        data,
        kind: FeatureKind::Mfcc,
        frame_shift: cfg.frame_shift,
    })
}

/// Concatenate a context window of `left` past and `right` future frames
/// onto every frame, replicating edge frames where the window runs out.
pub fn splice(f: &FeatureMatrix, left: usize, right: usize) -> FeatureMatrix {
    let t_max = f.num_frames();
    let d = f.dim();
    let width = left + right + 1;
    let mut data = Array2::zeros((t_max, width * d));
    for t in 0..t_max {
        for (slot, off) in (-(left as i64)..=(right as i64)).enumerate() {
            let src = (t as i64 + off).clamp(0, t_max as i64 - 1) as usize;
            data.slice_mut(ndarray::s![t, slot * d..(slot + 1) * d])
                .assign(&f.data.row(src));
        }
    }
    FeatureMatrix {
        data,
        kind: if left == 0 && right == 0 {
            f.kind
        } else {
            FeatureKind::Spliced
        },
        frame_shift: f.frame_shift,
    }
}

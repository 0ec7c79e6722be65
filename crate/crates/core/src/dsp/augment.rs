use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DspError, Result, Waveform};

/// Seeded Gaussian white noise at roughly 0.1 RMS, clamped into [-1, 1].
pub fn white_noise(num_samples: usize, sample_rate: u32, seed: u64) -> Waveform {
    use std::f64::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..num_samples)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
            (0.1 * g).clamp(-1.0, 1.0)
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Mix `noise` into `wave` at the requested signal-to-noise ratio.
///
/// The noise is tiled from a seeded random circular offset when shorter than
/// the signal, scaled so 10*log10(P_signal / P_noise) equals `snr_db` over
/// the whole utterance, and the sum is clipped into [-1, 1].
pub fn add_noise(wave: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    if wave.sample_rate != noise.sample_rate {
        return Err(DspError::SampleRateMismatch(
            wave.sample_rate,
            noise.sample_rate,
        ));
    }
    let p_signal = wave.samples.iter().map(|s| s * s).sum::<f64>() / wave.samples.len().max(1) as f64;
    if p_signal == 0.0 {
        return Err(DspError::ZeroPower("signal"));
    }
    if noise.samples.is_empty() || noise.samples.iter().all(|&s| s == 0.0) {
        return Err(DspError::ZeroPower("noise"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.gen_range(0..noise.samples.len());
    let segment: Vec<f64> = (0..wave.samples.len())
        .map(|i| noise.samples[(offset + i) % noise.samples.len()])
        .collect();
    let p_noise = segment.iter().map(|s| s * s).sum::<f64>() / segment.len() as f64;
    if p_noise == 0.0 {
        return Err(DspError::ZeroPower("noise"));
    }
    // 10*log10(p_signal / (scale^2 * p_noise)) = snr_db
    let scale = (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = wave
        .samples
        .iter()
        .zip(&segment)
        .map(|(s, n)| (s + scale * n).clamp(-1.0, 1.0))
        .collect();
    Ok(Waveform::new(samples, wave.sample_rate))
}

/// Excerpt a contiguous segment of `duration_s` seconds at a seeded-uniform
/// random offset.
pub fn slice_utterance(wave: &Waveform, duration_s: f64, seed: u64) -> Result<Waveform> {
    let want = (duration_s * wave.sample_rate as f64).round() as usize;
    if want > wave.samples.len() {
        return Err(DspError::SliceTooLong {
            requested: want,
            available: wave.samples.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.gen_range(0..=wave.samples.len() - want);
    Ok(Waveform::new(
        wave.samples[offset..offset + want].to_vec(),
        wave.sample_rate,
    ))
}

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DspError, Result, Waveform};

/// Read a RIFF/WAVE file containing 16-bit PCM mono audio.
///
/// Samples are scaled by 1/32768 into [-1, 1).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_wav(&bytes).map_err(|e| DspError::Wav(format!("{}: {e}", path.display())))
}

pub(crate) fn decode_wav(bytes: &[u8]) -> std::result::Result<Waveform, String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut sample_rate = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(format!("chunk {:?} overruns file", String::from_utf8_lossy(id)));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err("fmt chunk too short".into());
                }
                let format = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                if format != 1 {
                    return Err(format!("unsupported format tag {format} (want PCM)"));
                }
                if channels != 1 {
                    return Err(format!("unsupported channel count {channels} (want mono)"));
                }
                if bits != 16 {
                    return Err(format!("unsupported bit depth {bits} (want 16)"));
                }
                if rate == 0 {
                    return Err("zero sample rate".into());
                }
                sample_rate = Some(rate);
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_end + (size & 1);
    }
    let sample_rate = sample_rate.ok_or("missing fmt chunk")?;
    let data = data.ok_or("missing data chunk")?;
    if data.is_empty() {
        return Err("empty data chunk".into());
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate,
    })
}

/// Write 16-bit PCM mono. Samples are clamped to [-1, 1] and rounded.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_wav(wave))?;
    w.flush()?;
    Ok(())
}

pub(crate) fn encode_wav(wave: &Waveform) -> Vec<u8> {
    let data_len = wave.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &wave.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{DspError, FeatureKind, FeatureMatrix, Result};

/// Magic prefix of the feature archive container.
pub const ARCHIVE_MAGIC: &[u8; 5] = b"FEAT1";

#[derive(Debug, Clone)]
pub struct ArchiveRecord {
    pub utt_id: String,
    pub feats: FeatureMatrix,
}

/// Write per-utterance feature records: {id length u32, id bytes, T u32,
/// D u32, kind u8, row-major f32}, everything little-endian.
pub fn write_archive(path: &Path, records: &[ArchiveRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(ARCHIVE_MAGIC)?;
    for rec in records {
        let id = rec.utt_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(rec.feats.num_frames() as u32).to_le_bytes())?;
        w.write_all(&(rec.feats.dim() as u32).to_le_bytes())?;
        w.write_all(&[rec.feats.kind.to_u8()])?;
        for &v in rec.feats.data.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Vec<ArchiveRecord>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(DspError::Archive(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut records = Vec::new();
    loop {
        let mut len_bytes = [0u8; 4];
        match r.read_exact(&mut len_bytes) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let id_len = u32::from_le_bytes(len_bytes) as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let utt_id = String::from_utf8(id)
            .map_err(|_| DspError::Archive("utterance id is not UTF-8".into()))?;
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let t = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let d = u32::from_le_bytes(u32buf) as usize;
        let mut kind_byte = [0u8; 1];
        r.read_exact(&mut kind_byte)?;
        let kind = FeatureKind::from_u8(kind_byte[0])
            .ok_or_else(|| DspError::Archive(format!("unknown feature kind {}", kind_byte[0])))?;
        let mut buf = vec![0u8; t * d * 4];
        r.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        records.push(ArchiveRecord {
            utt_id,
            feats: FeatureMatrix {
                data: Array2::from_shape_vec((t, d), data)
                    .map_err(|e| DspError::Archive(e.to_string()))?,
                kind,
                // the container does not carry timing; callers that need it
                // re-derive it from the front-end config
                frame_shift: 0.010,
            },
        });
    }
    Ok(records)
}

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::param::{ParamRef, ParamRefMut, ParamSet};
use super::{NnError, Result};

/// Magic prefix of the model parameter file format.
pub const MODEL_MAGIC: &[u8; 5] = b"PTNM1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON header stored after the magic: the declarative model spec plus the
/// name/shape of every parameter blob that follows, in file order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamHeader {
    pub spec: serde_json::Value,
    pub params: Vec<TensorMeta>,
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Write `params` with a caller-supplied spec document.
///
/// Blobs are little-endian f32 in visit order; loading them back therefore
/// reproduces the saved model only to single precision, which is also what
/// makes re-serializing a loaded file byte-identical.
pub fn save_params<P: ParamSet + ?Sized>(
    path: &Path,
    spec: serde_json::Value,
    params: &P,
) -> Result<()> {
    let mut metas = Vec::new();
    params.visit(&mut |p: ParamRef| {
        metas.push(TensorMeta {
            name: p.name().to_string(),
            shape: p.shape(),
        });
    });
    let header = ParamHeader {
        spec,
        params: metas,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| NnError::ModelFile(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let mut io_err = None;
    params.visit(&mut |p: ParamRef| {
        if io_err.is_some() {
            return;
        }
        let res = match p {
            ParamRef::Mat(m) => write_blob(&mut w, m.value.iter().copied()),
            ParamRef::Vec(v) => write_blob(&mut w, v.value.iter().copied()),
        };
        if let Err(e) = res {
            io_err = Some(e);
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

fn write_blob<W: Write>(w: &mut W, vals: impl Iterator<Item = f64>) -> std::io::Result<()> {
    for v in vals {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Read a model file back into its header and raw tensors.
pub fn load_params(path: &Path) -> Result<(ParamHeader, Vec<NamedTensor>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(NnError::ModelFile(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: ParamHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| NnError::ModelFile(e.to_string()))?;

    let mut tensors = Vec::with_capacity(header.params.len());
    for meta in &header.params {
        let n: usize = meta.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push(NamedTensor {
            name: meta.name.clone(),
            shape: meta.shape.clone(),
            data,
        });
    }
    Ok((header, tensors))
}

/// Copy loaded tensors into an existing parameter set, matched by name.
///
/// Every parameter of `params` must be present with a matching shape.
pub fn load_into<P: ParamSet + ?Sized>(params: &mut P, tensors: &[NamedTensor]) -> Result<()> {
    let mut err = None;
    params.visit_mut(&mut |p: ParamRefMut| {
        if err.is_some() {
            return;
        }
        let (name, shape) = match &p {
            ParamRefMut::Mat(m) => (m.name.clone(), m.value.shape().to_vec()),
            ParamRefMut::Vec(v) => (v.name.clone(), v.value.shape().to_vec()),
        };
        let Some(t) = tensors.iter().find(|t| t.name == name) else {
            err = Some(NnError::ModelFile(format!("missing tensor {name}")));
            return;
        };
        if t.shape != shape {
            err = Some(NnError::ModelFile(format!(
                "tensor {name}: file shape {:?} vs model shape {:?}",
                t.shape, shape
            )));
            return;
        }
        match p {
            ParamRefMut::Mat(m) => {
                for (dst, src) in m.value.iter_mut().zip(&t.data) {
                    *dst = *src;
                }
            }
            ParamRefMut::Vec(v) => {
                for (dst, src) in v.value.iter_mut().zip(&t.data) {
                    *dst = *src;
                }
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub use load_into as load_params_into;

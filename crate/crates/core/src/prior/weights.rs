//! Weight file: `"IPPW1"`, u16 version, u16 tensor count, then per tensor a
//! u8 name length, the name, a u8 rank, u32 dimensions and the f32 payload.
//! Integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::prior::cnn::CnnParams;

const MAGIC: &[u8; 5] = b"IPPW1";
const VERSION: u16 = 1;
const FLOOR_TENSOR: &str = "alpha_floor";

pub fn encode_params(kappa: &CnnParams<f32>) -> Vec<u8> {
    let tensors = kappa.tensors();
    let mut out = Vec::with_capacity(kappa.parameter_count() * 4 + 512);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&((tensors.len() + 1) as u16).to_le_bytes());
    let floor = [kappa.alpha_floor as f32];
    let entries = tensors
        .iter()
        .map(|t| (t.name, t.dims.clone(), t.values))
        .chain(std::iter::once((FLOOR_TENSOR, vec![1], &floor[..])));
    for (name, dims, values) in entries {
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_params(kappa: &CnnParams<f32>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_params(kappa))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("weight file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse a weight file. With `n_actions` set, a file for a different action
/// count is a shape error.
pub fn decode_params(bytes: &[u8], n_actions: Option<usize>) -> Result<CnnParams<f32>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported weight file version {version}")));
    }
    let count = c.u16()? as usize;
    let mut raw = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u8()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = c.u8()? as usize;
        let dims = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let values: Vec<f32> = c
            .take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        raw.push((name, dims, values));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }

    let find = |name: &str| {
        raw.iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Format(format!("weight file lacks tensor `{name}`")))
    };
    let file_actions = find("out.b")?.1.first().copied().unwrap_or(0);
    if let Some(want) = n_actions {
        if want != file_actions {
            return Err(Error::Shape(format!(
                "weight file is for {file_actions} actions, expected {want}"
            )));
        }
    }
    let floor = find(FLOOR_TENSOR)?.2.first().copied().unwrap_or(0.0) as f64;
    let mut kappa = CnnParams::<f32>::zeros(file_actions, floor);
    let expected: Vec<(&'static str, Vec<usize>)> =
        kappa.tensors().into_iter().map(|t| (t.name, t.dims)).collect();
    if count != expected.len() + 1 {
        return Err(Error::Format(format!(
            "weight file has {count} tensors, expected {}",
            expected.len() + 1
        )));
    }
    for ((name, dims), slot) in expected.into_iter().zip(kappa.tensors_mut()) {
        let (_, got_dims, values) = find(name)?;
        if *got_dims != dims {
            return Err(Error::Shape(format!(
                "tensor `{name}` has dims {got_dims:?}, expected {dims:?}"
            )));
        }
        slot.copy_from_slice(values);
    }
    if !kappa.is_finite() {
        return Err(Error::Format("weight file contains non-finite values".into()));
    }
    Ok(kappa)
}

pub fn load_params(path: &Path, n_actions: Option<usize>) -> Result<CnnParams<f32>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            what: "prior weight file".into(),
            path: path.to_path_buf(),
        },
        _ => e.into(),
    })?;
    decode_params(&bytes, n_actions)
}

//! Binary tensor serialization.
//!
//! Record layout (little-endian): magic `"T4F1"`, four u32 dims (n, c, h, w),
//! then n*c*h*w raw f32 values row-major. In-memory values are f64, so a
//! round trip narrows to f32 precision.
//!
//! A checkpoint is a name index followed by concatenated T4F1 records:
//! magic `"FNCK"`, u32 entry count, then per entry a u32 name length, the
//! UTF-8 name bytes, and the tensor record.

use std::io::{Read, Write};

use super::{Result, Shape4, Tensor4, TensorError};

pub const TENSOR_MAGIC: &[u8; 4] = b"T4F1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FNCK";

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Io(e.to_string())
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor4) -> Result<()> {
    w.write_all(TENSOR_MAGIC).map_err(io_err)?;
    let s = t.shape();
    for dim in [s.n, s.c, s.h, s.w] {
        let d = u32::try_from(dim)
            .map_err(|_| TensorError::Io(format!("dim {} exceeds u32", dim)))?;
        w.write_all(&d.to_le_bytes()).map_err(io_err)?;
    }
    let mut buf = Vec::with_capacity(t.data().len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor4> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != TENSOR_MAGIC {
        return Err(TensorError::Io(format!(
            "bad tensor magic {:?}, expected {:?}",
            magic, TENSOR_MAGIC
        )));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io_err)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
    let mut bytes = vec![0u8; shape.len() * 4];
    r.read_exact(&mut bytes).map_err(io_err)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor4::from_vec(shape, data)
}

pub fn write_named_tensors<W: Write>(w: &mut W, entries: &[(&str, &Tensor4)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    let count = u32::try_from(entries.len())
        .map_err(|_| TensorError::Io("too many checkpoint entries".into()))?;
    w.write_all(&count.to_le_bytes()).map_err(io_err)?;
    for (name, t) in entries {
        let len = u32::try_from(name.len())
            .map_err(|_| TensorError::Io("name too long".into()))?;
        w.write_all(&len.to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_named_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor4)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Io(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let mut cb = [0u8; 4];
    r.read_exact(&mut cb).map_err(io_err)?;
    let count = u32::from_le_bytes(cb) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut lb = [0u8; 4];
        r.read_exact(&mut lb).map_err(io_err)?;
        let len = u32::from_le_bytes(lb) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|e| TensorError::Io(format!("bad name encoding: {}", e)))?;
        let t = read_tensor(r)?;
        entries.push((name, t));
    }
    Ok(entries)
}

//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CMGCKPT\0"
//! version    u32
//! cfg_hash   u64
//! count      u32
//! per parameter:
//!   name_len u32, name utf-8
//!   frozen   u8
//!   ndim     u32, dims u64 × ndim
//!   values   f64 × prod(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Parameter, Tensor, TensorError};

const MAGIC: &[u8; 8] = b"CMGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_hash: u64,
}

pub fn write_checkpoint(
    mut out: impl Write,
    store: &ParamStore,
    config_hash: u64,
) -> Result<(), TensorError> {
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&config_hash.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[u8::from(p.frozen)])?;
        out.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.len() * 8);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], TensorError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| TensorError::Checkpoint(format!("truncated: {e}")))?;
    Ok(b)
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(ParamStore, CheckpointHeader), TensorError> {
    let magic: [u8; 8] = read_array(&mut r)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let config_hash = u64::from_le_bytes(read_array(&mut r)?);
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        if len > 4096 {
            return Err(TensorError::Checkpoint(format!(
                "name length {len} too large"
            )));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| TensorError::Checkpoint(format!("truncated: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Checkpoint("name is not utf-8".into()))?;
        let frozen = match read_array::<1>(&mut r)?[0] {
            0 => false,
            1 => true,
            b => return Err(TensorError::Checkpoint(format!("bad frozen flag {b}"))),
        };
        let ndim = u32::from_le_bytes(read_array(&mut r)?) as usize;
        if ndim > 8 {
            return Err(TensorError::Checkpoint(format!(
                "{name}: {ndim} dimensions"
            )));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(TensorError::Checkpoint(format!("{name}: tensor too large")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        let value = Tensor::new(shape, data)?;
        store.push_loaded(Parameter {
            grad: Tensor::zeros(value.shape()),
            name,
            value,
            frozen,
        })?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(TensorError::Checkpoint("trailing bytes".into()));
    }
    Ok((
        store,
        CheckpointHeader {
            version,
            config_hash,
        },
    ))
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    config_hash: u64,
) -> Result<(), TensorError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, store, config_hash)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointHeader), TensorError> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

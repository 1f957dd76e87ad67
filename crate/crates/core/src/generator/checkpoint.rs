//! Binary parameter checkpoints.
//!
//! ```text
//! magic        8 bytes  "TTAGCKPT"
//! version      u32 LE
//! fingerprint  u32 LE length + UTF-8 bytes
//! count        u32 LE
//! per tensor:  u32 name length + UTF-8 name,
//!              u32 rank, rank x u32 dims,
//!              prod(dims) x f32 LE values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::{Architecture, GeneratorParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TTAGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME: u32 = 4096;

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if len > MAX_NAME {
        return Err(Error::Checkpoint(format!("string length {len} too large")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated or unreadable checkpoint: {e}"))
}

/// Serializes parameters into the checkpoint container.
pub fn encode(params: &GeneratorParams, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    write_str(w, &params.arch.fingerprint())?;
    w.write_u32::<LittleEndian>(params.tensors.len() as u32)?;
    for t in &params.tensors {
        write_str(w, &t.name)?;
        w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
        for &d in &t.shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in &t.data {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

/// Parses a checkpoint; when `expected` is given the stored fingerprint must match it.
pub fn decode(r: &mut impl Read, expected: Option<&Architecture>) -> Result<GeneratorParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a generator checkpoint (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let fingerprint = read_str(r)?;
    if let Some(arch) = expected {
        if arch.fingerprint() != fingerprint {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint has '{fingerprint}', expected '{}'",
                arch.fingerprint()
            )));
        }
    }
    let arch = Architecture::from_fingerprint(&fingerprint)?;
    let mut params = GeneratorParams::init(arch, 0)?;
    let count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if count != params.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, architecture has {}",
            params.tensors.len()
        )));
    }
    for t in params.tensors.iter_mut() {
        let name = read_str(r)?;
        if name != t.name {
            return Err(Error::Checkpoint(format!("expected tensor '{}', found '{name}'", t.name)));
        }
        let rank = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize).map_err(truncated))
            .collect::<Result<Vec<_>>>()?;
        if shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {shape:?}, expected {:?}",
                t.shape
            )));
        }
        r.read_f32_into::<LittleEndian>(&mut t.data).map_err(truncated)?;
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor '{name}' holds non-finite values")));
        }
    }
    Ok(params)
}

pub fn save_checkpoint(params: &GeneratorParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(params, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&Architecture>) -> Result<GeneratorParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode(&mut BufReader::new(file), expected)
}

/// SHA-256 of the encoded checkpoint, hex encoded.
pub fn params_digest(params: &GeneratorParams) -> String {
    let mut buf = Vec::new();
    encode(params, &mut buf).expect("in-memory write");
    Sha256::digest(&buf).iter().map(|b| format!("{b:02x}")).collect()
}

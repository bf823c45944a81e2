//! Model checkpoint file: magic "DDCKPT1\0", format version, length-prefixed
//! JSON header (spec, provenance, dtype, named buffer manifest), then the raw
//! little-endian parameter buffers followed by the BN running buffers, both
//! in enumeration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ddistill_core::nn::{Architecture, CheckpointMeta, ModelCheckpoint, ModelSpec, Network};
use ddistill_core::Scalar;

use crate::error::{Result, ToolError};

const MAGIC: &[u8; 8] = b"DDCKPT1\0";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BufferEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    meta: CheckpointMeta,
    dtype: String,
    params: Vec<BufferEntry>,
    buffers: Vec<BufferEntry>,
}

fn write_raw<T: Scalar>(out: &mut impl Write, data: &[T]) -> Result<()> {
    let mut bytes = vec![0u8; data.len() * T::BYTE_WIDTH];
    for (v, chunk) in data.iter().zip(bytes.chunks_exact_mut(T::BYTE_WIDTH)) {
        v.write_le(chunk);
    }
    out.write_all(&bytes)?;
    Ok(())
}

fn read_raw<T: Scalar>(src: &mut impl Read, count: usize, what: &str) -> Result<Vec<T>> {
    let mut bytes = vec![0u8; count * T::BYTE_WIDTH];
    src.read_exact(&mut bytes)
        .map_err(|e| ToolError::runtime(format!("truncated {what}: {e}")))?;
    Ok(bytes.chunks_exact(T::BYTE_WIDTH).map(T::read_le).collect())
}

/// Serialize a model plus provenance to `path`.
pub fn save_checkpoint<T: Scalar>(path: &Path, net: &Network<T>, meta: CheckpointMeta) -> Result<()> {
    let header = Header {
        spec: *net.spec(),
        meta,
        dtype: T::DTYPE.to_string(),
        params: net
            .named_params()
            .iter()
            .map(|(name, t)| BufferEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
        buffers: net
            .named_buffers()
            .iter()
            .map(|(name, t)| BufferEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(json.len() as u32).to_le_bytes())?;
    f.write_all(&json)?;
    for (_, t) in net.named_params() {
        write_raw(&mut f, &t.to_vec())?;
    }
    for (_, t) in net.named_buffers() {
        write_raw(&mut f, &t.to_vec())?;
    }
    f.flush()?;
    Ok(())
}

/// Load a checkpoint; the stored dtype must match `T` exactly.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelCheckpoint<T>> {
    let mut f = BufReader::new(File::open(path).map_err(|e| {
        ToolError::validation(format!("{}: {e}", path.display()))
    })?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|e| ToolError::validation(format!("{}: truncated header: {e}", path.display())))?;
    if &magic != MAGIC {
        return Err(ToolError::validation(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(ToolError::validation(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    f.read_exact(&mut word)?;
    let json_len = u32::from_le_bytes(word) as usize;
    let mut json = vec![0u8; json_len];
    f.read_exact(&mut json)
        .map_err(|e| ToolError::validation(format!("{}: truncated header: {e}", path.display())))?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| ToolError::validation(format!("{}: bad header json: {e}", path.display())))?;
    if header.dtype != T::DTYPE {
        return Err(ToolError::validation(format!(
            "{}: stored dtype {} but this run uses {}",
            path.display(),
            header.dtype,
            T::DTYPE
        )));
    }
    let mut params = Vec::with_capacity(header.params.len());
    for e in &header.params {
        params.push(read_raw(&mut f, e.shape.iter().product(), &e.name)?);
    }
    let mut running = Vec::with_capacity(header.buffers.len());
    for e in &header.buffers {
        running.push(read_raw(&mut f, e.shape.iter().product(), &e.name)?);
    }
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(ToolError::validation(format!(
            "{}: trailing bytes after declared buffers",
            path.display()
        )));
    }
    Ok(ModelCheckpoint { spec: header.spec, meta: header.meta, params, running })
}

/// Load and instantiate, requiring a specific architecture.
pub fn load_network_as<T: Scalar>(
    path: &Path,
    expect: Architecture,
    trainable: bool,
) -> Result<(Network<T>, CheckpointMeta)> {
    let ckpt = load_checkpoint::<T>(path)?;
    if ckpt.spec.arch != expect {
        return Err(ToolError::validation(format!(
            "{}: checkpoint holds {} but {} was requested",
            path.display(),
            ckpt.spec.arch.name(),
            expect.name()
        )));
    }
    let meta = ckpt.meta.clone();
    let net = Network::from_checkpoint(&ckpt, trainable)
        .map_err(|e| ToolError::validation(format!("{}: {e}", path.display())))?;
    Ok((net, meta))
}

/// Load and instantiate whatever architecture the file declares.
pub fn load_network<T: Scalar>(path: &Path, trainable: bool) -> Result<(Network<T>, CheckpointMeta)> {
    let ckpt = load_checkpoint::<T>(path)?;
    let meta = ckpt.meta.clone();
    let net = Network::from_checkpoint(&ckpt, trainable)
        .map_err(|e| ToolError::validation(format!("{}: {e}", path.display())))?;
    Ok((net, meta))
}

/// Short content fingerprint of any artifact file.
pub fn fingerprint(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut f, &mut hasher)?;
    let digest = hasher.finalize();
    Ok(hex_prefix(&digest, 16))
}

pub fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        use std::fmt::Write;
        write!(s, "{b:02x}").expect("infallible");
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

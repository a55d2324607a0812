//! Versioned parameter checkpoints.
//!
//! Layout: magic `CADW`, `u32` version, then named blocks until end of file.
//! A block is `u32` name length, UTF-8 name, `u32` rank, `rank` × `u32`
//! dims, and the values as little-endian `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use compad_core::model::ModelParams;
use compad_core::scene_graph::AggMode;
use compad_core::Tensor;

pub const MAGIC: &[u8; 4] = b"CADW";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint magic {0:?} at byte 0, expected \"CADW\"")]
    Magic(Vec<u8>),
    #[error("unsupported checkpoint version {0} at byte 4, expected {VERSION}")]
    Version(u32),
    #[error("checkpoint truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("parameter name at byte {0} is not UTF-8")]
    Name(usize),
    #[error("parameter {name:?}: {source}")]
    Shape {
        name: String,
        #[source]
        source: compad_core::Error,
    },
    #[error("invalid parameter set: {0}")]
    Params(#[from] compad_core::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

pub fn encode<'a>(blocks: impl IntoIterator<Item = (String, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { offset: self.pos, what });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn u32_of(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::Magic(bytes[..bytes.len().min(4)].to_vec()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = u32_of(r.take(4, "version")?);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut blocks = Vec::new();
    while r.pos < bytes.len() {
        let len = u32_of(r.take(4, "name length")?) as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Name(name_at))?
            .to_string();
        let rank = u32_of(r.take(4, "rank")?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_of(r.take(4, "dims")?) as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.take(8 * n, "values")?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|source| CheckpointError::Shape {
            name: name.clone(),
            source,
        })?;
        blocks.push((name, t));
    }
    Ok(blocks)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let bytes = encode(params.named());
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
    }
    // Write-then-rename keeps the previous checkpoint intact on failure.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|source| CheckpointError::Io {
        path: tmp.clone(),
        source,
    })?;
    fs::rename(&tmp, path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path, agg_mode: AggMode) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(ModelParams::from_named(decode(&bytes)?, agg_mode)?)
}

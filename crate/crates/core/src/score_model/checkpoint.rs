//! Versioned checkpoint: `b"CSCKPT01"`, u32 version, architecture config,
//! σ, step and epoch counters, then the flat parameter vector as f64 (LE).

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::layers::Real;
use super::{ScoreModel, ScoreModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CSCKPT01";
const VERSION: u32 = 1;

/// A model snapshot plus the epoch it was written at.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real = f32> {
    pub model: ScoreModel<T>,
    pub epoch: u64,
}

pub fn write_checkpoint_to<T: Real, W: Write>(model: &ScoreModel<T>, epoch: u64, out: &mut W) -> Result<()> {
    let c = &model.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(VERSION).unwrap();
    buf.write_u64::<LittleEndian>(c.base_width as u64).unwrap();
    buf.write_u64::<LittleEndian>(c.channel_multipliers.len() as u64).unwrap();
    for &m in &c.channel_multipliers {
        buf.write_u64::<LittleEndian>(m as u64).unwrap();
    }
    buf.write_u64::<LittleEndian>(c.in_channels as u64).unwrap();
    buf.write_u64::<LittleEndian>(c.patch_size as u64).unwrap();
    buf.write_f64::<LittleEndian>(c.encode_level).unwrap();
    buf.write_f64::<LittleEndian>(model.sigma).unwrap();
    buf.write_u64::<LittleEndian>(model.step).unwrap();
    buf.write_u64::<LittleEndian>(epoch).unwrap();
    buf.write_u64::<LittleEndian>(model.params.len() as u64).unwrap();
    for v in &model.params {
        buf.write_f64::<LittleEndian>(v.to_f64().expect("finite")).unwrap();
    }
    out.write_all(&buf).map_err(|e| Error::io("<writer>", e))
}

/// Writes to a temporary sibling and renames, so readers never see a partial file.
pub fn save_checkpoint<T: Real>(model: &ScoreModel<T>, epoch: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint_to(model, epoch, &mut buf)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint_from<T: Real, R: Read>(mut r: R) -> Result<Checkpoint<T>> {
    let bad = |d: String| Error::Checkpoint(d);
    let eof = |e: std::io::Error| Error::Checkpoint(format!("unexpected end of file ({e})"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let base_width = r.read_u64::<LittleEndian>().map_err(eof)? as usize;
    let n_mult = r.read_u64::<LittleEndian>().map_err(eof)? as usize;
    if n_mult > 16 {
        return Err(bad(format!("implausible level count {n_mult}")));
    }
    let mut channel_multipliers = Vec::with_capacity(n_mult);
    for _ in 0..n_mult {
        channel_multipliers.push(r.read_u64::<LittleEndian>().map_err(eof)? as usize);
    }
    let in_channels = r.read_u64::<LittleEndian>().map_err(eof)? as usize;
    let patch_size = r.read_u64::<LittleEndian>().map_err(eof)? as usize;
    let encode_level = r.read_f64::<LittleEndian>().map_err(eof)?;
    let sigma = r.read_f64::<LittleEndian>().map_err(eof)?;
    let step = r.read_u64::<LittleEndian>().map_err(eof)?;
    let epoch = r.read_u64::<LittleEndian>().map_err(eof)?;
    let n = r.read_u64::<LittleEndian>().map_err(eof)? as usize;
    let config = ScoreModelConfig {
        base_width,
        channel_multipliers,
        in_channels,
        patch_size,
        encode_level,
    };
    config.validate().map_err(|e| bad(format!("invalid architecture: {e}")))?;
    let expected = super::Arch::new(&config).n_params;
    if n != expected {
        return Err(bad(format!("parameter count {n} does not match architecture ({expected})")));
    }
    let mut raw = vec![0.0f64; n];
    r.read_f64_into::<LittleEndian>(&mut raw).map_err(eof)?;
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameters".into()));
    }
    let params = raw.into_iter().map(T::from_f64_lossy).collect();
    Ok(Checkpoint {
        model: ScoreModel::from_parts(config, sigma, step, params)?,
        epoch,
    })
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint_from(Cursor::new(bytes))
}

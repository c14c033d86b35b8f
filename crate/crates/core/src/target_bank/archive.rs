//! Single-file bank archive.
//!
//! Layout (little-endian):
//! `b"TGBANK01"`, u32 version, u64 m, q, r, rows, cols, n_views,
//! f64 sigma², tau, cutoff, u8 center-per-match flag,
//! f64 center[rows·cols], f64 features[m·q] (row per target),
//! f64 basis[q·r] (column-major), u64 byte length + MRC stack of the
//! uncentered projections.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use ndarray::{s, Array2};

use super::TargetBank;
use crate::error::{Error, Result};
use crate::mrc_io::{read_mrc_from, write_mrc_to, MrcData, Volume};

const MAGIC: &[u8; 8] = b"TGBANK01";
const VERSION: u32 = 1;

pub fn write_bank(bank: &TargetBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_bank_to(bank, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_bank_to<W: Write>(bank: &TargetBank, out: &mut W) -> Result<()> {
    let (rows, cols) = bank.patch_dim();
    let m = bank.len();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(VERSION).unwrap();
    for v in [m, bank.feature_dim(), bank.rank(), rows, cols, bank.n_views] {
        buf.write_u64::<LittleEndian>(v as u64).unwrap();
    }
    for v in [bank.sigma2_surrogate, bank.temperature, bank.lowpass_cutoff] {
        buf.write_f64::<LittleEndian>(v).unwrap();
    }
    buf.write_u8(bank.center_per_match as u8).unwrap();
    for v in bank.center.iter() {
        buf.write_f64::<LittleEndian>(*v).unwrap();
    }
    for f in &bank.features {
        for v in f {
            buf.write_f64::<LittleEndian>(*v).unwrap();
        }
    }
    for v in bank.basis.iter() {
        buf.write_f64::<LittleEndian>(*v).unwrap();
    }
    let mut stack = ndarray::Array3::<f64>::zeros((m, rows, cols));
    for j in 0..m {
        stack.slice_mut(s![j, .., ..]).assign(&bank.raw_projection(j));
    }
    let mut mrc = Vec::new();
    write_mrc_to(
        &MrcData::Volume(Volume {
            data: stack,
            voxel_size_angstrom: 1.0,
        }),
        &mut mrc,
    )?;
    buf.write_u64::<LittleEndian>(mrc.len() as u64).unwrap();
    buf.extend_from_slice(&mrc);
    out.write_all(&buf).map_err(|e| Error::io("<writer>", e))
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<TargetBank> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_bank_from(Cursor::new(bytes))
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Format {
        field: "bank archive",
        detail: detail.into(),
    }
}

pub fn read_bank_from<R: Read>(mut r: R) -> Result<TargetBank> {
    let eof = |e: std::io::Error| corrupt(format!("unexpected end of archive ({e})"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.read_u64::<LittleEndian>().map_err(eof)? as usize;
    }
    let [m, q, rank, rows, cols, n_views] = dims;
    if m == 0 || q == 0 || rank == 0 || rank > q || rows == 0 || cols == 0 {
        return Err(corrupt(format!("invalid sizes m={m} q={q} r={rank} {rows}x{cols}")));
    }
    let sigma2 = r.read_f64::<LittleEndian>().map_err(eof)?;
    let temperature = r.read_f64::<LittleEndian>().map_err(eof)?;
    let cutoff = r.read_f64::<LittleEndian>().map_err(eof)?;
    let center_per_match = r.read_u8().map_err(eof)? != 0;
    let mut read_vec = |n: usize| -> Result<Vec<f64>> {
        let mut v = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut v).map_err(eof)?;
        Ok(v)
    };
    let center = Array2::from_shape_vec((rows, cols), read_vec(rows * cols)?).expect("sized");
    let flat = read_vec(m * q)?;
    let features: Vec<Vec<f64>> = flat.chunks(q).map(|c| c.to_vec()).collect();
    let basis = DMatrix::from_column_slice(q, rank, &read_vec(q * rank)?);
    let len = r.read_u64::<LittleEndian>().map_err(eof)? as usize;
    let mut mrc = vec![0u8; len];
    r.read_exact(&mut mrc).map_err(eof)?;
    let stack = read_mrc_from(Cursor::new(mrc))?.into_volume();
    if stack.data.dim() != (m, rows, cols) {
        return Err(corrupt(format!("projection stack is {:?}", stack.data.dim())));
    }
    let projections = (0..m)
        .map(|j| &stack.data.slice(s![j, .., ..]) - &center)
        .collect();
    Ok(TargetBank {
        projections,
        features,
        basis,
        sigma2_surrogate: sigma2,
        center,
        lowpass_cutoff: cutoff,
        n_views,
        temperature,
        center_per_match,
    })
}

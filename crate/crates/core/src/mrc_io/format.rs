//! MRC2014 reader/writer.
//!
//! Header words are 4 bytes each; the byte order is taken from the machine
//! stamp at byte 212. Modes 0 (int8), 1 (int16) and 2 (float32) are read;
//! output is always little-endian mode 2.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder as _, LittleEndian, WriteBytesExt};
use ndarray::{Array2, Array3};

use super::{Micrograph, MrcData, Volume};
use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 1024;

const LABEL_LEN: usize = 80;
const N_LABELS: usize = 10;
const STAMP_LE: [u8; 4] = [0x44, 0x44, 0x00, 0x00];
const STAMP_LE_ALT: [u8; 4] = [0x44, 0x41, 0x00, 0x00];
const STAMP_BE: [u8; 4] = [0x11, 0x11, 0x00, 0x00];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

/// The subset of the MRC2014 header this crate interprets.
#[derive(Debug, Clone, PartialEq)]
pub struct MrcHeader {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub mode: i32,
    pub mx: i32,
    pub my: i32,
    pub mz: i32,
    pub cell: [f32; 3],
    pub dmin: f32,
    pub dmax: f32,
    pub dmean: f32,
    pub rms: f32,
    pub ext_header_len: usize,
    pub origin: [f32; 3],
    pub byte_order: ByteOrder,
    pub labels: Vec<String>,
}

impl MrcHeader {
    fn bytes_per_value(&self) -> usize {
        match self.mode {
            0 => 1,
            1 => 2,
            _ => 4,
        }
    }

    pub fn data_len(&self) -> u64 {
        (self.nx * self.ny * self.nz * self.bytes_per_value()) as u64
    }

    pub fn pixel_size(&self) -> f64 {
        if self.mx > 0 && self.cell[0] > 0.0 {
            self.cell[0] as f64 / self.mx as f64
        } else {
            1.0
        }
    }

    fn parse(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_LEN {
            return Err(Error::Format {
                field: "header",
                detail: format!("file has {} bytes, header needs {HEADER_LEN}", buf.len()),
            });
        }
        let stamp = [buf[212], buf[213], buf[214], buf[215]];
        let byte_order = match stamp {
            s if s == STAMP_LE || s == STAMP_LE_ALT => ByteOrder::Little,
            s if s == STAMP_BE => ByteOrder::Big,
            // Older writers leave the stamp empty; pick the order that gives a sane mode.
            _ => {
                let le = LittleEndian::read_i32(&buf[12..16]);
                if (0..=16).contains(&le) {
                    ByteOrder::Little
                } else {
                    ByteOrder::Big
                }
            }
        };
        let word_i = |i: usize| -> i32 {
            let b = &buf[4 * i..4 * i + 4];
            match byte_order {
                ByteOrder::Little => LittleEndian::read_i32(b),
                ByteOrder::Big => BigEndian::read_i32(b),
            }
        };
        let word_f = |i: usize| -> f32 {
            let b = &buf[4 * i..4 * i + 4];
            match byte_order {
                ByteOrder::Little => LittleEndian::read_f32(b),
                ByteOrder::Big => BigEndian::read_f32(b),
            }
        };

        let dim = |i: usize, field: &'static str| -> Result<usize> {
            let v = word_i(i);
            if v < 1 {
                return Err(Error::Format {
                    field,
                    detail: format!("must be >= 1, found {v}"),
                });
            }
            Ok(v as usize)
        };
        let nx = dim(0, "NX")?;
        let ny = dim(1, "NY")?;
        let nz = dim(2, "NZ")?;
        let mode = word_i(3);
        if !(0..=2).contains(&mode) {
            return Err(Error::UnsupportedMode(mode));
        }
        let nsymbt = word_i(23);
        if nsymbt < 0 {
            return Err(Error::Format {
                field: "NSYMBT",
                detail: format!("negative extended header length {nsymbt}"),
            });
        }
        let nlabl = word_i(55).clamp(0, N_LABELS as i32) as usize;
        let labels = (0..nlabl)
            .map(|k| {
                let start = 224 + k * LABEL_LEN;
                String::from_utf8_lossy(&buf[start..start + LABEL_LEN])
                    .trim_end_matches(['\0', ' '])
                    .to_string()
            })
            .collect();

        Ok(MrcHeader {
            nx,
            ny,
            nz,
            mode,
            mx: word_i(7),
            my: word_i(8),
            mz: word_i(9),
            cell: [word_f(10), word_f(11), word_f(12)],
            dmin: word_f(19),
            dmax: word_f(20),
            dmean: word_f(21),
            rms: word_f(54),
            ext_header_len: nsymbt as usize,
            origin: [word_f(49), word_f(50), word_f(51)],
            byte_order,
            labels,
        })
    }
}

/// Reads an MRC2014 file. One section yields a [`Micrograph`], more a [`Volume`].
pub fn read_mrc(path: impl AsRef<Path>) -> Result<MrcData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn read_mrc_from<R: Read>(mut reader: R) -> Result<MrcData> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<reader>", e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<MrcData> {
    let header = MrcHeader::parse(bytes)?;
    let start = HEADER_LEN + header.ext_header_len;
    let expected = header.data_len();
    let available = bytes.len().saturating_sub(start) as u64;
    if available < expected {
        return Err(Error::Truncated {
            expected,
            actual: available,
        });
    }
    let raw = &bytes[start..start + expected as usize];
    let n = header.nx * header.ny * header.nz;
    let mut values = Vec::with_capacity(n);
    match (header.mode, header.byte_order) {
        (0, _) => values.extend(raw.iter().map(|&b| b as i8 as f64)),
        (1, ByteOrder::Little) => {
            values.extend(raw.chunks_exact(2).map(|c| LittleEndian::read_i16(c) as f64))
        }
        (1, ByteOrder::Big) => {
            values.extend(raw.chunks_exact(2).map(|c| BigEndian::read_i16(c) as f64))
        }
        (_, ByteOrder::Little) => {
            values.extend(raw.chunks_exact(4).map(|c| LittleEndian::read_f32(c) as f64))
        }
        (_, ByteOrder::Big) => {
            values.extend(raw.chunks_exact(4).map(|c| BigEndian::read_f32(c) as f64))
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format {
            field: "data",
            detail: "non-finite values in data section".into(),
        });
    }
    let pixel = header.pixel_size();
    if header.nz == 1 {
        let data = Array2::from_shape_vec((header.ny, header.nx), values).expect("sized above");
        Ok(MrcData::Micrograph(Micrograph {
            data,
            pixel_size_angstrom: pixel,
            origin: (header.origin[0] as f64, header.origin[1] as f64),
            provenance: header.labels.join("\n"),
        }))
    } else {
        let data = Array3::from_shape_vec((header.nz, header.ny, header.nx), values)
            .expect("sized above");
        Ok(MrcData::Volume(Volume {
            data,
            voxel_size_angstrom: pixel,
        }))
    }
}

/// Writes `obj` as little-endian MRC2014 mode 2.
pub fn write_mrc(obj: &MrcData, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_mrc_to(obj, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_micrograph(m: &Micrograph, path: impl AsRef<Path>) -> Result<()> {
    write_mrc(&MrcData::Micrograph(m.clone()), path)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_mrc(&MrcData::Volume(v.clone()), path)
}

pub fn write_mrc_to<W: Write>(obj: &MrcData, out: &mut W) -> Result<()> {
    let (dims, values, pixel, origin, label): ((usize, usize, usize), Vec<f64>, f64, (f64, f64), &str) =
        match obj {
            MrcData::Micrograph(m) => {
                let (h, w) = m.data.dim();
                (
                    (w, h, 1),
                    m.data.iter().copied().collect(),
                    m.pixel_size_angstrom,
                    m.origin,
                    m.provenance.as_str(),
                )
            }
            MrcData::Volume(v) => {
                let (d, h, w) = v.data.dim();
                (
                    (w, h, d),
                    v.data.iter().copied().collect(),
                    v.voxel_size_angstrom,
                    (0.0, 0.0),
                    "",
                )
            }
        };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("cannot write non-finite data".into()));
    }
    let data: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    let header = encode_header(dims, &data, pixel, origin, label);
    let io = |e| Error::io("<writer>", e);
    out.write_all(&header).map_err(io)?;
    let mut body = Vec::with_capacity(data.len() * 4);
    for v in &data {
        body.write_f32::<LittleEndian>(*v).expect("vec write");
    }
    out.write_all(&body).map_err(io)
}

fn encode_header(
    (nx, ny, nz): (usize, usize, usize),
    data: &[f32],
    pixel: f64,
    origin: (f64, f64),
    label: &str,
) -> Vec<u8> {
    let n = data.len().max(1) as f64;
    let (mut dmin, mut dmax, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &v in data {
        let v = v as f64;
        dmin = dmin.min(v);
        dmax = dmax.max(v);
        sum += v;
    }
    let mean = sum / n;
    let rms = (data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();

    let mut h = vec![0u8; HEADER_LEN];
    let mut put_i = |word: usize, v: i32| LittleEndian::write_i32(&mut h[4 * word..4 * word + 4], v);
    put_i(0, nx as i32);
    put_i(1, ny as i32);
    put_i(2, nz as i32);
    put_i(3, 2);
    put_i(7, nx as i32);
    put_i(8, ny as i32);
    put_i(9, nz as i32);
    put_i(16, 1);
    put_i(17, 2);
    put_i(18, 3);
    put_i(22, if nz > 1 { 1 } else { 0 });
    put_i(27, 20140);
    let mut put_f = |word: usize, v: f64| LittleEndian::write_f32(&mut h[4 * word..4 * word + 4], v as f32);
    put_f(10, nx as f64 * pixel);
    put_f(11, ny as f64 * pixel);
    put_f(12, nz as f64 * pixel);
    put_f(13, 90.0);
    put_f(14, 90.0);
    put_f(15, 90.0);
    put_f(19, dmin);
    put_f(20, dmax);
    put_f(21, mean);
    put_f(49, origin.0);
    put_f(50, origin.1);
    put_f(54, rms);
    h[208..212].copy_from_slice(b"MAP ");
    h[212..216].copy_from_slice(&STAMP_LE);

    let lines: Vec<&str> = label.lines().filter(|l| !l.is_empty()).collect();
    let mut chunks: Vec<String> = Vec::new();
    for line in lines {
        let bytes = line.as_bytes();
        for c in bytes.chunks(LABEL_LEN) {
            chunks.push(String::from_utf8_lossy(c).into_owned());
        }
    }
    chunks.truncate(N_LABELS);
    LittleEndian::write_i32(&mut h[220..224], chunks.len() as i32);
    for (k, c) in chunks.iter().enumerate() {
        let start = 224 + k * LABEL_LEN;
        let b = c.as_bytes();
        h[start..start + b.len()].copy_from_slice(b);
    }
    h
}

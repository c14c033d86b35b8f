//! Micrograph and volume containers, MRC2014 I/O, and sliding-window tiling.

mod format;
mod tiling;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub use format::{
    read_mrc, read_mrc_from, write_micrograph, write_mrc, write_mrc_to, write_volume, ByteOrder,
    MrcHeader, HEADER_LEN,
};
pub use tiling::{blend_weights, stitch, tile, TileLayout, TilePosition};

/// A 2-D image patch (rows × cols).
pub type Patch = Array2<f64>;

/// Zero-mean, unit-std copy of `p` with the removed statistics. The std is floored at 1e-6.
pub fn standardize(p: &Patch) -> (Patch, f64, f64) {
    let n = p.len().max(1) as f64;
    let mean = p.sum() / n;
    let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-6);
    (p.mapv(|v| (v - mean) / std), mean, std)
}

/// A single 2-D micrograph with its sampling metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Micrograph {
    pub data: Array2<f64>,
    pub pixel_size_angstrom: f64,
    pub origin: (f64, f64),
    pub provenance: String,
}

impl Micrograph {
    pub fn new(data: Array2<f64>, pixel_size_angstrom: f64) -> Result<Self> {
        let m = Micrograph {
            data,
            pixel_size_angstrom,
            origin: (0.0, 0.0),
            provenance: String::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_provenance(mut self, label: impl Into<String>) -> Self {
        self.provenance = label.into();
        self
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.data.dim();
        if h == 0 || w == 0 {
            return Err(Error::Dimension(format!("micrograph is {h}x{w}")));
        }
        if !(self.pixel_size_angstrom > 0.0 && self.pixel_size_angstrom.is_finite()) {
            return Err(Error::Parameter(format!(
                "pixel size must be positive, got {}",
                self.pixel_size_angstrom
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("micrograph contains non-finite values".into()));
        }
        Ok(())
    }
}

/// A 3-D density map, indexed `[z, y, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f64>,
    pub voxel_size_angstrom: f64,
}

impl Volume {
    pub fn new(data: Array3<f64>, voxel_size_angstrom: f64) -> Result<Self> {
        let v = Volume {
            data,
            voxel_size_angstrom,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.data.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!("volume is {d}x{h}x{w}")));
        }
        if !(self.voxel_size_angstrom > 0.0 && self.voxel_size_angstrom.is_finite()) {
            return Err(Error::Parameter(format!(
                "voxel size must be positive, got {}",
                self.voxel_size_angstrom
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("volume contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn mass(&self) -> f64 {
        self.data.sum()
    }

    pub fn nyquist(&self) -> f64 {
        0.5 / self.voxel_size_angstrom
    }
}

/// Result of reading an MRC file: one section becomes a micrograph, more become a volume.
#[derive(Debug, Clone, PartialEq)]
pub enum MrcData {
    Micrograph(Micrograph),
    Volume(Volume),
}

impl MrcData {
    pub fn into_micrograph(self) -> Result<Micrograph> {
        match self {
            MrcData::Micrograph(m) => Ok(m),
            MrcData::Volume(v) => Err(Error::Dimension(format!(
                "expected a single-section micrograph, found a volume with {} sections",
                v.data.dim().0
            ))),
        }
    }

    /// Any file is a volume; a micrograph becomes a one-section stack.
    pub fn into_volume(self) -> Volume {
        match self {
            MrcData::Volume(v) => v,
            MrcData::Micrograph(m) => {
                let (h, w) = m.data.dim();
                Volume {
                    data: m.data.into_shape_with_order((1, h, w)).expect("same element count"),
                    voxel_size_angstrom: m.pixel_size_angstrom,
                }
            }
        }
    }
}

impl From<Micrograph> for MrcData {
    fn from(m: Micrograph) -> Self {
        MrcData::Micrograph(m)
    }
}

impl From<Volume> for MrcData {
    fn from(v: Volume) -> Self {
        MrcData::Volume(v)
    }
}

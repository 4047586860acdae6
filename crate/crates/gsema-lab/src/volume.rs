//! 3D scalar volumes and binary label masks.
//!
//! `Volume` holds image intensities on a (D, H, W) grid with per-axis voxel
//! spacing in mm. `LabelMask` holds {0,1} labels on a matching grid. Both
//! serialize to raw little-endian blobs (f32 / u8, C order) with a JSON
//! sidecar carrying shape and spacing.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Grid shape as (depth, height, width).
pub type GridShape = [usize; 3];

/// 3D scalar intensity grid with voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    /// Per-axis voxel size in mm.
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        let v = Volume { data, spacing };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(shape: GridShape, spacing: [f64; 3]) -> Self {
        Volume {
            data: Array3::zeros((shape[0], shape[1], shape[2])),
            spacing,
        }
    }

    pub fn shape(&self) -> GridShape {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.shape();
        if s.iter().any(|&d| d < 8) {
            return Err(Error::config(format!(
                "volume shape {:?} has an axis < 8",
                s
            )));
        }
        if self.spacing.iter().any(|&sp| !(sp > 0.0)) {
            return Err(Error::config("voxel spacing must be positive"));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("volume contains NaN/Inf".into()));
        }
        Ok(())
    }

    /// Intensity range (min, max) over the grid.
    pub fn range(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in self.data.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in self.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read_raw(path: &Path, shape: GridShape, spacing: [f64; 3]) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let n = shape[0] * shape[1] * shape[2];
        if bytes.len() != n * 4 {
            return Err(Error::shape(format!(
                "{} holds {} bytes, expected {} for shape {:?}",
                path.display(),
                bytes.len(),
                n * 4,
                shape
            )));
        }
        let mut data = Vec::with_capacity(n);
        for c in bytes.chunks_exact(4) {
            data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        let arr = Array3::from_shape_vec((shape[0], shape[1], shape[2]), data)
            .map_err(|e| Error::Internal(e.to_string()))?;
        Volume::new(arr, spacing)
    }
}

/// Binary {0,1} segmentation mask on the same grid as its `Volume`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub data: Array3<u8>,
}

impl LabelMask {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if !data.iter().all(|&v| v <= 1) {
            return Err(Error::config("label mask values must be 0 or 1"));
        }
        Ok(LabelMask { data })
    }

    pub fn zeros(shape: GridShape) -> Self {
        LabelMask {
            data: Array3::zeros((shape[0], shape[1], shape[2])),
        }
    }

    pub fn shape(&self) -> GridShape {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    /// Number of foreground voxels.
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Foreground voxel fraction in [0, 1].
    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.data.len() as f64
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.data.iter().copied().collect();
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read_raw(path: &Path, shape: GridShape) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let n = shape[0] * shape[1] * shape[2];
        if bytes.len() != n {
            return Err(Error::shape(format!(
                "{} holds {} bytes, expected {} for shape {:?}",
                path.display(),
                bytes.len(),
                n,
                shape
            )));
        }
        let arr = Array3::from_shape_vec((shape[0], shape[1], shape[2]), bytes)
            .map_err(|e| Error::Internal(e.to_string()))?;
        LabelMask::new(arr)
    }
}

/// Whether a sample plays the source (real) or transformed-target role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "SOURCE")]
    Source,
    #[serde(rename = "TARGET")]
    Target,
}

/// Paired (image, mask, domain-id) record.
#[derive(Debug, Clone)]
pub struct DomainSample {
    pub image: Volume,
    pub mask: LabelMask,
    pub domain_id: usize,
    pub variant: Variant,
}

impl DomainSample {
    pub fn validate(&self) -> Result<()> {
        if self.image.shape() != self.mask.shape() {
            return Err(Error::shape(format!(
                "image shape {:?} != mask shape {:?}",
                self.image.shape(),
                self.mask.shape()
            )));
        }
        self.image.validate()
    }
}

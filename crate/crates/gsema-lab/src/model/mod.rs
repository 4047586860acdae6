//! Small 3D encoder-decoder segmentation backbone with a latent-feature tap.
//!
//! The backbone is instantiated twice (student, teacher) over a shared
//! parameter layout: the network definition itself is stateless, parameters
//! live in a flat `ParamVector` whose layout is a deterministic function of
//! `BackboneConfig`. Forward passes take the parameter vector explicitly, so
//! student and teacher are just two vectors over one `Network`.

mod checkpoint;
mod net;
mod ops;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use net::{ForwardCache, Network};

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volume::{GridShape, Variant};

/// Capacity and geometry of the encoder-decoder backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_shape: GridShape,
    /// Channel width of encoder/decoder stages.
    pub base_channels: usize,
    /// Number of 2x downsamplings.
    pub depth: usize,
    /// Channels of the bottleneck latent tensor.
    pub latent_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_shape: [32, 32, 32],
            base_channels: 8,
            depth: 2,
            latent_channels: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::config("base_channels must be >= 4"));
        }
        if self.depth < 2 {
            return Err(Error::config("depth must be >= 2"));
        }
        if self.latent_channels < 1 {
            return Err(Error::config("latent_channels must be >= 1"));
        }
        let div = 1usize << self.depth;
        if self.in_shape.iter().any(|&d| d % div != 0 || d / div == 0) {
            return Err(Error::config(format!(
                "in_shape {:?} must be divisible by 2^depth = {}",
                self.in_shape, div
            )));
        }
        Ok(())
    }

    /// Spatial shape of the latent tensor.
    pub fn latent_shape(&self) -> [usize; 4] {
        let div = 1usize << self.depth;
        [
            self.latent_channels,
            self.in_shape[0] / div,
            self.in_shape[1] / div,
            self.in_shape[2] / div,
        ]
    }
}

/// Which network a tensor came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetworkKind {
    #[serde(rename = "STUDENT")]
    Student,
    #[serde(rename = "TEACHER")]
    Teacher,
}

/// Bottleneck latent features, tagged with their provenance.
#[derive(Debug, Clone)]
pub struct FeatureTensor {
    /// (channels, D', H', W')
    pub data: Array4<f64>,
    pub source_network: NetworkKind,
    pub source_variant: Variant,
}

impl FeatureTensor {
    pub fn validate(&self) -> Result<()> {
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature tensor contains NaN/Inf".into()));
        }
        Ok(())
    }

    /// Flatten to a single feature vector (C-order).
    pub fn flatten(&self) -> Vec<f64> {
        self.data.iter().copied().collect()
    }
}

/// Sigmoid probabilities over the input grid, values in [0, 1].
#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: Array3<f64>,
}

impl Prediction {
    pub fn shape(&self) -> GridShape {
        let d = self.probs.dim();
        [d.0, d.1, d.2]
    }
}

/// One named parameter block inside the flat layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

/// Deterministic parameter-name -> slice map shared by student and teacher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    total_len: usize,
}

impl ParamLayout {
    pub fn new(entries: Vec<LayoutEntry>) -> Self {
        let total_len = entries.iter().map(|e| e.len).sum();
        ParamLayout { entries, total_len }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Content digest over entry names, offsets and shapes; stored in the
    /// checkpoint sidecar so layout drift is detectable on load.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update(e.offset.to_le_bytes());
            h.update(e.len.to_le_bytes());
            for &d in &e.shape {
                h.update(d.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{:02x}", b));
    }
    s
}

/// Flat ordered vector of all trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, entry: &LayoutEntry) -> &[f64] {
        &self.values[entry.offset..entry.offset + entry.len]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Per-entry gradient accumulator aligned with a `ParamLayout`.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradBuffer {
    pub fn new(layout: &ParamLayout) -> Self {
        GradBuffer {
            slots: vec![None; layout.entries().len()],
        }
    }

    /// Accumulate a gradient block for layout entry `idx`.
    pub fn add(&mut self, idx: usize, grad: &[f64]) {
        match &mut self.slots[idx] {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grad) {
                    *a += g;
                }
            }
            None => self.slots[idx] = Some(grad.to_vec()),
        }
    }

    pub fn get(&self, idx: usize) -> Option<&[f64]> {
        self.slots[idx].as_deref()
    }
}

/// Assemble a `GradBuffer` into a flat vector in layout order.
///
/// Every layout entry must have received a gradient; a missing block means
/// the backward pass skipped a parameter, which is a bug.
pub fn flatten_gradient(grads: &GradBuffer, layout: &ParamLayout) -> Result<Vec<f64>> {
    let mut flat = vec![0.0; layout.total_len()];
    for (idx, entry) in layout.entries().iter().enumerate() {
        match grads.get(idx) {
            Some(block) => {
                if block.len() != entry.len {
                    return Err(Error::Internal(format!(
                        "gradient block for {} has len {}, layout says {}",
                        entry.name,
                        block.len(),
                        entry.len
                    )));
                }
                flat[entry.offset..entry.offset + entry.len].copy_from_slice(block);
            }
            None => {
                return Err(Error::Internal(format!(
                    "missing gradient for parameter {}",
                    entry.name
                )))
            }
        }
    }
    Ok(flat)
}

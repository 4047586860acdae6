//! Synthetic multi-domain dataset construction.
//!
//! Each domain k gets its own appearance parameters (a `DomainSpec`); stored
//! samples are phantoms restyled through that domain's shift pipeline and
//! re-tagged SOURCE, so the K domains look "similar but distinct". The
//! TARGET variant is reserved for shifts applied on the fly during training.

mod phantom;
mod shift;

pub use phantom::{generate_phantom, phantom_geometry, PhantomGeometry, MAX_FOREGROUND_FRACTION};
pub use shift::apply_domain_shift;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{DomainSample, GridShape, LabelMask, Variant, Volume};

/// Appearance parameters of one domain's shift pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub intensity_gain: f64,
    pub intensity_offset: f64,
    pub noise_sigma: f64,
    pub smoothing_sigma: f64,
    pub histogram_shift: f64,
    pub bias_field_amplitude: f64,
    pub resolution_scale: f64,
    /// Maximum rotation per axis in degrees; 0 disables rotation.
    pub rotation_deg: f64,
    /// Maximum |scale - 1| of the isotropic jitter; 0 disables it.
    pub scale_jitter: f64,
    pub rng_seed: u64,
}

impl DomainSpec {
    /// A spec whose every stage is neutral: the pipeline returns the input
    /// image bits unchanged.
    pub fn identity(domain_id: usize, rng_seed: u64) -> Self {
        DomainSpec {
            domain_id,
            intensity_gain: 1.0,
            intensity_offset: 0.0,
            noise_sigma: 0.0,
            smoothing_sigma: 0.0,
            histogram_shift: 0.0,
            bias_field_amplitude: 0.0,
            resolution_scale: 1.0,
            rotation_deg: 0.0,
            scale_jitter: 0.0,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.intensity_gain <= 0.0 {
            return Err(Error::config("intensity_gain must be positive"));
        }
        if self.noise_sigma < 0.0 || self.smoothing_sigma < 0.0 {
            return Err(Error::config("sigmas must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.bias_field_amplitude) {
            return Err(Error::config("bias_field_amplitude must lie in [0, 1)"));
        }
        if !(0.1..=2.0).contains(&self.resolution_scale) {
            return Err(Error::config("resolution_scale must lie in [0.1, 2]"));
        }
        if !(0.0..=45.0).contains(&self.rotation_deg) {
            return Err(Error::config("rotation_deg must lie in [0, 45]"));
        }
        if !(0.0..0.5).contains(&self.scale_jitter) {
            return Err(Error::config("scale_jitter must lie in [0, 0.5)"));
        }
        if !self.intensity_offset.is_finite() || self.histogram_shift.abs() > 2.0 {
            return Err(Error::config("offset/histogram_shift out of range"));
        }
        Ok(())
    }
}

/// Sampling ranges for random DomainSpecs. The source text names the
/// transformation categories but no magnitudes; these defaults keep the
/// shifts mild enough that the toy task stays learnable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformRanges {
    pub gain: (f64, f64),
    pub offset: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub smoothing_sigma: (f64, f64),
    pub histogram_shift: (f64, f64),
    pub bias_amplitude: (f64, f64),
    pub resolution_scale: (f64, f64),
    pub rotation_deg: (f64, f64),
    pub scale_jitter: (f64, f64),
}

impl Default for TransformRanges {
    fn default() -> Self {
        TransformRanges {
            gain: (0.7, 1.4),
            offset: (-0.1, 0.1),
            noise_sigma: (0.0, 0.1),
            smoothing_sigma: (0.0, 1.0),
            histogram_shift: (-0.5, 0.5),
            bias_amplitude: (0.0, 0.3),
            resolution_scale: (0.75, 1.0),
            rotation_deg: (0.0, 10.0),
            scale_jitter: (0.0, 0.1),
        }
    }
}

impl TransformRanges {
    /// Draw one spec; the caller supplies the rng so successive draws from a
    /// master generator stay reproducible.
    pub fn draw(&self, rng: &mut ChaCha20Rng, domain_id: usize) -> DomainSpec {
        let mut pick = |(lo, hi): (f64, f64)| -> f64 {
            if lo == hi { lo } else { rng.gen_range(lo..hi) }
        };
        DomainSpec {
            domain_id,
            intensity_gain: pick(self.gain),
            intensity_offset: pick(self.offset),
            noise_sigma: pick(self.noise_sigma),
            smoothing_sigma: pick(self.smoothing_sigma),
            histogram_shift: pick(self.histogram_shift),
            bias_field_amplitude: pick(self.bias_amplitude),
            resolution_scale: pick(self.resolution_scale),
            rotation_deg: pick(self.rotation_deg),
            scale_jitter: pick(self.scale_jitter),
            rng_seed: rng.gen(),
        }
    }
}

/// splitmix64-style mixing so per-sample seeds are decorrelated functions of
/// (master_seed, domain, index, stream).
pub fn derive_seed(master: u64, domain: u64, index: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(domain.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(stream.wrapping_mul(0x94d0_49bb_1331_11eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample JSON sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub shape: GridShape,
    pub spacing: [f64; 3],
    pub domain_spec: DomainSpec,
    pub phantom_seed: u64,
    pub variant: Variant,
}

/// Dataset-level metadata, stored as dataset.json at the root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_domains: usize,
    pub samples_per_domain: usize,
    pub master_seed: u64,
    pub shape: GridShape,
    pub aneurysm_radius_range: (f64, f64),
    pub domain_specs: Vec<DomainSpec>,
}

#[derive(Debug, Clone)]
pub struct DatasetHandle {
    root: PathBuf,
    pub meta: DatasetMeta,
}

/// Generate and persist the whole dataset. Refuses to write into an
/// existing non-empty directory.
pub fn build_dataset(
    root: &Path,
    num_domains: usize,
    samples_per_domain: usize,
    master_seed: u64,
    shape: GridShape,
    radius_range: (f64, f64),
    ranges: &TransformRanges,
) -> Result<DatasetHandle> {
    if num_domains < 2 {
        return Err(Error::config("need at least 2 domains"));
    }
    if samples_per_domain == 0 {
        return Err(Error::config("need at least 1 sample per domain"));
    }
    if root.exists() && fs::read_dir(root)?.next().is_some() {
        return Err(Error::config(format!(
            "output directory {} exists and is not empty",
            root.display()
        )));
    }
    fs::create_dir_all(root)?;

    let mut spec_rng = ChaCha20Rng::seed_from_u64(master_seed);
    let mut specs = Vec::with_capacity(num_domains);
    for k in 0..num_domains {
        let spec = ranges.draw(&mut spec_rng, k);
        spec.validate()?;
        specs.push(spec);
    }
    for i in 0..num_domains {
        for j in i + 1..num_domains {
            let (mut a, mut b) = (specs[i].clone(), specs[j].clone());
            // distinctness must come from the appearance parameters, not ids
            a.domain_id = 0;
            b.domain_id = 0;
            a.rng_seed = 0;
            b.rng_seed = 0;
            if a == b {
                return Err(Error::Degenerate(format!(
                    "domains {i} and {j} drew identical parameters"
                )));
            }
        }
    }

    for (k, spec) in specs.iter().enumerate() {
        let dir = root.join(format!("domain_{k}"));
        fs::create_dir(&dir)?;
        for i in 0..samples_per_domain {
            let phantom_seed = derive_seed(master_seed, k as u64, i as u64, 0);
            let style_seed = derive_seed(master_seed, k as u64, i as u64, 1);
            let base = generate_phantom(phantom_seed, shape, radius_range)?;
            let style = DomainSpec { rng_seed: style_seed, ..spec.clone() };
            let mut styled = apply_domain_shift(&base, &style)?;
            // stored samples are the domain's native (source) appearance
            styled.variant = Variant::Source;

            styled.image.write_raw(&dir.join(format!("sample_{i}.img.raw")))?;
            styled.mask.write_raw(&dir.join(format!("sample_{i}.msk.raw")))?;
            let sidecar = SampleSidecar {
                shape,
                spacing: styled.image.spacing,
                domain_spec: style,
                phantom_seed,
                variant: styled.variant,
            };
            fs::write(
                dir.join(format!("sample_{i}.json")),
                serde_json::to_vec_pretty(&sidecar)?,
            )?;
        }
    }

    let meta = DatasetMeta {
        num_domains,
        samples_per_domain,
        master_seed,
        shape,
        aneurysm_radius_range: radius_range,
        domain_specs: specs,
    };
    fs::write(root.join("dataset.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(DatasetHandle { root: root.to_path_buf(), meta })
}

impl DatasetHandle {
    pub fn open(root: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_slice(&fs::read(root.join("dataset.json"))?)?;
        Ok(DatasetHandle { root: root.to_path_buf(), meta })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn num_domains(&self) -> usize {
        self.meta.num_domains
    }

    pub fn samples_per_domain(&self) -> usize {
        self.meta.samples_per_domain
    }

    pub fn load_sample(&self, domain: usize, index: usize) -> Result<DomainSample> {
        if domain >= self.meta.num_domains || index >= self.meta.samples_per_domain {
            return Err(Error::config(format!(
                "sample ({domain}, {index}) outside dataset of {}x{}",
                self.meta.num_domains, self.meta.samples_per_domain
            )));
        }
        let dir = self.root.join(format!("domain_{domain}"));
        let sidecar: SampleSidecar =
            serde_json::from_slice(&fs::read(dir.join(format!("sample_{index}.json")))?)?;
        let image = Volume::read_raw(
            &dir.join(format!("sample_{index}.img.raw")),
            sidecar.shape,
            sidecar.spacing,
        )?;
        let mask = LabelMask::read_raw(&dir.join(format!("sample_{index}.msk.raw")), sidecar.shape)?;
        let sample = DomainSample {
            image,
            mask,
            domain_id: domain,
            variant: sidecar.variant,
        };
        sample.validate()?;
        Ok(sample)
    }

    /// SHA-256 over every file's bytes in a fixed order; identifies the
    /// dataset contents in run manifests.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(fs::read(self.root.join("dataset.json"))?);
        for k in 0..self.meta.num_domains {
            let dir = self.root.join(format!("domain_{k}"));
            for i in 0..self.meta.samples_per_domain {
                for ext in ["img.raw", "msk.raw", "json"] {
                    hasher.update(fs::read(dir.join(format!("sample_{i}.{ext}")))?);
                }
            }
        }
        Ok(crate::model::hex_string(&hasher.finalize()))
    }
}

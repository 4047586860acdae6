//! Synthetic vessel-with-aneurysm phantoms: one curved tube through the
//! volume with a spherical bulge attached to it. Only the bulge (the
//! aneurysm) is labeled, which reproduces the heavy foreground/background
//! class imbalance the training method is aimed at.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{DomainSample, GridShape, LabelMask, Variant, Volume};

/// Maximum fraction of voxels the aneurysm may occupy.
pub const MAX_FOREGROUND_FRACTION: f64 = 0.05;

const BACKGROUND: f64 = 0.1;
const STRUCTURE_GAIN: f64 = 0.8;
const PROFILE_SOFTNESS: f64 = 0.35;
const CENTERLINE_SAMPLES: usize = 200;

/// Geometry backing one phantom; exposed so tests can rasterize the same
/// ball with independent code.
#[derive(Debug, Clone)]
pub struct PhantomGeometry {
    pub centerline: Vec<[f64; 3]>,
    pub tube_radius: f64,
    /// Voxel-center (integer) coordinates, so the rasterized ball volume is
    /// a pure function of the radius.
    pub aneurysm_center: [usize; 3],
    pub aneurysm_radius: f64,
}

fn check_request(shape: GridShape, radius_range: (f64, f64)) -> Result<()> {
    if shape.iter().any(|&d| d < 16) {
        return Err(Error::config(format!(
            "phantom shape {shape:?} too small, every axis must be >= 16"
        )));
    }
    let (lo, hi) = radius_range;
    let max_r = shape.iter().copied().min().unwrap() as f64 / 4.0;
    if !(1.0 <= lo && lo <= hi && hi <= max_r) {
        return Err(Error::config(format!(
            "aneurysm radius range ({lo}, {hi}) outside [1, {max_r}]"
        )));
    }
    Ok(())
}

/// Number of voxels inside the ball, counting within a bounding box.
fn ball_voxel_count(center: [usize; 3], radius: f64, shape: GridShape) -> usize {
    let r = radius.ceil() as isize;
    let rr = radius * radius;
    let mut count = 0;
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let z = center[0] as isize + dz;
                let y = center[1] as isize + dy;
                let x = center[2] as isize + dx;
                if z < 0
                    || y < 0
                    || x < 0
                    || z >= shape[0] as isize
                    || y >= shape[1] as isize
                    || x >= shape[2] as isize
                {
                    continue;
                }
                if (dz * dz + dy * dy + dx * dx) as f64 <= rr {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Draw the phantom's geometry. Deterministic in (seed, shape, radii).
pub fn phantom_geometry(
    seed: u64,
    shape: GridShape,
    radius_range: (f64, f64),
) -> Result<PhantomGeometry> {
    check_request(shape, radius_range)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dims = [shape[0] as f64, shape[1] as f64, shape[2] as f64];

    // Quadratic Bezier centerline entering and leaving through opposite
    // faces of a randomly chosen axis, bowed by a jittered midpoint.
    let axis = rng.gen_range(0..3usize);
    let margin = 2.0;
    let mut a = [0.0; 3];
    let mut b = [0.0; 3];
    for i in 0..3 {
        if i == axis {
            a[i] = margin;
            b[i] = dims[i] - 1.0 - margin;
        } else {
            a[i] = rng.gen_range(0.25 * dims[i]..0.75 * dims[i]);
            b[i] = rng.gen_range(0.25 * dims[i]..0.75 * dims[i]);
        }
    }
    let mut c = [0.0; 3];
    for i in 0..3 {
        let mid = 0.5 * (a[i] + b[i]);
        c[i] = (mid + rng.gen_range(-0.2 * dims[i]..0.2 * dims[i]))
            .clamp(margin, dims[i] - 1.0 - margin);
    }
    let centerline: Vec<[f64; 3]> = (0..CENTERLINE_SAMPLES)
        .map(|k| {
            let t = k as f64 / (CENTERLINE_SAMPLES - 1) as f64;
            let mut p = [0.0; 3];
            for i in 0..3 {
                p[i] = (1.0 - t) * (1.0 - t) * a[i] + 2.0 * (1.0 - t) * t * c[i] + t * t * b[i];
            }
            p
        })
        .collect();

    let tube_radius = rng.gen_range(1.2..2.2);

    let mut radius = rng.gen_range(radius_range.0..=radius_range.1);
    // Attach the bulge to a mid-curve point, snapped to a voxel center and
    // pulled inside the volume far enough to hold the whole ball.
    let t_idx = rng.gen_range(CENTERLINE_SAMPLES * 3 / 10..CENTERLINE_SAMPLES * 7 / 10);
    let anchor = centerline[t_idx];
    let place = |radius: f64| -> [usize; 3] {
        let mut ctr = [0usize; 3];
        for i in 0..3 {
            let lo = radius.ceil() as usize + 1;
            let hi = shape[i] - radius.ceil() as usize - 2;
            ctr[i] = (anchor[i].round() as usize).clamp(lo, hi);
        }
        ctr
    };
    let mut center = place(radius);

    // The small-volume corner case: a radius near min(shape)/4 can exceed
    // the foreground budget, so shrink until the rasterized ball fits.
    let budget = (MAX_FOREGROUND_FRACTION * (shape[0] * shape[1] * shape[2]) as f64) as usize;
    while ball_voxel_count(center, radius, shape) >= budget && radius > 1.0 {
        radius = (radius * 0.9).max(1.0);
        center = place(radius);
    }

    Ok(PhantomGeometry { centerline, tube_radius, aneurysm_center: center, aneurysm_radius: radius })
}

/// Generate one SOURCE sample. The image holds the soft-edged tube plus
/// bulge over a dim background with mild texture noise; the mask is the
/// hard-rasterized aneurysm ball only.
pub fn generate_phantom(
    seed: u64,
    shape: GridShape,
    radius_range: (f64, f64),
) -> Result<DomainSample> {
    let geo = phantom_geometry(seed, shape, radius_range)?;
    // Texture noise comes from a separate stream so geometry stays
    // comparable across texture settings.
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let texture = Normal::new(0.0, 0.02).expect("valid sigma");

    let sigmoid = |t: f64| 1.0 / (1.0 + (-t).exp());
    let mut image = Array3::<f32>::zeros(shape);
    let mut mask = Array3::<u8>::zeros(shape);
    let ctr = geo.aneurysm_center;
    let rr = geo.aneurysm_radius * geo.aneurysm_radius;

    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let p = [z as f64, y as f64, x as f64];
                let mut tube_d2 = f64::INFINITY;
                for q in &geo.centerline {
                    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                    tube_d2 = tube_d2.min(d2);
                }
                let tube_prof = sigmoid((geo.tube_radius - tube_d2.sqrt()) / PROFILE_SOFTNESS);

                let an_d2 = (p[0] - ctr[0] as f64).powi(2)
                    + (p[1] - ctr[1] as f64).powi(2)
                    + (p[2] - ctr[2] as f64).powi(2);
                let an_prof = sigmoid((geo.aneurysm_radius - an_d2.sqrt()) / PROFILE_SOFTNESS);

                let v = BACKGROUND
                    + STRUCTURE_GAIN * tube_prof.max(an_prof)
                    + texture.sample(&mut rng);
                image[[z, y, x]] = v.clamp(0.0, 1.0) as f32;

                if an_d2 <= rr {
                    mask[[z, y, x]] = 1;
                }
            }
        }
    }

    let sample = DomainSample {
        image: Volume { data: image, spacing: [1.0; 3] },
        mask: LabelMask { data: mask },
        domain_id: 0,
        variant: Variant::Source,
    };
    sample.validate()?;
    Ok(sample)
}

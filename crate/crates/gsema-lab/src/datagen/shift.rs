//! Source-to-target appearance shift. Stages run in a fixed order so a
//! (sample, spec) pair maps to exactly one output:
//!
//!   1. geometric: small affine (rotation + isotropic scale, mask follows
//!      with nearest-neighbor) and a down/up resampling round trip on the
//!      image only (acquisition resolution loss)
//!   2. intensity gain/offset
//!   3. Gaussian smoothing
//!   4. additive Gaussian noise, sigma expressed as a fraction of the
//!      current intensity range
//!   5. histogram shift: gamma remap of the normalized intensities with
//!      gamma = exp(shift)
//!   6. multiplicative quadratic bias field
//!
//! Stages at their neutral parameter are skipped outright, so a fully
//! neutral spec returns the input bits unchanged.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::DomainSpec;
use crate::error::{Error, Result};
use crate::volume::{DomainSample, LabelMask, Variant, Volume};

pub fn apply_domain_shift(sample: &DomainSample, spec: &DomainSpec) -> Result<DomainSample> {
    spec.validate()?;
    if sample.variant != Variant::Source {
        return Err(Error::config("domain shift expects a SOURCE sample"));
    }
    sample.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.rng_seed);

    let mut img: Array3<f64> = sample.image.data.mapv(|v| v as f64);
    let mut mask = sample.mask.data.clone();

    if spec.rotation_deg > 0.0 || spec.scale_jitter > 0.0 {
        let max = spec.rotation_deg.to_radians();
        let angles = if spec.rotation_deg > 0.0 {
            [
                rng.gen_range(-max..=max),
                rng.gen_range(-max..=max),
                rng.gen_range(-max..=max),
            ]
        } else {
            [0.0; 3]
        };
        let scale = if spec.scale_jitter > 0.0 {
            rng.gen_range(1.0 - spec.scale_jitter..=1.0 + spec.scale_jitter)
        } else {
            1.0
        };
        let (i2, m2) = affine_resample(&img, &mask, angles, scale);
        img = i2;
        mask = m2;
    }
    if spec.resolution_scale != 1.0 {
        img = resolution_round_trip(&img, spec.resolution_scale);
    }

    if spec.intensity_gain != 1.0 || spec.intensity_offset != 0.0 {
        img.mapv_inplace(|v| v * spec.intensity_gain + spec.intensity_offset);
    }

    if spec.smoothing_sigma > 0.0 {
        img = gaussian_blur(&img, spec.smoothing_sigma);
    }

    if spec.noise_sigma > 0.0 {
        let (lo, hi) = min_max(&img);
        let sd = spec.noise_sigma * (hi - lo);
        if sd > 0.0 {
            let dist = Normal::new(0.0, sd).expect("valid sigma");
            img.mapv_inplace(|v| v + dist.sample(&mut rng));
        }
    }

    if spec.histogram_shift != 0.0 {
        img = histogram_shift(&img, spec.histogram_shift);
    }

    if spec.bias_field_amplitude > 0.0 {
        apply_bias_field(&mut img, spec.bias_field_amplitude, &mut rng);
    }

    let out = DomainSample {
        image: Volume {
            data: img.mapv(|v| v as f32),
            spacing: sample.image.spacing,
        },
        mask: LabelMask { data: mask },
        domain_id: spec.domain_id,
        variant: Variant::Target,
    };
    out.validate()?;
    Ok(out)
}

fn min_max(img: &Array3<f64>) -> (f64, f64) {
    img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Rotation by Euler angles around the three grid axes, applied as
/// R = R0(a0) * R1(a1) * R2(a2) to (axis0, axis1, axis2) coordinates.
fn rotation(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let rot_about = |axis: usize, a: f64| -> [[f64; 3]; 3] {
        let (s, c) = a.sin_cos();
        let (i, j) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            2 => (0, 1),
            _ => unreachable!(),
        };
        let mut m = [[0.0; 3]; 3];
        for (k, row) in m.iter_mut().enumerate() {
            row[k] = 1.0;
        }
        m[i][i] = c;
        m[j][j] = c;
        m[i][j] = -s;
        m[j][i] = s;
        m
    };
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, bk) in b.iter().enumerate() {
                    m[i][j] += a[i][k] * bk[j];
                }
            }
        }
        m
    };
    mul(rot_about(0, angles[0]), mul(rot_about(1, angles[1]), rot_about(2, angles[2])))
}

fn trilinear(img: &Array3<f64>, p: [f64; 3]) -> f64 {
    let (d, h, w) = img.dim();
    let dims = [d, h, w];
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut f = [0.0f64; 3];
    for a in 0..3 {
        let x = p[a].clamp(0.0, (dims[a] - 1) as f64);
        let lo = x.floor() as usize;
        i0[a] = lo;
        i1[a] = (lo + 1).min(dims[a] - 1);
        f[a] = x - lo as f64;
    }
    let mut acc = 0.0;
    for (bz, wz) in [(i0[0], 1.0 - f[0]), (i1[0], f[0])] {
        for (by, wy) in [(i0[1], 1.0 - f[1]), (i1[1], f[1])] {
            for (bx, wx) in [(i0[2], 1.0 - f[2]), (i1[2], f[2])] {
                acc += wz * wy * wx * img[[bz, by, bx]];
            }
        }
    }
    acc
}

fn nearest(mask: &Array3<u8>, p: [f64; 3]) -> u8 {
    let (d, h, w) = mask.dim();
    let dims = [d, h, w];
    let mut idx = [0usize; 3];
    for a in 0..3 {
        idx[a] = p[a].round().clamp(0.0, (dims[a] - 1) as f64) as usize;
    }
    mask[[idx[0], idx[1], idx[2]]]
}

/// Inverse-map resampling of image (trilinear) and mask (nearest) under a
/// rotation + isotropic scale about the volume center.
fn affine_resample(
    img: &Array3<f64>,
    mask: &Array3<u8>,
    angles: [f64; 3],
    scale: f64,
) -> (Array3<f64>, Array3<u8>) {
    let (d, h, w) = img.dim();
    let r = rotation(angles);
    let c = [(d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
    let mut out_img = Array3::<f64>::zeros((d, h, w));
    let mut out_mask = Array3::<u8>::zeros((d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
                // inverse of x -> R*s*x is R^T * x / s
                let mut u = [0.0; 3];
                for (i, ui) in u.iter_mut().enumerate() {
                    *ui = (r[0][i] * v[0] + r[1][i] * v[1] + r[2][i] * v[2]) / scale;
                }
                let p = [u[0] + c[0], u[1] + c[1], u[2] + c[2]];
                out_img[[z, y, x]] = trilinear(img, p);
                out_mask[[z, y, x]] = nearest(mask, p);
            }
        }
    }
    (out_img, out_mask)
}

fn resample_to(img: &Array3<f64>, dims: (usize, usize, usize)) -> Array3<f64> {
    let (sd, sh, sw) = img.dim();
    let (dd, dh, dw) = dims;
    let map = |i: usize, dst: usize, src: usize| -> f64 {
        (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5
    };
    Array3::from_shape_fn(dims, |(z, y, x)| {
        trilinear(img, [map(z, dd, sd), map(y, dh, sh), map(x, dw, sw)])
    })
}

/// Down- and immediately re-upsample to simulate a coarser acquisition grid.
fn resolution_round_trip(img: &Array3<f64>, scale: f64) -> Array3<f64> {
    let (d, h, w) = img.dim();
    let shrink = |n: usize| ((n as f64 * scale).round() as usize).max(4);
    let small = resample_to(img, (shrink(d), shrink(h), shrink(w)));
    resample_to(&small, (d, h, w))
}

fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * half + 1) as usize);
    for k in -half..=half {
        kernel.push((-((k * k) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }

    let mut cur = img.clone();
    let (d, h, w) = img.dim();
    let dims = [d as isize, h as isize, w as isize];
    for axis in 0..3 {
        let mut next = Array3::<f64>::zeros((d, h, w));
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let idx = [z as isize, y as isize, x as isize];
                    let mut acc = 0.0;
                    for (ki, &kw) in kernel.iter().enumerate() {
                        let mut j = idx;
                        j[axis] = (idx[axis] + ki as isize - half).clamp(0, dims[axis] - 1);
                        acc += kw * cur[[j[0] as usize, j[1] as usize, j[2] as usize]];
                    }
                    next[[z, y, x]] = acc;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Gamma remap of normalized intensities; shift = 0 is the identity,
/// positive shifts darken the midtones (gamma = exp(shift) > 1).
fn histogram_shift(img: &Array3<f64>, shift: f64) -> Array3<f64> {
    let (lo, hi) = min_max(img);
    let range = hi - lo;
    if range <= 1e-12 {
        return img.clone();
    }
    let gamma = shift.exp();
    img.mapv(|v| lo + range * ((v - lo) / range).powf(gamma))
}

/// Multiply by 1 + amplitude * q(x) where q is a random quadratic in the
/// normalized coordinates, scaled so |q| <= 1 (the field stays positive for
/// amplitude < 1).
fn apply_bias_field(img: &mut Array3<f64>, amplitude: f64, rng: &mut ChaCha20Rng) {
    let coeffs: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm: f64 = coeffs.iter().map(|c| c.abs()).sum();
    if norm == 0.0 {
        return;
    }
    let (d, h, w) = img.dim();
    let unit = |i: usize, n: usize| -> f64 {
        if n <= 1 { 0.0 } else { 2.0 * i as f64 / (n - 1) as f64 - 1.0 }
    };
    for ((z, y, x), v) in img.indexed_iter_mut() {
        let (u0, u1, u2) = (unit(z, d), unit(y, h), unit(x, w));
        let monos = [u0, u1, u2, u0 * u0, u1 * u1, u2 * u2, u0 * u1, u0 * u2, u1 * u2];
        let q: f64 = coeffs.iter().zip(monos).map(|(c, m)| c * m).sum::<f64>() / norm;
        *v *= 1.0 + amplitude * q;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::phantom::generate_phantom;

    fn sample() -> DomainSample {
        generate_phantom(3, [16, 16, 16], (2.0, 3.0)).unwrap()
    }

    #[test]
    fn identity_spec_is_bit_exact() {
        let s = sample();
        let spec = DomainSpec::identity(2, 99);
        let out = apply_domain_shift(&s, &spec).unwrap();
        assert_eq!(out.image.data, s.image.data);
        assert_eq!(out.mask.data, s.mask.data);
        assert_eq!(out.variant, Variant::Target);
        assert_eq!(out.domain_id, 2);
    }

    #[test]
    fn pure_gain_doubles_every_voxel() {
        let s = sample();
        let spec = DomainSpec { intensity_gain: 2.0, ..DomainSpec::identity(0, 1) };
        let out = apply_domain_shift(&s, &spec).unwrap();
        for (&a, &b) in out.image.data.iter().zip(s.image.data.iter()) {
            assert_eq!(a, 2.0 * b);
        }
    }

    fn full_spec(seed: u64) -> DomainSpec {
        DomainSpec {
            domain_id: 1,
            intensity_gain: 1.2,
            intensity_offset: -0.05,
            noise_sigma: 0.05,
            smoothing_sigma: 0.7,
            histogram_shift: 0.3,
            bias_field_amplitude: 0.2,
            resolution_scale: 0.8,
            rotation_deg: 8.0,
            scale_jitter: 0.08,
            rng_seed: seed,
        }
    }

    #[test]
    fn full_pipeline_is_deterministic() {
        let s = sample();
        let a = apply_domain_shift(&s, &full_spec(5)).unwrap();
        let b = apply_domain_shift(&s, &full_spec(5)).unwrap();
        assert_eq!(a.image.data, b.image.data);
        assert_eq!(a.mask.data, b.mask.data);
        let c = apply_domain_shift(&s, &full_spec(6)).unwrap();
        assert_ne!(a.image.data, c.image.data);
    }

    #[test]
    fn mask_untouched_without_geometric_stages() {
        let s = sample();
        let spec = DomainSpec {
            rotation_deg: 0.0,
            scale_jitter: 0.0,
            resolution_scale: 1.0,
            ..full_spec(7)
        };
        let out = apply_domain_shift(&s, &spec).unwrap();
        assert_eq!(out.mask.data, s.mask.data);
        assert_ne!(out.image.data, s.image.data);
    }

    #[test]
    fn geometric_stage_moves_the_mask_but_keeps_it_binary() {
        let s = sample();
        let spec = DomainSpec { rotation_deg: 10.0, ..DomainSpec::identity(0, 11) };
        let out = apply_domain_shift(&s, &spec).unwrap();
        assert_ne!(out.mask.data, s.mask.data);
        assert!(out.mask.data.iter().all(|&v| v <= 1));
        // rigid-ish motion roughly preserves object size
        let before = s.mask.foreground_count() as f64;
        let after = out.mask.foreground_count() as f64;
        assert!((after - before).abs() / before < 0.35, "{before} -> {after}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = sample();
        let bad = DomainSpec { intensity_gain: 0.0, ..DomainSpec::identity(0, 0) };
        assert!(apply_domain_shift(&s, &bad).is_err());
        let mut target = s.clone();
        target.variant = Variant::Target;
        assert!(apply_domain_shift(&target, &DomainSpec::identity(0, 0)).is_err());
    }

    #[test]
    fn pointwise_stages_preserve_intensity_order() {
        let s = sample();
        let spec = DomainSpec {
            intensity_gain: 1.7,
            intensity_offset: 0.2,
            histogram_shift: -0.4,
            ..DomainSpec::identity(0, 13)
        };
        let out = apply_domain_shift(&s, &spec).unwrap();
        let a = s.image.data.as_slice().unwrap();
        let b = out.image.data.as_slice().unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        for _ in 0..200 {
            let i = rng.gen_range(0..a.len());
            let j = rng.gen_range(0..a.len());
            if a[i] < a[j] {
                assert!(b[i] <= b[j], "order broken at ({i}, {j})");
            }
        }
    }

    #[test]
    fn smoothing_is_operator_monotone() {
        let s = sample();
        let base: Array3<f64> = s.image.data.mapv(|v| v as f64);
        let mut bumped = base.clone();
        bumped[[8, 8, 8]] += 0.5;
        bumped[[3, 12, 7]] += 0.25;
        let a = gaussian_blur(&base, 0.8);
        let b = gaussian_blur(&bumped, 0.8);
        for (&x, &y) in a.iter().zip(b.iter()) {
            assert!(y >= x - 1e-12);
        }
    }
}

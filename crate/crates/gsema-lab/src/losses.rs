//! Objectives: Dice-cross-entropy segmentation loss, cosine similarity,
//! the boundary-aware contrastive loss over a fixed positive/negative pair
//! taxonomy, Fourier high-pass boundary extraction, and the weighted total.
//!
//! Everything here is pure f64 math with hand-derived gradients; the trainer
//! stitches these pieces onto the network's backward pass.

use ndarray::{Array3, Array4};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{FeatureTensor, NetworkKind, Prediction};
use crate::volume::{LabelMask, Variant};

/// Smoothing epsilon used in both the soft-dice ratio denominator and inside
/// the cross-entropy logarithm.
pub const SMOOTH_EPS: f64 = 1e-7;

/// High-pass mask geometry: the centered (DC-at-center) spectrum block of
/// side `ceil(cutoff_fraction * axis_len)` per axis is zeroed, the rest kept.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MaskSpec {
    pub cutoff_fraction: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec { cutoff_fraction: 0.25 }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_fraction > 0.0 && self.cutoff_fraction < 1.0) {
            return Err(Error::config(format!(
                "cutoff_fraction must lie in (0, 1), got {}",
                self.cutoff_fraction
            )));
        }
        Ok(())
    }
}

/// Weights of the total objective: lambda1 scales the four supervised terms,
/// lambda2 the two contrastive terms.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.25, lambda2: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1.is_finite() && self.lambda2.is_finite())
            || self.lambda1 < 0.0
            || self.lambda2 < 0.0
        {
            return Err(Error::config("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Positive and negative feature-vector pairs entering the contrastive loss.
///
/// `build_pair_sets` fills this with the canonical taxonomy (2 positives,
/// 4 negatives, in a documented order); arbitrary pair lists are also valid,
/// which the oracle tests use.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub positives: Vec<(Vec<f64>, Vec<f64>)>,
    pub negatives: Vec<(Vec<f64>, Vec<f64>)>,
}

impl PairSet {
    pub fn n_p(&self) -> usize {
        self.positives.len()
    }

    pub fn n_n(&self) -> usize {
        self.negatives.len()
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(Error::config(
                "contrastive loss needs at least one positive and one negative pair",
            ));
        }
        Ok(())
    }
}

/// Dice-cross-entropy loss of a probability map against a binary mask:
/// `1 - 2*sum(p*y)/(sum(p)+sum(y)+eps) - (1/V)*sum(y*ln(p+eps))`.
pub fn dce_loss(p: &Prediction, y: &LabelMask) -> Result<f64> {
    Ok(dce_terms(p, y)?.0)
}

/// Loss value plus its gradient with respect to every probability voxel.
pub fn dce_loss_grad(p: &Prediction, y: &LabelMask) -> Result<(f64, Array3<f64>)> {
    let (loss, inter, sum_p, sum_y) = dce_terms(p, y)?;
    let v = p.probs.len() as f64;
    let denom = sum_p + sum_y + SMOOTH_EPS;
    let mut grad = Array3::<f64>::zeros(p.probs.dim());
    for ((g, &pv), &yv) in grad.iter_mut().zip(p.probs.iter()).zip(y.data.iter()) {
        let yv = yv as f64;
        *g = -2.0 * (yv * denom - inter) / (denom * denom) - yv / (v * (pv + SMOOTH_EPS));
    }
    Ok((loss, grad))
}

fn dce_terms(p: &Prediction, y: &LabelMask) -> Result<(f64, f64, f64, f64)> {
    if p.probs.dim() != y.data.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs mask {:?}",
            p.probs.dim(),
            y.data.dim()
        )));
    }
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_y = 0.0;
    let mut ce = 0.0;
    for (&pv, &yv) in p.probs.iter().zip(y.data.iter()) {
        if !(0.0..=1.0).contains(&pv) {
            return Err(Error::config(format!(
                "prediction value {pv} outside [0, 1]"
            )));
        }
        let yv = yv as f64;
        inter += pv * yv;
        sum_p += pv;
        sum_y += yv;
        ce -= yv * (pv + SMOOTH_EPS).ln();
    }
    let v = p.probs.len() as f64;
    let loss = 1.0 - 2.0 * inter / (sum_p + sum_y + SMOOTH_EPS) + ce / v;
    Ok((loss, inter, sum_p, sum_y))
}

/// Cosine of the angle between two vectors. Zero-norm input is rejected.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(cosine_parts(u, v)?.0)
}

/// Cosine similarity together with its gradients with respect to u and v.
pub fn cosine_similarity_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (h, nu, nv) = cosine_parts(u, v)?;
    let du: Vec<f64> = u
        .iter()
        .zip(v.iter())
        .map(|(&ui, &vi)| vi / (nu * nv) - h * ui / (nu * nu))
        .collect();
    let dv: Vec<f64> = u
        .iter()
        .zip(v.iter())
        .map(|(&ui, &vi)| ui / (nu * nv) - h * vi / (nv * nv))
        .collect();
    Ok((h, du, dv))
}

fn cosine_parts(u: &[f64], v: &[f64]) -> Result<(f64, f64, f64)> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::shape(format!(
            "cosine over vectors of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok(((dot / (nu * nv)).clamp(-1.0, 1.0), nu, nv))
}

/// Per-axis spectral low-block membership, in unshifted FFT index order.
/// Index k is "low" when its fftshifted position falls inside the centered
/// block of side `ceil(cutoff * n)`.
fn low_band(n: usize, cutoff: f64) -> Vec<bool> {
    let side = ((cutoff * n as f64).ceil() as usize).clamp(1, n);
    let start = (n / 2).saturating_sub(side / 2).min(n - side);
    (0..n)
        .map(|k| {
            let shifted = (k + n / 2) % n;
            shifted >= start && shifted < start + side
        })
        .collect()
}

fn fft_along(
    buf: &mut [Complex<f64>],
    dims: (usize, usize, usize),
    axis: usize,
    fft: &Arc<dyn Fft<f64>>,
) {
    let (d, h, w) = dims;
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    match axis {
        2 => {
            for row in buf.chunks_exact_mut(w) {
                fft.process_with_scratch(row, &mut scratch);
            }
        }
        1 => {
            let mut line = vec![Complex::default(); h];
            for z in 0..d {
                for x in 0..w {
                    for y in 0..h {
                        line[y] = buf[(z * h + y) * w + x];
                    }
                    fft.process_with_scratch(&mut line, &mut scratch);
                    for y in 0..h {
                        buf[(z * h + y) * w + x] = line[y];
                    }
                }
            }
        }
        0 => {
            let mut line = vec![Complex::default(); d];
            for y in 0..h {
                for x in 0..w {
                    for z in 0..d {
                        line[z] = buf[(z * h + y) * w + x];
                    }
                    fft.process_with_scratch(&mut line, &mut scratch);
                    for z in 0..d {
                        buf[(z * h + y) * w + x] = line[z];
                    }
                }
            }
        }
        _ => unreachable!("axis index"),
    }
}

/// High-pass filter a (channels, d, h, w) tensor per channel: FFT, zero the
/// centered low-frequency block, inverse FFT, keep the real part.
///
/// As a real-linear map this operator is self-adjoint (the DFT matrix is
/// symmetric and the mask diagonal is real), so it doubles as its own
/// backward pass: grad_in = boundary_filter(grad_out).
pub fn boundary_filter(x: &Array4<f64>, mask: &MaskSpec) -> Result<Array4<f64>> {
    mask.validate()?;
    let (c, d, h, w) = x.dim();
    let low_d = low_band(d, mask.cutoff_fraction);
    let low_h = low_band(h, mask.cutoff_fraction);
    let low_w = low_band(w, mask.cutoff_fraction);

    let mut planner = FftPlanner::<f64>::new();
    let fwd: Vec<Arc<dyn Fft<f64>>> = [d, h, w]
        .iter()
        .map(|&n| planner.plan_fft_forward(n))
        .collect();
    let inv: Vec<Arc<dyn Fft<f64>>> = [d, h, w]
        .iter()
        .map(|&n| planner.plan_fft_inverse(n))
        .collect();

    let scale = 1.0 / (d * h * w) as f64;
    let mut out = Array4::<f64>::zeros((c, d, h, w));
    let mut buf = vec![Complex::default(); d * h * w];
    for ch in 0..c {
        for (b, &v) in buf.iter_mut().zip(x.index_axis(ndarray::Axis(0), ch).iter()) {
            *b = Complex::new(v, 0.0);
        }
        for axis in 0..3 {
            fft_along(&mut buf, (d, h, w), axis, &fwd[axis]);
        }
        let mut i = 0;
        for kz in 0..d {
            for ky in 0..h {
                for kx in 0..w {
                    if low_d[kz] && low_h[ky] && low_w[kx] {
                        buf[i] = Complex::default();
                    }
                    i += 1;
                }
            }
        }
        for axis in 0..3 {
            fft_along(&mut buf, (d, h, w), axis, &inv[axis]);
        }
        for (o, b) in out
            .index_axis_mut(ndarray::Axis(0), ch)
            .iter_mut()
            .zip(buf.iter())
        {
            *o = b.re * scale;
        }
    }
    Ok(out)
}

/// Boundary features of a latent tensor; provenance tags carry over.
pub fn boundary_extract(z: &FeatureTensor, mask: &MaskSpec) -> Result<FeatureTensor> {
    z.validate()?;
    Ok(FeatureTensor {
        data: boundary_filter(&z.data, mask)?,
        source_network: z.source_network,
        source_variant: z.source_variant,
    })
}

fn expect_tags(t: &FeatureTensor, net: NetworkKind, var: Variant, what: &str) -> Result<()> {
    if t.source_network != net || t.source_variant != var {
        return Err(Error::config(format!(
            "{what} slot expects ({net:?}, {var:?}), got ({:?}, {:?})",
            t.source_network, t.source_variant
        )));
    }
    Ok(())
}

/// Assemble the contrastive pair sets over volume latents and their boundary
/// components. Pair order is part of the contract (`contrastive_slot_grads`
/// relies on it):
///
/// ```text
///   positives: (stu_src, tea_src), (stu_trg, tea_trg)
///   negatives: (stu_src, stu_trg), (tea_src, tea_trg),
///              (stu_src, tea_trg), (tea_src, stu_trg)
/// ```
pub fn build_pair_sets(
    z_stu_s: &FeatureTensor,
    z_stu_t: &FeatureTensor,
    z_tea_s: &FeatureTensor,
    z_tea_t: &FeatureTensor,
    mask: &MaskSpec,
) -> Result<(PairSet, PairSet)> {
    expect_tags(z_stu_s, NetworkKind::Student, Variant::Source, "z_stu_s")?;
    expect_tags(z_stu_t, NetworkKind::Student, Variant::Target, "z_stu_t")?;
    expect_tags(z_tea_s, NetworkKind::Teacher, Variant::Source, "z_tea_s")?;
    expect_tags(z_tea_t, NetworkKind::Teacher, Variant::Target, "z_tea_t")?;
    let dim = z_stu_s.data.dim();
    for t in [z_stu_t, z_tea_s, z_tea_t] {
        if t.data.dim() != dim {
            return Err(Error::shape(format!(
                "feature tensors disagree: {:?} vs {:?}",
                dim,
                t.data.dim()
            )));
        }
    }

    let make = |s_s: &[f64], s_t: &[f64], t_s: &[f64], t_t: &[f64]| PairSet {
        positives: vec![
            (s_s.to_vec(), t_s.to_vec()),
            (s_t.to_vec(), t_t.to_vec()),
        ],
        negatives: vec![
            (s_s.to_vec(), s_t.to_vec()),
            (t_s.to_vec(), t_t.to_vec()),
            (s_s.to_vec(), t_t.to_vec()),
            (t_s.to_vec(), s_t.to_vec()),
        ],
    };

    let zs = [
        z_stu_s.flatten(),
        z_stu_t.flatten(),
        z_tea_s.flatten(),
        z_tea_t.flatten(),
    ];
    let z_set = make(&zs[0], &zs[1], &zs[2], &zs[3]);

    let bs = [
        boundary_extract(z_stu_s, mask)?.flatten(),
        boundary_extract(z_stu_t, mask)?.flatten(),
        boundary_extract(z_tea_s, mask)?.flatten(),
        boundary_extract(z_tea_t, mask)?.flatten(),
    ];
    let b_set = make(&bs[0], &bs[1], &bs[2], &bs[3]);

    Ok((z_set, b_set))
}

/// Contrastive loss from raw similarity values:
/// `-ln( sum(exp(pos)) / (sum(exp(pos)) + sum(exp(neg))) )`.
pub fn contrastive_from_sims(pos: &[f64], neg: &[f64]) -> Result<f64> {
    Ok(sims_loss_terms(pos, neg)?.0)
}

fn sims_loss_terms(pos: &[f64], neg: &[f64]) -> Result<(f64, f64, f64, f64)> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::config(
            "contrastive loss needs at least one positive and one negative pair",
        ));
    }
    let m = pos
        .iter()
        .chain(neg.iter())
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let a: f64 = pos.iter().map(|&s| (s - m).exp()).sum();
    let b: f64 = neg.iter().map(|&s| (s - m).exp()).sum();
    let loss = (a + b).ln() - a.ln();
    Ok((loss, a, b, m))
}

/// Contrastive loss over a pair set (similarity = plain cosine, no
/// temperature).
pub fn contrastive_loss(pairs: &PairSet) -> Result<f64> {
    pairs.check_nonempty()?;
    let pos: Vec<f64> = pairs
        .positives
        .iter()
        .map(|(u, v)| cosine_similarity(u, v))
        .collect::<Result<_>>()?;
    let neg: Vec<f64> = pairs
        .negatives
        .iter()
        .map(|(u, v)| cosine_similarity(u, v))
        .collect::<Result<_>>()?;
    contrastive_from_sims(&pos, &neg)
}

/// Loss plus per-pair gradients, aligned with `positives` / `negatives`.
#[allow(clippy::type_complexity)]
pub fn contrastive_pair_grads(
    pairs: &PairSet,
) -> Result<(f64, Vec<(Vec<f64>, Vec<f64>)>, Vec<(Vec<f64>, Vec<f64>)>)> {
    pairs.check_nonempty()?;
    let mut pos_sims = Vec::with_capacity(pairs.n_p());
    let mut pos_vec_grads = Vec::with_capacity(pairs.n_p());
    for (u, v) in &pairs.positives {
        let (h, du, dv) = cosine_similarity_grad(u, v)?;
        pos_sims.push(h);
        pos_vec_grads.push((du, dv));
    }
    let mut neg_sims = Vec::with_capacity(pairs.n_n());
    let mut neg_vec_grads = Vec::with_capacity(pairs.n_n());
    for (u, v) in &pairs.negatives {
        let (h, du, dv) = cosine_similarity_grad(u, v)?;
        neg_sims.push(h);
        neg_vec_grads.push((du, dv));
    }
    let (loss, a, b, m) = sims_loss_terms(&pos_sims, &neg_sims)?;

    let pos_grads = pos_sims
        .iter()
        .zip(pos_vec_grads)
        .map(|(&s, (du, dv))| {
            let dls = (s - m).exp() * (1.0 / (a + b) - 1.0 / a);
            (scale_vec(du, dls), scale_vec(dv, dls))
        })
        .collect();
    let neg_grads = neg_sims
        .iter()
        .zip(neg_vec_grads)
        .map(|(&s, (du, dv))| {
            let dls = (s - m).exp() / (a + b);
            (scale_vec(du, dls), scale_vec(dv, dls))
        })
        .collect();
    Ok((loss, pos_grads, neg_grads))
}

fn scale_vec(mut v: Vec<f64>, s: f64) -> Vec<f64> {
    for x in &mut v {
        *x *= s;
    }
    v
}

/// Loss plus gradients per original feature slot, assuming the canonical
/// `build_pair_sets` taxonomy. Slot order: stu_src, stu_trg, tea_src, tea_trg.
pub fn contrastive_slot_grads(pairs: &PairSet) -> Result<(f64, [Vec<f64>; 4])> {
    if pairs.n_p() != 2 || pairs.n_n() != 4 {
        return Err(Error::config(format!(
            "slot gradients need the canonical 2/4 taxonomy, got {}/{}",
            pairs.n_p(),
            pairs.n_n()
        )));
    }
    let dim = pairs.positives[0].0.len();
    let (loss, pos, neg) = contrastive_pair_grads(pairs)?;
    let mut slots = [
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
    ];
    let mut add = |slot: usize, g: &[f64]| {
        for (a, b) in slots[slot].iter_mut().zip(g) {
            *a += b;
        }
    };
    // positives: (stu_s, tea_s), (stu_t, tea_t)
    add(0, &pos[0].0);
    add(2, &pos[0].1);
    add(1, &pos[1].0);
    add(3, &pos[1].1);
    // negatives: (stu_s, stu_t), (tea_s, tea_t), (stu_s, tea_t), (tea_s, stu_t)
    add(0, &neg[0].0);
    add(1, &neg[0].1);
    add(2, &neg[1].0);
    add(3, &neg[1].1);
    add(0, &neg[2].0);
    add(3, &neg[2].1);
    add(2, &neg[3].0);
    add(1, &neg[3].1);
    Ok((loss, slots))
}

/// Weighted total objective:
/// `lambda1 * sum(supervised) + lambda2 * (l_c_z + l_c_b)`.
pub fn total_loss(supervised: [f64; 4], l_c_z: f64, l_c_b: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    for v in supervised.iter().chain([l_c_z, l_c_b].iter()) {
        if !v.is_finite() {
            return Err(Error::NonFinite("loss term".into()));
        }
    }
    Ok(w.lambda1 * supervised.iter().sum::<f64>() + w.lambda2 * (l_c_z + l_c_b))
}

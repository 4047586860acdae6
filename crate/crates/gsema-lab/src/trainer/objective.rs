//! Forward and backward of the full weighted objective over one batch.
//!
//! The teacher branch is evaluated forward-only: its losses enter the total
//! and the run log, but no gradient ever flows into teacher parameters. The
//! contrastive terms reach the student only through its bottleneck latents,
//! so their backward pass runs the encoder alone.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::losses::{
    boundary_filter, build_pair_sets, contrastive_slot_grads, dce_loss, dce_loss_grad, total_loss,
    LossWeights, MaskSpec,
};
use crate::model::{flatten_gradient, Network, NetworkKind, ParamVector};
use crate::volume::{DomainSample, Variant};

use super::BaclArm;

/// Losses and student gradients of one batch.
#[derive(Debug, Clone)]
pub struct StepComputation {
    pub l_stu_src: f64,
    pub l_stu_trg: f64,
    pub l_tea_src: f64,
    pub l_tea_trg: f64,
    pub l_c_z: Option<f64>,
    pub l_c_b: Option<f64>,
    pub total: f64,
    /// Gradient of the unweighted student source loss, flattened.
    pub g_src: Vec<f64>,
    /// Gradient of the unweighted student target loss, flattened.
    pub g_trg: Vec<f64>,
    /// Gradient of the weighted total with respect to student parameters.
    pub g_total: Vec<f64>,
}

fn add_assign(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Evaluate the full objective on `pairs` of (source, shifted-target)
/// samples, batch-averaged, and assemble the student gradients.
pub fn objective(
    net: &Network,
    student: &ParamVector,
    teacher: &ParamVector,
    pairs: &[(DomainSample, DomainSample)],
    weights: &LossWeights,
    mask: &MaskSpec,
    bacl: BaclArm,
) -> Result<StepComputation> {
    if pairs.is_empty() {
        return Err(Error::config("objective needs a nonempty batch"));
    }
    weights.validate()?;
    mask.validate()?;
    for (src, trg) in pairs {
        if src.variant != Variant::Source || trg.variant != Variant::Target {
            return Err(Error::config(
                "batch pairs must be (SOURCE, TARGET) in that order",
            ));
        }
    }

    let n = net.param_count();
    let inv_b = 1.0 / pairs.len() as f64;
    let mut l_stu_src = 0.0;
    let mut l_stu_trg = 0.0;
    let mut l_tea_src = 0.0;
    let mut l_tea_trg = 0.0;
    let mut l_c_z = 0.0;
    let mut l_c_b = 0.0;
    let mut g_src = vec![0.0; n];
    let mut g_trg = vec![0.0; n];
    let mut g_con = vec![0.0; n];

    for (src, trg) in pairs {
        let (p_ss, f_ss, cache_ss) =
            net.forward_cached(student, &src.image, NetworkKind::Student, Variant::Source)?;
        let (p_st, f_st, cache_st) =
            net.forward_cached(student, &trg.image, NetworkKind::Student, Variant::Target)?;
        let (p_ts, f_ts) = net.forward(teacher, &src.image, NetworkKind::Teacher, Variant::Source)?;
        let (p_tt, f_tt) = net.forward(teacher, &trg.image, NetworkKind::Teacher, Variant::Target)?;

        let (loss_ss, mut dp_ss) = dce_loss_grad(&p_ss, &src.mask)?;
        let (loss_st, mut dp_st) = dce_loss_grad(&p_st, &trg.mask)?;
        l_stu_src += loss_ss * inv_b;
        l_stu_trg += loss_st * inv_b;
        l_tea_src += dce_loss(&p_ts, &src.mask)? * inv_b;
        l_tea_trg += dce_loss(&p_tt, &trg.mask)? * inv_b;

        dp_ss.mapv_inplace(|v| v * inv_b);
        dp_st.mapv_inplace(|v| v * inv_b);
        let gb = net.backward(student, &cache_ss, Some(&dp_ss), None)?;
        add_assign(&mut g_src, &flatten_gradient(&gb, net.layout())?);
        let gb = net.backward(student, &cache_st, Some(&dp_st), None)?;
        add_assign(&mut g_trg, &flatten_gradient(&gb, net.layout())?);

        if bacl == BaclArm::None {
            continue;
        }

        let latent_dim = f_ss.data.dim();
        let (z_set, b_set) = build_pair_sets(&f_ss, &f_st, &f_ts, &f_tt, mask)?;
        let mut d_lat_ss = Array4::<f64>::zeros(latent_dim);
        let mut d_lat_st = Array4::<f64>::zeros(latent_dim);
        let mut touched = false;

        if bacl.uses_volume() {
            let (lz, slots) = contrastive_slot_grads(&z_set)?;
            l_c_z += lz * inv_b;
            let [s0, s1, _, _] = slots;
            let g0 = Array4::from_shape_vec(latent_dim, s0)
                .map_err(|e| Error::Internal(e.to_string()))?;
            let g1 = Array4::from_shape_vec(latent_dim, s1)
                .map_err(|e| Error::Internal(e.to_string()))?;
            d_lat_ss += &g0;
            d_lat_st += &g1;
            touched = true;
        }
        if bacl.uses_boundary() {
            let (lb, slots) = contrastive_slot_grads(&b_set)?;
            l_c_b += lb * inv_b;
            // The boundary features are A(z) with A the self-adjoint
            // low-frequency filter, so the latent gradient is A applied to
            // the boundary-space gradient.
            let [s0, s1, _, _] = slots;
            let g0 = Array4::from_shape_vec(latent_dim, s0)
                .map_err(|e| Error::Internal(e.to_string()))?;
            let g1 = Array4::from_shape_vec(latent_dim, s1)
                .map_err(|e| Error::Internal(e.to_string()))?;
            d_lat_ss += &boundary_filter(&g0, mask)?;
            d_lat_st += &boundary_filter(&g1, mask)?;
            touched = true;
        }
        if touched {
            d_lat_ss.mapv_inplace(|v| v * inv_b);
            d_lat_st.mapv_inplace(|v| v * inv_b);
            let gb = net.backward(student, &cache_ss, None, Some(&d_lat_ss))?;
            add_assign(&mut g_con, &flatten_gradient(&gb, net.layout())?);
            let gb = net.backward(student, &cache_st, None, Some(&d_lat_st))?;
            add_assign(&mut g_con, &flatten_gradient(&gb, net.layout())?);
        }
    }

    let (z_opt, b_opt) = match bacl {
        BaclArm::None => (None, None),
        BaclArm::BaclV => (Some(l_c_z), None),
        BaclArm::BaclB => (None, Some(l_c_b)),
        BaclArm::Bacl => (Some(l_c_z), Some(l_c_b)),
    };
    let total = total_loss(
        [l_stu_src, l_stu_trg, l_tea_src, l_tea_trg],
        z_opt.unwrap_or(0.0),
        b_opt.unwrap_or(0.0),
        weights,
    )?;

    let mut g_total = vec![0.0; n];
    for i in 0..n {
        g_total[i] = weights.lambda1 * (g_src[i] + g_trg[i]) + weights.lambda2 * g_con[i];
    }

    Ok(StepComputation {
        l_stu_src,
        l_stu_trg,
        l_tea_src,
        l_tea_trg,
        l_c_z: z_opt,
        l_c_b: b_opt,
        total,
        g_src,
        g_trg,
        g_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneConfig;
    use crate::volume::{LabelMask, Volume};
    use ndarray::{Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn tiny_net() -> Network {
        Network::new(BackboneConfig {
            in_shape: [8, 8, 8],
            base_channels: 4,
            depth: 2,
            latent_channels: 2,
        })
        .unwrap()
    }

    fn random_pair(rng: &mut ChaCha20Rng) -> (DomainSample, DomainSample) {
        let mk = |rng: &mut ChaCha20Rng, variant| {
            let img = Array3::from_shape_fn((8, 8, 8), |_| rng.gen_range(0.0f32..1.0));
            let msk = Array3::from_shape_fn((8, 8, 8), |_| (rng.gen::<f32>() < 0.1) as u8);
            DomainSample {
                image: Volume::new(img, [1.0; 3]).unwrap(),
                mask: LabelMask::new(msk).unwrap(),
                domain_id: 0,
                variant,
            }
        };
        (mk(rng, Variant::Source), mk(rng, Variant::Target))
    }

    #[test]
    fn arms_control_which_terms_appear() {
        let net = tiny_net();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let student = net.init_params(1);
        let mut teacher = net.init_params(2);
        // Make the networks differ so the contrastive terms are nontrivial.
        teacher.values[0] += 0.05;
        let batch = vec![random_pair(&mut rng)];
        let w = LossWeights::default();
        let mask = MaskSpec::default();

        let none = objective(&net, &student, &teacher, &batch, &w, &mask, BaclArm::None).unwrap();
        assert!(none.l_c_z.is_none() && none.l_c_b.is_none());
        let v = objective(&net, &student, &teacher, &batch, &w, &mask, BaclArm::BaclV).unwrap();
        assert!(v.l_c_z.is_some() && v.l_c_b.is_none());
        let b = objective(&net, &student, &teacher, &batch, &w, &mask, BaclArm::BaclB).unwrap();
        assert!(b.l_c_z.is_none() && b.l_c_b.is_some());
        let both = objective(&net, &student, &teacher, &batch, &w, &mask, BaclArm::Bacl).unwrap();
        assert!(both.l_c_z.is_some() && both.l_c_b.is_some());

        // Supervised parts are arm-independent.
        assert!((none.l_stu_src - both.l_stu_src).abs() < 1e-15);
        assert!((none.g_src[7] - both.g_src[7]).abs() < 1e-15);
        // And the total follows the weighting.
        let expected = w.lambda1
            * (both.l_stu_src + both.l_stu_trg + both.l_tea_src + both.l_tea_trg)
            + w.lambda2 * (both.l_c_z.unwrap() + both.l_c_b.unwrap());
        assert!((both.total - expected).abs() < 1e-12);
    }

    #[test]
    fn batch_averaging_matches_manual_mean() {
        let net = tiny_net();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let student = net.init_params(3);
        let teacher = net.init_params(4);
        let a = random_pair(&mut rng);
        let b = random_pair(&mut rng);
        let w = LossWeights::default();
        let mask = MaskSpec::default();

        let one_a = objective(&net, &student, &teacher, &[a.clone()], &w, &mask, BaclArm::Bacl)
            .unwrap();
        let one_b = objective(&net, &student, &teacher, &[b.clone()], &w, &mask, BaclArm::Bacl)
            .unwrap();
        let both = objective(&net, &student, &teacher, &[a, b], &w, &mask, BaclArm::Bacl).unwrap();

        assert!((both.l_stu_src - 0.5 * (one_a.l_stu_src + one_b.l_stu_src)).abs() < 1e-12);
        assert!((both.total - 0.5 * (one_a.total + one_b.total)).abs() < 1e-12);
        for i in (0..net.param_count()).step_by(101) {
            let want = 0.5 * (one_a.g_total[i] + one_b.g_total[i]);
            assert!((both.g_total[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_perturbation_changes_loss_but_not_supervised_grads() {
        // The stop-gradient design: teacher parameters move the total (its
        // supervised losses and the contrastive teacher slots), yet g_src
        // and g_trg depend on the student alone.
        let net = tiny_net();
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let student = net.init_params(6);
        let teacher = net.init_params(7);
        let batch = vec![random_pair(&mut rng)];
        let w = LossWeights::default();
        let mask = MaskSpec::default();

        let base = objective(&net, &student, &teacher, &batch, &w, &mask, BaclArm::Bacl).unwrap();
        let mut teacher2 = teacher.clone();
        for v in teacher2.values.iter_mut() {
            *v += 0.01;
        }
        let moved = objective(&net, &student, &teacher2, &batch, &w, &mask, BaclArm::Bacl).unwrap();

        assert!((base.total - moved.total).abs() > 1e-9);
        for i in (0..net.param_count()).step_by(57) {
            assert!((base.g_src[i] - moved.g_src[i]).abs() < 1e-15);
            assert!((base.g_trg[i] - moved.g_trg[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn latent_grad_shape_mismatch_is_caught() {
        // Sanity: boundary filter on a wrong-shape array errors rather than
        // silently broadcasting.
        let mask = MaskSpec::default();
        let x = Array4::<f64>::zeros((2, 4, 4, 4));
        assert!(boundary_filter(&x, &mask).is_ok());
    }
}

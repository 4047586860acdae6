//! Encoder-decoder network over a flat parameter vector.
//!
//! Stages (depth = number of 2x downsamplings, channels in brackets):
//!
//! ```text
//!   stem     conv3 s1   1 -> base                      full res
//!   down_i   conv3 s2   base -> base (last: latent)    res / 2^(i+1)
//!   bottleneck conv3 s1 latent -> latent               res / 2^depth  = latent tap
//!   up_i     upsample x2, conv3 s1 -> base, + skip_i   res / 2^i
//!   head     conv1      base -> 1, sigmoid             full res
//! ```
//!
//! Skip connections are additive. All activations are SiLU so the whole map
//! is smooth, which keeps finite-difference gradient verification tight.
//! The backward pass accepts gradient seeds at the probability head and/or
//! directly at the latent tap, so contrastive objectives on the bottleneck
//! can be backpropagated without touching the decoder.

use std::sync::Arc;

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{
    conv3d, conv3d_backward, sigmoid, silu_backward, silu_map, upsample2, upsample2_backward,
    ConvSpec,
};
use super::{
    BackboneConfig, FeatureTensor, GradBuffer, LayoutEntry, NetworkKind, ParamLayout, ParamVector,
    Prediction,
};
use crate::error::{Error, Result};
use crate::volume::{Variant, Volume};

/// One conv stage: layout indices of its weight/bias entries plus geometry.
#[derive(Debug, Clone)]
struct Stage {
    spec: ConvSpec,
    w_idx: usize,
    b_idx: usize,
}

/// Stateless network definition; parameters are supplied per call.
#[derive(Debug, Clone)]
pub struct Network {
    config: BackboneConfig,
    layout: Arc<ParamLayout>,
    stem: Stage,
    down: Vec<Stage>,
    bottleneck: Stage,
    up: Vec<Stage>,
    head: Stage,
}

/// Intermediate activations retained for the backward pass.
pub struct ForwardCache {
    input: Array4<f64>,
    /// enc_pre[0] is the stem pre-activation, enc_pre[i+1] that of down_i.
    enc_pre: Vec<Array4<f64>>,
    /// enc_act[i] is a_i; a_0 full res, a_depth the bottleneck input.
    enc_act: Vec<Array4<f64>>,
    bott_pre: Array4<f64>,
    latent: Array4<f64>,
    /// dec_u[i]: post-upsample input of up_i; dec_pre[i]: its pre-activation.
    dec_u: Vec<Array4<f64>>,
    dec_pre: Vec<Array4<f64>>,
    /// Final full-res feature map entering the head.
    h0: Array4<f64>,
    probs: Array3<f64>,
}

impl Network {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let bc = config.base_channels;
        let lc = config.latent_channels;
        let depth = config.depth;

        let mut entries = Vec::new();
        let mut offset = 0usize;
        let mut push = |entries: &mut Vec<LayoutEntry>, name: String, spec: &ConvSpec| -> (usize, usize) {
            let w_idx = entries.len();
            entries.push(LayoutEntry {
                name: format!("{name}.weight"),
                offset,
                len: spec.weight_len(),
                shape: vec![spec.out_ch, spec.in_ch, spec.kernel, spec.kernel, spec.kernel],
            });
            offset += spec.weight_len();
            let b_idx = entries.len();
            entries.push(LayoutEntry {
                name: format!("{name}.bias"),
                offset,
                len: spec.out_ch,
                shape: vec![spec.out_ch],
            });
            offset += spec.out_ch;
            (w_idx, b_idx)
        };

        let stem_spec = ConvSpec::k3(1, bc, 1);
        let (w, b) = push(&mut entries, "stem".into(), &stem_spec);
        let stem = Stage { spec: stem_spec, w_idx: w, b_idx: b };

        let mut down = Vec::with_capacity(depth);
        for i in 0..depth {
            let out_ch = if i == depth - 1 { lc } else { bc };
            let spec = ConvSpec::k3(bc, out_ch, 2);
            let (w, b) = push(&mut entries, format!("down{i}"), &spec);
            down.push(Stage { spec, w_idx: w, b_idx: b });
        }

        let bott_spec = ConvSpec::k3(lc, lc, 1);
        let (w, b) = push(&mut entries, "bottleneck".into(), &bott_spec);
        let bottleneck = Stage { spec: bott_spec, w_idx: w, b_idx: b };

        let mut up = Vec::with_capacity(depth);
        for i in 0..depth {
            let in_ch = if i == depth - 1 { lc } else { bc };
            let spec = ConvSpec::k3(in_ch, bc, 1);
            let (w, b) = push(&mut entries, format!("up{i}"), &spec);
            up.push(Stage { spec, w_idx: w, b_idx: b });
        }

        let head_spec = ConvSpec::k1(bc, 1);
        let (w, b) = push(&mut entries, "head".into(), &head_spec);
        let head = Stage { spec: head_spec, w_idx: w, b_idx: b };

        Ok(Network {
            config,
            layout: Arc::new(ParamLayout::new(entries)),
            stem,
            down,
            bottleneck,
            up,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }

    /// He-style initialization. Values are rounded through f32 so checkpoint
    /// serialization (f32 blob) of a fresh vector is lossless.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut values = vec![0.0f64; self.layout.total_len()];
        let stages = self.stages();
        for stage in stages {
            let entry = &self.layout.entries()[stage.w_idx];
            let fan_in = stage.spec.in_ch * stage.spec.kernel.pow(3);
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid std");
            for v in values[entry.offset..entry.offset + entry.len].iter_mut() {
                *v = (dist.sample(&mut rng) as f32) as f64;
            }
            // biases stay zero
        }
        ParamVector { values }
    }

    fn stages(&self) -> Vec<&Stage> {
        let mut s = vec![&self.stem];
        s.extend(self.down.iter());
        s.push(&self.bottleneck);
        s.extend(self.up.iter());
        s.push(&self.head);
        s
    }

    fn check_inputs(&self, params: &ParamVector, image: &Volume) -> Result<()> {
        if params.len() != self.layout.total_len() {
            return Err(Error::config(format!(
                "parameter vector has {} values, layout expects {}",
                params.len(),
                self.layout.total_len()
            )));
        }
        if image.shape() != self.config.in_shape {
            return Err(Error::config(format!(
                "input shape {:?} does not match configured {:?}",
                image.shape(),
                self.config.in_shape
            )));
        }
        Ok(())
    }

    fn conv(&self, stage: &Stage, params: &ParamVector, x: &Array4<f64>) -> Array4<f64> {
        let w = params.slice(&self.layout.entries()[stage.w_idx]);
        let b = params.slice(&self.layout.entries()[stage.b_idx]);
        conv3d(x, w, b, &stage.spec)
    }

    fn run(
        &self,
        params: &ParamVector,
        image: &Volume,
        network: NetworkKind,
        variant: Variant,
        keep_cache: bool,
    ) -> Result<(Prediction, FeatureTensor, Option<ForwardCache>)> {
        self.check_inputs(params, image)?;
        let [d, h, w] = self.config.in_shape;
        let input = {
            let data: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
            Array4::from_shape_vec((1, d, h, w), data).expect("input size")
        };

        let depth = self.config.depth;
        let mut enc_pre = Vec::with_capacity(depth + 1);
        let mut enc_act = Vec::with_capacity(depth + 1);

        let stem_pre = self.conv(&self.stem, params, &input);
        enc_act.push(silu_map(&stem_pre));
        enc_pre.push(stem_pre);
        for i in 0..depth {
            let pre = self.conv(&self.down[i], params, &enc_act[i]);
            enc_act.push(silu_map(&pre));
            enc_pre.push(pre);
        }

        let bott_pre = self.conv(&self.bottleneck, params, &enc_act[depth]);
        let latent = silu_map(&bott_pre);

        let mut dec_u = vec![Array4::zeros((0, 0, 0, 0)); depth];
        let mut dec_pre = vec![Array4::zeros((0, 0, 0, 0)); depth];
        let mut hh = latent.clone();
        for i in (0..depth).rev() {
            let u = upsample2(&hh);
            let pre = self.conv(&self.up[i], params, &u);
            hh = silu_map(&pre) + &enc_act[i];
            if keep_cache {
                dec_u[i] = u;
                dec_pre[i] = pre;
            }
        }

        let logits = self.conv(&self.head, params, &hh);
        let probs_flat: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();
        let probs = Array3::from_shape_vec((d, h, w), probs_flat).expect("probs size");

        let prediction = Prediction { probs: probs.clone() };
        let features = FeatureTensor {
            data: latent.clone(),
            source_network: network,
            source_variant: variant,
        };

        let cache = if keep_cache {
            Some(ForwardCache {
                input,
                enc_pre,
                enc_act,
                bott_pre,
                latent,
                dec_u,
                dec_pre,
                h0: hh,
                probs,
            })
        } else {
            None
        };
        Ok((prediction, features, cache))
    }

    /// Inference pass: probabilities + bottleneck features.
    pub fn forward(
        &self,
        params: &ParamVector,
        image: &Volume,
        network: NetworkKind,
        variant: Variant,
    ) -> Result<(Prediction, FeatureTensor)> {
        let (p, f, _) = self.run(params, image, network, variant, false)?;
        Ok((p, f))
    }

    /// Forward pass retaining activations for `backward`.
    pub fn forward_cached(
        &self,
        params: &ParamVector,
        image: &Volume,
        network: NetworkKind,
        variant: Variant,
    ) -> Result<(Prediction, FeatureTensor, ForwardCache)> {
        let (p, f, c) = self.run(params, image, network, variant, true)?;
        Ok((p, f, c.expect("cache requested")))
    }

    /// Backward pass. `d_probs` seeds the gradient at the sigmoid output,
    /// `d_latent` seeds it directly at the bottleneck tap; at least one must
    /// be present. Returns per-entry parameter gradients.
    pub fn backward(
        &self,
        params: &ParamVector,
        cache: &ForwardCache,
        d_probs: Option<&Array3<f64>>,
        d_latent: Option<&Array4<f64>>,
    ) -> Result<GradBuffer> {
        if d_probs.is_none() && d_latent.is_none() {
            return Err(Error::Internal(
                "backward needs a gradient seed at probs or latent".into(),
            ));
        }
        let depth = self.config.depth;
        let mut grads = GradBuffer::new(&self.layout);
        let mut dskip: Vec<Option<Array4<f64>>> = vec![None; depth];

        // Decoder walk (head -> latent), only when the objective touches probs.
        let mut d_latent_total: Array4<f64> = match d_probs {
            Some(dp) => {
                let (d, h, w) = cache.probs.dim();
                let mut dlogits = Array4::<f64>::zeros((1, d, h, w));
                for ((dl, &p), &dpv) in dlogits
                    .iter_mut()
                    .zip(cache.probs.iter())
                    .zip(dp.iter())
                {
                    *dl = dpv * p * (1.0 - p);
                }
                let (mut dh, dw_head, db_head) =
                    conv3d_backward(&cache.h0, &dlogits, params.slice(&self.layout.entries()[self.head.w_idx]), &self.head.spec);
                grads.add(self.head.w_idx, &dw_head);
                grads.add(self.head.b_idx, &db_head);

                for i in 0..depth {
                    dskip[i] = Some(dh.clone());
                    let dt = silu_backward(&cache.dec_pre[i], &dh);
                    let (du, dw, db) = conv3d_backward(
                        &cache.dec_u[i],
                        &dt,
                        params.slice(&self.layout.entries()[self.up[i].w_idx]),
                        &self.up[i].spec,
                    );
                    grads.add(self.up[i].w_idx, &dw);
                    grads.add(self.up[i].b_idx, &db);
                    dh = upsample2_backward(&du);
                }
                dh
            }
            None => {
                // Decoder untouched: its parameters get zero gradient.
                grads.add(self.head.w_idx, &vec![0.0; self.head.spec.weight_len()]);
                grads.add(self.head.b_idx, &vec![0.0; self.head.spec.out_ch]);
                for i in 0..depth {
                    grads.add(self.up[i].w_idx, &vec![0.0; self.up[i].spec.weight_len()]);
                    grads.add(self.up[i].b_idx, &vec![0.0; self.up[i].spec.out_ch]);
                }
                Array4::zeros(cache.latent.dim())
            }
        };
        if let Some(dl) = d_latent {
            if dl.dim() != d_latent_total.dim() {
                return Err(Error::shape(format!(
                    "latent gradient shape {:?} != latent shape {:?}",
                    dl.dim(),
                    d_latent_total.dim()
                )));
            }
            d_latent_total += dl;
        }

        // Bottleneck.
        let dz = silu_backward(&cache.bott_pre, &d_latent_total);
        let (mut da, dw, db) = conv3d_backward(
            &cache.enc_act[depth],
            &dz,
            params.slice(&self.layout.entries()[self.bottleneck.w_idx]),
            &self.bottleneck.spec,
        );
        grads.add(self.bottleneck.w_idx, &dw);
        grads.add(self.bottleneck.b_idx, &db);

        // Encoder walk (deep -> shallow), folding in skip gradients.
        for level in (1..=depth).rev() {
            let dpre = silu_backward(&cache.enc_pre[level], &da);
            let (mut dx, dw, db) = conv3d_backward(
                &cache.enc_act[level - 1],
                &dpre,
                params.slice(&self.layout.entries()[self.down[level - 1].w_idx]),
                &self.down[level - 1].spec,
            );
            grads.add(self.down[level - 1].w_idx, &dw);
            grads.add(self.down[level - 1].b_idx, &db);
            if let Some(ds) = &dskip[level - 1] {
                dx += ds;
            }
            da = dx;
        }

        let dpre = silu_backward(&cache.enc_pre[0], &da);
        let (_, dw, db) = conv3d_backward(
            &cache.input,
            &dpre,
            params.slice(&self.layout.entries()[self.stem.w_idx]),
            &self.stem.spec,
        );
        grads.add(self.stem.w_idx, &dw);
        grads.add(self.stem.b_idx, &db);

        Ok(grads)
    }
}

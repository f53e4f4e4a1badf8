//! Probabilistic encoder, decoder, and classification head.
//!
//! The default backbone is a small stack of stride-2 convolutions feeding two
//! linear maps that emit the posterior mean and log-variance; the decoder
//! mirrors it with transposed convolutions and a sigmoid output so
//! reconstructions stay in `[0, 1]`. The classifier is a linear map on the
//! latent code, so the softmax in the loss supplies its nonlinearity.
//! An external feature-extractor hook can replace the convolutional encoder
//! for full-scale backbones; hook features are treated as frozen.
//!
//! Forward passes are read-only with respect to parameters and safe to run
//! concurrently; updates require exclusive access.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PosteriorBatch;
use crate::nn::ops::{
    linear_backward, linear_forward, relu_backward, relu_inplace, sigmoid_backward,
    sigmoid_inplace, Conv2d, ConvT2d,
};
use crate::nn::{GradBuffer, ParamGroup, ParamLayout, ParameterSet};

/// Log-variance is clamped to this range before exponentiation.
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Initial bias of the log-variance head. The posterior starts
/// near-deterministic (sigma ~ 0.22) so early latent samples track the mean
/// instead of prior-scale noise.
pub const LOGVAR_INIT_BIAS: f64 = -3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    SmallCnn,
    ExternalResidualHook,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// Draw `z` through the reparameterization `mu + sigma * eps`.
    Sampled,
    /// Use `z = mu` exactly (evaluation, and the fixed-latent ablation).
    FixedMu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub image_side: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Output channels of each stride-2 encoder block; the decoder mirrors.
    pub conv_channels: Vec<usize>,
    pub backbone: Backbone,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 256,
            image_side: 32,
            channels: 3,
            num_classes: 5,
            conv_channels: vec![16, 32, 64],
            backbone: Backbone::SmallCnn,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.channels == 0 || self.image_side == 0 {
            return Err(Error::invalid("image shape must be positive"));
        }
        if self.conv_channels.is_empty() {
            return Err(Error::invalid("need at least one conv block"));
        }
        let down = 1usize << self.conv_channels.len();
        if self.image_side % down != 0 || self.image_side / down == 0 {
            return Err(Error::invalid(format!(
                "image side {} not divisible by 2^{} blocks",
                self.image_side,
                self.conv_channels.len()
            )));
        }
        Ok(())
    }
}

/// Frozen external feature extractor standing in for a pretrained backbone.
/// Features feed the posterior heads; no gradient flows into the hook.
pub trait BackboneHook: Send + Sync {
    fn name(&self) -> &str;
    fn feature_dim(&self) -> usize;
    /// `[B, C, H, W]` images to `[B, feature_dim]` features.
    fn features(&self, x: &Array4<f64>) -> Array2<f64>;
}

/// Reconstruction, latent sample, posterior, and class logits of one forward
/// pass.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub x_prime: Array4<f64>,
    pub z: Array2<f64>,
    pub posterior: PosteriorBatch,
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Ids {
    enc_conv: Vec<LinearIds>,
    enc_mu: LinearIds,
    enc_logvar: LinearIds,
    dec_fc: LinearIds,
    dec_tconv: Vec<LinearIds>,
    head: LinearIds,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
    ids: Ids,
    convs: Vec<Conv2d>,
    tconvs: Vec<ConvT2d>,
    /// Side length of the innermost feature map.
    inner_side: usize,
    /// Flattened encoder feature dimension.
    feat_dim: usize,
    hook: Option<Box<dyn BackboneHook>>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.params.layout.total_len)
            .finish()
    }
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache {
    x: Array4<f64>,
    /// Per conv block: stacked im2col matrix and post-relu output.
    enc_cols: Vec<Array2<f64>>,
    enc_acts: Vec<Array4<f64>>,
    /// Hook features when running with an external backbone.
    hook_feats: Option<Array2<f64>>,
    flat: Array2<f64>,
    logvar_raw: Array2<f64>,
    mu: Array2<f64>,
    logvar: Array2<f64>,
    eps: Option<Array2<f64>>,
    z: Array2<f64>,
    dec: Option<DecCache>,
    logits: Array2<f64>,
    mode: LatentMode,
}

struct DecCache {
    fc_act: Array2<f64>,
    /// Input (post-activation) and output (post-activation) of each tconv.
    tconv_ins: Vec<Array4<f64>>,
    tconv_outs: Vec<Array4<f64>>,
}

/// Gradients of the objective with respect to forward outputs; `None` terms
/// are absent from the objective.
#[derive(Default)]
pub struct OutputGrads {
    pub d_x_prime: Option<Array4<f64>>,
    pub d_logits: Option<Array2<f64>>,
    pub d_mu: Option<Array2<f64>>,
    pub d_logvar: Option<Array2<f64>>,
}

/// `z = mu + exp(0.5 * logvar) * eps` for a single posterior.
pub fn reparameterize(
    posterior: &crate::losses::LatentPosterior,
    noise: &[f64],
) -> Result<Vec<f64>> {
    if noise.len() != posterior.dim() {
        return Err(Error::shape(
            format!("noise of length {}", posterior.dim()),
            format!("{}", noise.len()),
        ));
    }
    Ok(posterior
        .mu
        .iter()
        .zip(posterior.logvar.iter())
        .zip(noise.iter())
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect())
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.backbone == Backbone::ExternalResidualHook {
            return Err(Error::invalid(
                "external_residual_hook backbone requires Model::with_backbone_hook",
            ));
        }
        Self::build(config, seed, None)
    }

    pub fn with_backbone_hook(
        config: ModelConfig,
        seed: u64,
        hook: Box<dyn BackboneHook>,
    ) -> Result<Self> {
        if config.backbone != Backbone::ExternalResidualHook {
            return Err(Error::invalid(
                "with_backbone_hook requires backbone = external_residual_hook",
            ));
        }
        Self::build(config, seed, Some(hook))
    }

    fn build(config: ModelConfig, seed: u64, hook: Option<Box<dyn BackboneHook>>) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let n_blocks = config.conv_channels.len();
        let inner_side = config.image_side >> n_blocks;
        let c_last = *config.conv_channels.last().unwrap();
        let feat_dim = match &hook {
            Some(h) => h.feature_dim(),
            None => c_last * inner_side * inner_side,
        };

        let mut convs = Vec::new();
        let mut enc_conv = Vec::new();
        if hook.is_none() {
            let mut side = config.image_side;
            let mut c_in = config.channels;
            for (i, &c_out) in config.conv_channels.iter().enumerate() {
                let conv = Conv2d::new(c_in, c_out, 4, 2, 1, side, side);
                let w = layout.push(
                    format!("encoder.conv{i}.weight"),
                    ParamGroup::Encoder,
                    &conv.weight_shape(),
                );
                let b = layout.push(
                    format!("encoder.conv{i}.bias"),
                    ParamGroup::Encoder,
                    &[c_out],
                );
                enc_conv.push(LinearIds { w, b });
                convs.push(conv);
                side /= 2;
                c_in = c_out;
            }
        }
        let enc_mu = LinearIds {
            w: layout.push(
                "encoder.fc_mu.weight",
                ParamGroup::Encoder,
                &[config.latent_dim, feat_dim],
            ),
            b: layout.push("encoder.fc_mu.bias", ParamGroup::Encoder, &[config.latent_dim]),
        };
        let enc_logvar = LinearIds {
            w: layout.push(
                "encoder.fc_logvar.weight",
                ParamGroup::Encoder,
                &[config.latent_dim, feat_dim],
            ),
            b: layout.push(
                "encoder.fc_logvar.bias",
                ParamGroup::Encoder,
                &[config.latent_dim],
            ),
        };

        let dec_feat = c_last * inner_side * inner_side;
        let dec_fc = LinearIds {
            w: layout.push(
                "decoder.fc.weight",
                ParamGroup::Decoder,
                &[dec_feat, config.latent_dim],
            ),
            b: layout.push("decoder.fc.bias", ParamGroup::Decoder, &[dec_feat]),
        };
        let mut tconvs = Vec::new();
        let mut dec_tconv = Vec::new();
        {
            let mut side = inner_side;
            let mut c_in = c_last;
            // walk channel list backwards down to the image channels
            let mut outs: Vec<usize> = config.conv_channels[..n_blocks - 1].to_vec();
            outs.reverse();
            outs.push(config.channels);
            for (i, &c_out) in outs.iter().enumerate() {
                let tconv = ConvT2d::new(c_in, c_out, 4, 2, 1, side, side);
                let w = layout.push(
                    format!("decoder.tconv{i}.weight"),
                    ParamGroup::Decoder,
                    &tconv.weight_shape(),
                );
                let b = layout.push(
                    format!("decoder.tconv{i}.bias"),
                    ParamGroup::Decoder,
                    &[c_out],
                );
                dec_tconv.push(LinearIds { w, b });
                tconvs.push(tconv);
                side *= 2;
                c_in = c_out;
            }
        }
        let head = LinearIds {
            w: layout.push(
                "head.fc.weight",
                ParamGroup::Head,
                &[config.num_classes, config.latent_dim],
            ),
            b: layout.push("head.fc.bias", ParamGroup::Head, &[config.num_classes]),
        };

        let layout = Arc::new(layout);
        let mut params = ParameterSet::init_uniform(layout, seed);
        params.slice_mut(enc_logvar.b).fill(LOGVAR_INIT_BIAS);
        Ok(Self {
            config,
            params,
            ids: Ids {
                enc_conv,
                enc_mu,
                enc_logvar,
                dec_fc,
                dec_tconv,
                head,
            },
            convs,
            tconvs,
            inner_side,
            feat_dim,
            hook,
        })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.params.layout
    }

    pub fn hook_name(&self) -> Option<&str> {
        self.hook.as_deref().map(|h| h.name())
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.config.channels || h != self.config.image_side || w != self.config.image_side {
            return Err(Error::shape(
                format!(
                    "[B, {}, {}, {}]",
                    self.config.channels, self.config.image_side, self.config.image_side
                ),
                format!("{:?}", x.dim()),
            ));
        }
        Ok(())
    }

    /// Posterior parameters for a batch of images. Deterministic.
    pub fn encode(&self, x: &Array4<f64>) -> Result<PosteriorBatch> {
        let (flat, _, _, _) = self.encode_stages(x)?;
        Ok(self.posterior_from_flat(&flat).0)
    }

    fn posterior_from_flat(&self, flat: &Array2<f64>) -> (PosteriorBatch, Array2<f64>) {
        let mu = linear_forward(
            flat.view(),
            self.params.view2(self.ids.enc_mu.w),
            self.params.view1(self.ids.enc_mu.b),
        );
        let logvar_raw = linear_forward(
            flat.view(),
            self.params.view2(self.ids.enc_logvar.w),
            self.params.view1(self.ids.enc_logvar.b),
        );
        let logvar = logvar_raw.mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        (
            PosteriorBatch { mu, logvar },
            logvar_raw,
        )
    }

    #[allow(clippy::type_complexity)]
    fn encode_stages(
        &self,
        x: &Array4<f64>,
    ) -> Result<(Array2<f64>, Vec<Array2<f64>>, Vec<Array4<f64>>, Option<Array2<f64>>)> {
        self.check_input(x)?;
        let b_n = x.dim().0;
        if let Some(hook) = &self.hook {
            let feats = hook.features(x);
            if feats.dim() != (b_n, self.feat_dim) {
                return Err(Error::shape(
                    format!("[{}, {}] hook features", b_n, self.feat_dim),
                    format!("{:?}", feats.dim()),
                ));
            }
            return Ok((feats.clone(), Vec::new(), Vec::new(), Some(feats)));
        }
        let mut cols_all = Vec::with_capacity(self.convs.len());
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for (conv, ids) in self.convs.iter().zip(&self.ids.enc_conv) {
            let (mut y, cols) = conv.forward(
                &cur,
                self.params.view_mat(ids.w),
                self.params.view1(ids.b),
            );
            relu_inplace(&mut y);
            cols_all.push(cols);
            acts.push(y.clone());
            cur = y;
        }
        let flat = cur
            .into_shape_with_order((b_n, self.feat_dim))
            .expect("contiguous conv output");
        Ok((flat, cols_all, acts, None))
    }

    /// Decode latent codes into `[0, 1]` images. Deterministic.
    pub fn decode(&self, z: &Array2<f64>) -> Result<Array4<f64>> {
        let (out, _) = self.decode_stages(z)?;
        Ok(out)
    }

    fn decode_stages(&self, z: &Array2<f64>) -> Result<(Array4<f64>, DecCache)> {
        if z.ncols() != self.config.latent_dim {
            return Err(Error::shape(
                format!("[B, {}] latent", self.config.latent_dim),
                format!("{:?}", z.dim()),
            ));
        }
        let b_n = z.nrows();
        let mut fc = linear_forward(
            z.view(),
            self.params.view2(self.ids.dec_fc.w),
            self.params.view1(self.ids.dec_fc.b),
        );
        relu_inplace(&mut fc);
        let c_last = *self.config.conv_channels.last().unwrap();
        let mut cur = fc
            .clone()
            .into_shape_with_order((b_n, c_last, self.inner_side, self.inner_side))
            .expect("contiguous fc output");
        let mut ins = Vec::with_capacity(self.tconvs.len());
        let mut outs = Vec::with_capacity(self.tconvs.len());
        let last = self.tconvs.len() - 1;
        for (i, (tconv, ids)) in self.tconvs.iter().zip(&self.ids.dec_tconv).enumerate() {
            ins.push(cur.clone());
            let mut y = tconv.forward(
                &cur,
                self.params.view_mat(ids.w),
                self.params.view1(ids.b),
            );
            if i == last {
                sigmoid_inplace(&mut y);
            } else {
                relu_inplace(&mut y);
            }
            outs.push(y.clone());
            cur = y;
        }
        let x_prime = cur;
        Ok((
            x_prime,
            DecCache {
                fc_act: fc,
                tconv_ins: ins,
                tconv_outs: outs,
            },
        ))
    }

    /// Class logits from latent codes. Deterministic.
    pub fn classify(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.config.latent_dim {
            return Err(Error::shape(
                format!("[B, {}] latent", self.config.latent_dim),
                format!("{:?}", z.dim()),
            ));
        }
        Ok(linear_forward(
            z.view(),
            self.params.view2(self.ids.head.w),
            self.params.view1(self.ids.head.b),
        ))
    }

    /// Full pipeline; draws noise from `rng` when `mode` is `Sampled`.
    pub fn forward(
        &self,
        x: &Array4<f64>,
        mode: LatentMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutputs> {
        let eps = match mode {
            LatentMode::Sampled => Some(self.draw_noise(x.dim().0, rng)),
            LatentMode::FixedMu => None,
        };
        let cache = self.forward_cached(x, mode, eps, true)?;
        Ok(Self::outputs_from_cache(&cache))
    }

    pub fn draw_noise(&self, batch: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let normal = StandardNormal;
        Array2::from_shape_simple_fn((batch, self.config.latent_dim), || normal.sample(rng))
    }

    fn outputs_from_cache(cache: &ForwardCache) -> ForwardOutputs {
        ForwardOutputs {
            x_prime: cache
                .dec
                .as_ref()
                .map(|d| d.tconv_outs.last().unwrap().clone())
                .unwrap_or_else(|| Array4::zeros((0, 0, 0, 0))),
            z: cache.z.clone(),
            posterior: PosteriorBatch {
                mu: cache.mu.clone(),
                logvar: cache.logvar.clone(),
            },
            logits: cache.logits.clone(),
        }
    }

    /// Forward pass retaining everything backward needs. `eps` must be
    /// `Some` iff `mode` is `Sampled`; `run_decoder=false` skips
    /// reconstruction (objectives without the pixel term).
    pub fn forward_cached(
        &self,
        x: &Array4<f64>,
        mode: LatentMode,
        eps: Option<Array2<f64>>,
        run_decoder: bool,
    ) -> Result<ForwardCache> {
        let (flat, enc_cols, enc_acts, hook_feats) = self.encode_stages(x)?;
        let (posterior, logvar_raw) = self.posterior_from_flat(&flat);
        let z = match mode {
            LatentMode::Sampled => {
                let eps_ref = eps
                    .as_ref()
                    .ok_or_else(|| Error::invalid("sampled mode requires noise"))?;
                if eps_ref.dim() != posterior.mu.dim() {
                    return Err(Error::shape(
                        format!("{:?} noise", posterior.mu.dim()),
                        format!("{:?}", eps_ref.dim()),
                    ));
                }
                let mut z = posterior.mu.clone();
                for ((zv, &lv), &e) in z
                    .iter_mut()
                    .zip(posterior.logvar.iter())
                    .zip(eps_ref.iter())
                {
                    *zv += (0.5 * lv).exp() * e;
                }
                z
            }
            LatentMode::FixedMu => posterior.mu.clone(),
        };
        let dec = if run_decoder {
            Some(self.decode_stages(&z)?.1)
        } else {
            None
        };
        let logits = self.classify(&z)?;
        Ok(ForwardCache {
            x: x.clone(),
            enc_cols,
            enc_acts,
            hook_feats,
            flat,
            logvar_raw,
            mu: posterior.mu,
            logvar: posterior.logvar,
            eps: match mode {
                LatentMode::Sampled => eps,
                LatentMode::FixedMu => None,
            },
            z,
            dec,
            logits,
            mode,
        })
    }

    pub fn outputs(&self, cache: &ForwardCache) -> ForwardOutputs {
        Self::outputs_from_cache(cache)
    }

    /// Backpropagate the given output gradients into a parameter gradient
    /// buffer.
    pub fn backward(&self, cache: &ForwardCache, grads: &OutputGrads) -> GradBuffer {
        let mut gbuf = GradBuffer::zeros(self.params.layout.clone());
        let b_n = cache.x.dim().0;
        let mut dz = Array2::<f64>::zeros((b_n, self.config.latent_dim));

        if let Some(d_logits) = &grads.d_logits {
            let (mut dw, mut db) = (
                Array2::<f64>::zeros((self.config.num_classes, self.config.latent_dim)),
                Array1::<f64>::zeros(self.config.num_classes),
            );
            let dx = linear_backward(
                cache.z.view(),
                d_logits.view(),
                self.params.view2(self.ids.head.w),
                dw.view_mut(),
                db.view_mut(),
            );
            gbuf.view_mut2(self.ids.head.w).assign(&dw);
            gbuf.view_mut1(self.ids.head.b).assign(&db);
            dz += &dx;
        }

        if let Some(d_x_prime) = &grads.d_x_prime {
            let dec = cache
                .dec
                .as_ref()
                .expect("reconstruction gradient without decoder pass");
            let mut da = d_x_prime.clone();
            let last = self.tconvs.len() - 1;
            sigmoid_backward(&mut da, &dec.tconv_outs[last]);
            for i in (0..self.tconvs.len()).rev() {
                let ids = self.ids.dec_tconv[i];
                let mut dw = Array2::<f64>::zeros((
                    self.params.layout.entries[ids.w].shape[0],
                    self.params.layout.entries[ids.w].shape[1..].iter().product(),
                ));
                let mut db =
                    Array1::<f64>::zeros(self.params.layout.entries[ids.b].shape[0]);
                let dx = self.tconvs[i].backward(
                    &dec.tconv_ins[i],
                    &da,
                    self.params.view_mat(ids.w),
                    dw.view_mut(),
                    db.view_mut(),
                );
                gbuf.view_mut_mat(ids.w).assign(&dw);
                gbuf.view_mut1(ids.b).assign(&db);
                da = dx;
                if i > 0 {
                    relu_backward(&mut da, &dec.tconv_ins[i]);
                }
            }
            // through the reshape and the fc relu
            let mut d_fc = da
                .into_shape_with_order((b_n, dec.fc_act.ncols()))
                .expect("contiguous tconv grad");
            relu_backward(&mut d_fc, &dec.fc_act);
            let ids = self.ids.dec_fc;
            let mut dw = Array2::<f64>::zeros((dec.fc_act.ncols(), self.config.latent_dim));
            let mut db = Array1::<f64>::zeros(dec.fc_act.ncols());
            let dx = linear_backward(
                cache.z.view(),
                d_fc.view(),
                self.params.view2(ids.w),
                dw.view_mut(),
                db.view_mut(),
            );
            gbuf.view_mut2(ids.w).assign(&dw);
            gbuf.view_mut1(ids.b).assign(&db);
            dz += &dx;
        }

        // through the reparameterization into (mu, logvar)
        let mut d_mu = dz.clone();
        let mut d_logvar = match cache.mode {
            LatentMode::Sampled => {
                let eps = cache.eps.as_ref().expect("sampled cache keeps noise");
                let mut d = dz;
                for ((dv, &lv), &e) in d
                    .iter_mut()
                    .zip(cache.logvar.iter())
                    .zip(eps.iter())
                {
                    *dv *= 0.5 * (0.5 * lv).exp() * e;
                }
                d
            }
            LatentMode::FixedMu => Array2::zeros(d_mu.dim()),
        };
        if let Some(extra) = &grads.d_mu {
            d_mu += extra;
        }
        if let Some(extra) = &grads.d_logvar {
            d_logvar += extra;
        }
        // clamp gate on logvar
        d_logvar.zip_mut_with(&cache.logvar_raw, |d, &raw| {
            if !(LOGVAR_MIN..=LOGVAR_MAX).contains(&raw) {
                *d = 0.0;
            }
        });

        // posterior heads back to the shared feature vector
        let mut d_flat = Array2::<f64>::zeros((b_n, self.feat_dim));
        for (ids, dout) in [
            (self.ids.enc_mu, &d_mu),
            (self.ids.enc_logvar, &d_logvar),
        ] {
            let mut dw = Array2::<f64>::zeros((self.config.latent_dim, self.feat_dim));
            let mut db = Array1::<f64>::zeros(self.config.latent_dim);
            let dx = linear_backward(
                cache.flat.view(),
                dout.view(),
                self.params.view2(ids.w),
                dw.view_mut(),
                db.view_mut(),
            );
            gbuf.view_mut2(ids.w).assign(&dw);
            gbuf.view_mut1(ids.b).assign(&db);
            d_flat += &dx;
        }

        if cache.hook_feats.is_some() {
            // external backbones are frozen feature extractors
            return gbuf;
        }

        // back through the conv stack
        let c_last = *self.config.conv_channels.last().unwrap();
        let mut da = d_flat
            .into_shape_with_order((b_n, c_last, self.inner_side, self.inner_side))
            .expect("contiguous flat grad");
        for i in (0..self.convs.len()).rev() {
            relu_backward(&mut da, &cache.enc_acts[i]);
            let ids = self.ids.enc_conv[i];
            let mut dw = Array2::<f64>::zeros((
                self.params.layout.entries[ids.w].shape[0],
                self.params.layout.entries[ids.w].shape[1..].iter().product(),
            ));
            let mut db = Array1::<f64>::zeros(self.params.layout.entries[ids.b].shape[0]);
            let dx = self.convs[i].backward(
                &da,
                &cache.enc_cols[i],
                self.params.view_mat(ids.w),
                dw.view_mut(),
                db.view_mut(),
            );
            gbuf.view_mut_mat(ids.w).assign(&dw);
            gbuf.view_mut1(ids.b).assign(&db);
            da = dx;
        }
        gbuf
    }

    /// Evaluation-path logits: encode, take `z = mu`, classify. Skips the
    /// decoder entirely.
    pub fn logits_eval(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        let posterior = self.encode(x)?;
        self.classify(&posterior.mu)
    }

    /// Replace parameter values (shape-checked through the shared layout).
    pub fn set_params(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.params.layout.total_len {
            return Err(Error::shape(
                format!("{} parameter values", self.params.layout.total_len),
                format!("{}", values.len()),
            ));
        }
        self.params.values = values;
        Ok(())
    }
}

/// Mean over the batch axis of per-example posterior KL — convenience for
/// diagnostics.
pub fn posterior_mean_abs(batch: &PosteriorBatch) -> f64 {
    batch.mu.mapv(f64::abs).mean_axis(Axis(0)).unwrap().sum()
}

/// Accuracy of argmax predictions against labels.
pub fn accuracy(logits: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let correct = logits
        .outer_iter()
        .zip(labels.iter())
        .filter(|(row, &y)| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

//! Temporal alignment planning and the pre-fusion projectors.
//!
//! Every encoder is driven to the same output frame count `t`, then each
//! feature is pooled (or resampled, or convolved) to the shared `h x w` grid
//! and mapped through a per-encoder linear layer to the LLM width `d`. The
//! result is one `(l, d)` token matrix per encoder with `l = t*h*w`.

mod resampler;

pub use resampler::{resampler_flops, resampler_param_count, Resampler, ResamplerCache};

use crate::encoders::EncoderProfile;
use crate::error::{MervError, Result};
use crate::numerics::{
    adaptive_avg_pool2d, adaptive_avg_pool3d, adaptive_avg_pool3d_backward, conv3d_simple,
    conv3d_simple_backward, gelu, gelu_backward, matmul, matmul_backward, zero_pad_time, Scalar,
    Tensor,
};
use crate::param::{Param, ParamGroup, Parameters};
use crate::rng;
use serde::{Deserialize, Serialize};

/// Per-encoder input frame counts that make every output length equal `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPlan {
    pub target_t: usize,
    pub input_frames: Vec<PlanEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub encoder: String,
    pub input_frames: usize,
}

/// Chooses each encoder's input frame count so its output length is `t`.
/// Fails, naming the encoder, when the downsampling factor cannot reach `t`.
pub fn plan_temporal_alignment(profiles: &[EncoderProfile], t: usize) -> Result<AlignmentPlan> {
    if profiles.is_empty() {
        return Err(MervError::alignment("empty ensemble".to_string()));
    }
    let mut input_frames = Vec::with_capacity(profiles.len());
    for p in profiles {
        let aligned = p.with_target_frames(t)?;
        input_frames.push(PlanEntry {
            encoder: p.name.clone(),
            input_frames: aligned.input_frames,
        });
    }
    Ok(AlignmentPlan {
        target_t: t,
        input_frames,
    })
}

/// Applies the plan, returning profiles rescaled to the target `t`.
pub fn align_profiles(profiles: &[EncoderProfile], t: usize) -> Result<Vec<EncoderProfile>> {
    profiles.iter().map(|p| p.with_target_frames(t)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorVariant {
    Avg2d,
    Avg3d,
    AttnResampler,
    Conv2d,
    Conv3d,
}

impl ProjectorVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjectorVariant::Avg2d => "avg2d",
            ProjectorVariant::Avg3d => "avg3d",
            ProjectorVariant::AttnResampler => "attn_resampler",
            ProjectorVariant::Conv2d => "conv2d",
            ProjectorVariant::Conv3d => "conv3d",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplerConfig {
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        ResamplerConfig { heads: 1, mlp_ratio: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub blocks_pre: usize,
    pub blocks_post: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        ConvConfig { blocks_pre: 1, blocks_post: 1 }
    }
}

fn default_seed() -> u64 {
    0
}

/// Hyperparameters of the pre-fusion projector (serialized as JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub variant: ProjectorVariant,
    pub target_h: usize,
    pub target_w: usize,
    /// Output width `d` (the LLM dimension).
    pub llm_dim: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub resampler: ResamplerConfig,
    #[serde(default)]
    pub conv: ConvConfig,
    /// 3D-Avg halves the frame axis internally; with this flag the pooled
    /// frames are duplicated back to `t`, otherwise the output keeps
    /// `(t/2)*h*w` tokens.
    #[serde(default)]
    pub avg3d_restore_frames: bool,
}

impl ProjectorConfig {
    pub fn new(variant: ProjectorVariant, h: usize, w: usize, d: usize, seed: u64) -> Self {
        ProjectorConfig {
            variant,
            target_h: h,
            target_w: w,
            llm_dim: d,
            seed,
            resampler: ResamplerConfig::default(),
            conv: ConvConfig::default(),
            avg3d_restore_frames: false,
        }
    }

    pub fn validate(&self, profiles: &[EncoderProfile]) -> Result<()> {
        if self.target_h == 0 || self.target_w == 0 || self.llm_dim == 0 {
            return Err(MervError::config(
                "projector target grid and llm_dim must be >= 1".to_string(),
            ));
        }
        for p in profiles {
            if self.target_h > p.out_h || self.target_w > p.out_w {
                return Err(MervError::config(format!(
                    "projector target {}x{} exceeds encoder {} grid {}x{}",
                    self.target_h, self.target_w, p.name, p.out_h, p.out_w
                )));
            }
            if self.variant == ProjectorVariant::AttnResampler && p.dim % self.resampler.heads != 0
            {
                return Err(MervError::config(format!(
                    "encoder {} width {} not divisible by {} resampler heads",
                    p.name, p.dim, self.resampler.heads
                )));
            }
        }
        Ok(())
    }

    /// Output frame count after the internal stage.
    pub fn effective_t(&self, t: usize) -> usize {
        match self.variant {
            ProjectorVariant::Avg3d if !self.avg3d_restore_frames => (t / 2).max(1),
            _ => t,
        }
    }

    /// Token count `l` per video for output length `t`.
    pub fn tokens_per_video(&self, t: usize) -> usize {
        self.effective_t(t) * self.target_h * self.target_w
    }
}

/// Exact parameter breakdown for a projector over an ensemble. The linear
/// dimension-matching maps contribute `d * sum_e d_e`; pooling variants have
/// no internal weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorParamCount {
    pub dim_matching: u64,
    pub variant_internal: u64,
}

impl ProjectorParamCount {
    pub fn total(self) -> u64 {
        self.dim_matching + self.variant_internal
    }
}

pub fn count_projector_params(
    cfg: &ProjectorConfig,
    profiles: &[EncoderProfile],
) -> ProjectorParamCount {
    let d = cfg.llm_dim as u64;
    let dim_matching: u64 = profiles.iter().map(|p| p.dim as u64 * d).sum();
    let n_latents = (cfg.target_h * cfg.target_w) as u64;
    let variant_internal: u64 = match cfg.variant {
        ProjectorVariant::Avg2d | ProjectorVariant::Avg3d => 0,
        ProjectorVariant::AttnResampler => profiles
            .iter()
            .map(|p| resampler_param_count(p.dim as u64, n_latents, cfg.resampler.mlp_ratio as u64))
            .sum(),
        ProjectorVariant::Conv2d => profiles
            .iter()
            .map(|p| {
                let de = p.dim as u64;
                (cfg.conv.blocks_pre + cfg.conv.blocks_post) as u64 * (9 * de * de + de)
            })
            .sum(),
        ProjectorVariant::Conv3d => profiles
            .iter()
            .map(|p| {
                let de = p.dim as u64;
                2 * 3 * 3 * de * de + de
            })
            .sum(),
    };
    ProjectorParamCount {
        dim_matching,
        variant_internal,
    }
}

/// One channel-preserving conv layer (`kt x 3 x 3`), optionally with GELU.
#[derive(Clone, Debug)]
struct ConvBlock<S> {
    kernel: Param<S>,
    bias: Param<S>,
    activated: bool,
}

impl<S: Scalar> ConvBlock<S> {
    fn new(kt: usize, dim: usize, activated: bool, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let fan_in = (kt * 9 * dim) as f64;
        let kernel = rng::randn_tensor::<S>(vec![kt, 3, 3, dim, dim], 1.0 / fan_in.sqrt(), rng);
        ConvBlock {
            kernel: Param::new(kernel),
            bias: Param::new(Tensor::zeros(vec![dim])),
            activated,
        }
    }

    fn forward(&self, x: &Tensor<S>, padding: [usize; 3]) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut preact = conv3d_simple(x, &self.kernel.value, [1, 1, 1], padding)?;
        let d = self.bias.value.shape()[0];
        let bd = self.bias.value.data().to_vec();
        for (i, v) in preact.data_mut().iter_mut().enumerate() {
            *v += bd[i % d];
        }
        let out = if self.activated { gelu(&preact) } else { preact.clone() };
        Ok((out, preact))
    }

    fn backward(
        &mut self,
        grad: &Tensor<S>,
        x: &Tensor<S>,
        preact: &Tensor<S>,
        padding: [usize; 3],
    ) -> Result<Tensor<S>> {
        let d_pre = if self.activated {
            gelu_backward(grad, preact)?
        } else {
            grad.clone()
        };
        let d = self.bias.value.shape()[0];
        let mut db = vec![S::zero(); d];
        for (i, &g) in d_pre.data().iter().enumerate() {
            db[i % d] += g;
        }
        self.bias.accumulate(&Tensor::new(vec![d], db)?);
        let (dx, dk) = conv3d_simple_backward(&d_pre, x, &self.kernel.value, [1, 1, 1], padding)?;
        self.kernel.accumulate(&dk);
        Ok(dx)
    }
}

/// Learnable state for one encoder's projection path.
#[derive(Clone, Debug)]
struct EncoderProjector<S> {
    /// Dimension-matching map `W_e`, `(d_e, d)`, no bias.
    w: Param<S>,
    resampler: Option<Resampler<S>>,
    pre_blocks: Vec<ConvBlock<S>>,
    post_blocks: Vec<ConvBlock<S>>,
    conv3d_block: Option<ConvBlock<S>>,
}

/// The pre-fusion projector for a whole ensemble.
#[derive(Clone, Debug)]
pub struct Projector<S = f32> {
    cfg: ProjectorConfig,
    profiles: Vec<EncoderProfile>,
    encoders: Vec<EncoderProjector<S>>,
}

/// Intermediate activations needed by `backward`.
#[derive(Clone, Debug)]
pub struct PrefuseCache<S> {
    /// `(l, d_e)` input to `W_e`.
    stage_out: Tensor<S>,
    variant: VariantCache<S>,
}

#[derive(Clone, Debug)]
enum VariantCache<S> {
    /// Pooling paths: no internal parameters upstream of `W_e`.
    Plain,
    Attn {
        frames: Vec<ResamplerCache<S>>,
    },
    Conv2d {
        pre: Vec<(Tensor<S>, Tensor<S>)>,
        pool_input_shape: Vec<usize>,
        post: Vec<(Tensor<S>, Tensor<S>)>,
    },
    Conv3d {
        padded: Tensor<S>,
        conv_out_shape: Vec<usize>,
    },
}

impl<S: Scalar> Projector<S> {
    /// Builds per-encoder weights for already-aligned profiles (all `out_t`
    /// equal to the plan's `t`).
    pub fn new(cfg: ProjectorConfig, profiles: &[EncoderProfile]) -> Result<Self> {
        cfg.validate(profiles)?;
        if let Some(t) = profiles.first().map(|p| p.out_t) {
            if profiles.iter().any(|p| p.out_t != t) {
                return Err(MervError::alignment(
                    "profiles disagree on output length; align them first".to_string(),
                ));
            }
            if cfg.variant == ProjectorVariant::Avg3d && cfg.avg3d_restore_frames && t % 2 != 0 {
                return Err(MervError::config(
                    "avg3d with frame restoration needs an even t".to_string(),
                ));
            }
        }
        let mut encoders = Vec::with_capacity(profiles.len());
        for p in profiles {
            let mut rng = rng::seeded_rng(cfg.seed, &format!("projector/{}", p.name));
            let w = Param::new(rng::randn_tensor::<S>(
                vec![p.dim, cfg.llm_dim],
                1.0 / (p.dim as f64).sqrt(),
                &mut rng,
            ));
            let mut ep = EncoderProjector {
                w,
                resampler: None,
                pre_blocks: Vec::new(),
                post_blocks: Vec::new(),
                conv3d_block: None,
            };
            match cfg.variant {
                ProjectorVariant::AttnResampler => {
                    ep.resampler = Some(Resampler::new(
                        p.dim,
                        cfg.target_h * cfg.target_w,
                        cfg.resampler.heads,
                        cfg.resampler.mlp_ratio,
                        &mut rng,
                    )?);
                }
                ProjectorVariant::Conv2d => {
                    ep.pre_blocks = (0..cfg.conv.blocks_pre)
                        .map(|_| ConvBlock::new(1, p.dim, true, &mut rng))
                        .collect();
                    ep.post_blocks = (0..cfg.conv.blocks_post)
                        .map(|_| ConvBlock::new(1, p.dim, true, &mut rng))
                        .collect();
                }
                ProjectorVariant::Conv3d => {
                    ep.conv3d_block = Some(ConvBlock::new(2, p.dim, false, &mut rng));
                }
                _ => {}
            }
            encoders.push(ep);
        }
        Ok(Projector {
            cfg,
            profiles: profiles.to_vec(),
            encoders,
        })
    }

    pub fn cfg(&self) -> &ProjectorConfig {
        &self.cfg
    }

    pub fn profiles(&self) -> &[EncoderProfile] {
        &self.profiles
    }

    pub fn n_encoders(&self) -> usize {
        self.encoders.len()
    }

    /// `W_e` for tests and checkpointing.
    pub fn weight(&self, idx: usize) -> &Param<S> {
        &self.encoders[idx].w
    }

    pub fn weight_mut(&mut self, idx: usize) -> &mut Param<S> {
        &mut self.encoders[idx].w
    }

    /// Token rows in each aligned feature.
    pub fn aligned_rows(&self) -> usize {
        self.cfg.tokens_per_video(self.profiles[0].out_t)
    }

    /// Projects one encoder's `(t_e, h_e, w_e, d_e)` feature to `(l, d)`:
    /// `x_e = flatten(P(v_e)) W_e`.
    pub fn prefuse(&self, feature: &Tensor<S>, idx: usize) -> Result<(Tensor<S>, PrefuseCache<S>)> {
        let p = &self.profiles[idx];
        if feature.shape() != p.out_shape() {
            return Err(MervError::dimension(format!(
                "encoder {} feature has shape {:?}, profile says {:?}",
                p.name,
                feature.shape(),
                p.out_shape()
            )));
        }
        let ep = &self.encoders[idx];
        let (h, w) = (self.cfg.target_h, self.cfg.target_w);
        let de = p.dim;
        let t = p.out_t;

        let (stage_out, variant) = match self.cfg.variant {
            ProjectorVariant::Avg2d => {
                let pooled = adaptive_avg_pool2d(feature, h, w)?;
                (pooled.reshape(vec![t * h * w, de])?, VariantCache::Plain)
            }
            ProjectorVariant::Avg3d => {
                let t2 = (t / 2).max(1);
                let pooled = adaptive_avg_pool3d(feature, t2, h, w)?;
                if self.cfg.avg3d_restore_frames {
                    // duplicate each pooled frame so the token count is t*h*w
                    let frame = h * w * de;
                    let mut data = Vec::with_capacity(t * frame);
                    for f in 0..t2 {
                        let block = &pooled.data()[f * frame..(f + 1) * frame];
                        data.extend_from_slice(block);
                        data.extend_from_slice(block);
                    }
                    (
                        Tensor::new(vec![t * h * w, de], data)?,
                        VariantCache::Plain,
                    )
                } else {
                    (pooled.reshape(vec![t2 * h * w, de])?, VariantCache::Plain)
                }
            }
            ProjectorVariant::AttnResampler => {
                let rs = ep.resampler.as_ref().expect("resampler built");
                let tokens = p.out_h * p.out_w;
                let mut rows = Vec::with_capacity(t * h * w * de);
                let mut frames = Vec::with_capacity(t);
                for f in 0..t {
                    let frame = Tensor::new(
                        vec![tokens, de],
                        feature.data()[f * tokens * de..(f + 1) * tokens * de].to_vec(),
                    )?;
                    let (out, cache) = rs.forward(&frame)?;
                    rows.extend_from_slice(out.data());
                    frames.push(cache);
                }
                (
                    Tensor::new(vec![t * h * w, de], rows)?,
                    VariantCache::Attn { frames },
                )
            }
            ProjectorVariant::Conv2d => {
                let mut x = feature.clone();
                let mut pre = Vec::with_capacity(ep.pre_blocks.len());
                for b in &ep.pre_blocks {
                    let (y, preact) = b.forward(&x, [0, 1, 1])?;
                    pre.push((x, preact));
                    x = y;
                }
                let pool_input_shape = x.shape().to_vec();
                let mut y = adaptive_avg_pool2d(&x, h, w)?;
                let mut post = Vec::with_capacity(ep.post_blocks.len());
                for b in &ep.post_blocks {
                    let (z, preact) = b.forward(&y, [0, 1, 1])?;
                    post.push((y, preact));
                    y = z;
                }
                (
                    y.reshape(vec![t * h * w, de])?,
                    VariantCache::Conv2d {
                        pre,
                        pool_input_shape,
                        post,
                    },
                )
            }
            ProjectorVariant::Conv3d => {
                let b = ep.conv3d_block.as_ref().expect("conv3d block built");
                let padded = zero_pad_time(feature, 1, 0)?;
                let (conv_out, _) = b.forward(&padded, [0, 1, 1])?;
                let conv_out_shape = conv_out.shape().to_vec();
                let pooled = adaptive_avg_pool2d(&conv_out, h, w)?;
                (
                    pooled.reshape(vec![t * h * w, de])?,
                    VariantCache::Conv3d {
                        padded,
                        conv_out_shape,
                    },
                )
            }
        };

        let aligned = matmul(&stage_out, &ep.w.value)?;
        Ok((aligned, PrefuseCache { stage_out, variant }))
    }

    /// Accumulates gradients for `W_e` and the variant's internal weights
    /// given the gradient of the `(l, d)` aligned feature.
    pub fn backward(&mut self, idx: usize, grad: &Tensor<S>, cache: &PrefuseCache<S>) -> Result<()> {
        let ep = &mut self.encoders[idx];
        let (d_stage, dw) = matmul_backward(grad, &cache.stage_out, &ep.w.value)?;
        ep.w.accumulate(&dw);

        match &cache.variant {
            VariantCache::Plain => {}
            VariantCache::Attn { frames } => {
                let rs = ep.resampler.as_mut().expect("resampler built");
                let n_lat = self.cfg.target_h * self.cfg.target_w;
                let de = self.profiles[idx].dim;
                for (f, cache_f) in frames.iter().enumerate() {
                    let g = Tensor::new(
                        vec![n_lat, de],
                        d_stage.data()[f * n_lat * de..(f + 1) * n_lat * de].to_vec(),
                    )?;
                    rs.backward(&g, cache_f)?;
                }
            }
            VariantCache::Conv2d {
                pre,
                pool_input_shape,
                post,
            } => {
                let p = &self.profiles[idx];
                let mut g = d_stage.clone().reshape(vec![
                    p.out_t,
                    self.cfg.target_h,
                    self.cfg.target_w,
                    p.dim,
                ])?;
                for (b, (input, preact)) in ep.post_blocks.iter_mut().zip(post.iter()).rev() {
                    g = b.backward(&g, input, preact, [0, 1, 1])?;
                }
                g = adaptive_avg_pool3d_backward(&g, pool_input_shape)?;
                for (b, (input, preact)) in ep.pre_blocks.iter_mut().zip(pre.iter()).rev() {
                    g = b.backward(&g, input, preact, [0, 1, 1])?;
                }
            }
            VariantCache::Conv3d {
                padded,
                conv_out_shape,
            } => {
                let p = &self.profiles[idx];
                let g = d_stage.clone().reshape(vec![
                    p.out_t,
                    self.cfg.target_h,
                    self.cfg.target_w,
                    p.dim,
                ])?;
                let g = adaptive_avg_pool3d_backward(&g, conv_out_shape)?;
                let b = ep.conv3d_block.as_mut().expect("conv3d block built");
                // the block is unactivated, so the preact argument is unused
                b.backward(&g, padded, &g, [0, 1, 1])?;
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Parameters<S> for Projector<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamGroup, &str, &mut Param<S>)) {
        for (ep, p) in self.encoders.iter_mut().zip(&self.profiles) {
            let g = ParamGroup::Projector;
            f(g, &format!("projector.{}.w", p.name), &mut ep.w);
            if let Some(rs) = ep.resampler.as_mut() {
                let prefix = format!("projector.{}.resampler", p.name);
                rs.visit_params(&mut |grp, name, param| {
                    f(grp, &format!("{prefix}.{name}"), param)
                });
            }
            for (bi, b) in ep.pre_blocks.iter_mut().enumerate() {
                f(g, &format!("projector.{}.pre{bi}.kernel", p.name), &mut b.kernel);
                f(g, &format!("projector.{}.pre{bi}.bias", p.name), &mut b.bias);
            }
            for (bi, b) in ep.post_blocks.iter_mut().enumerate() {
                f(g, &format!("projector.{}.post{bi}.kernel", p.name), &mut b.kernel);
                f(g, &format!("projector.{}.post{bi}.bias", p.name), &mut b.bias);
            }
            if let Some(b) = ep.conv3d_block.as_mut() {
                f(g, &format!("projector.{}.conv3d.kernel", p.name), &mut b.kernel);
                f(g, &format!("projector.{}.conv3d.bias", p.name), &mut b.bias);
            }
        }
    }
}

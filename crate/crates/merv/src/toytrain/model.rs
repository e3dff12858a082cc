//! The assembled pipeline: mock encoders -> pre-fusion projection -> fusion
//! -> visual prefix + text -> causal LM.

use crate::alignment::{align_profiles, plan_temporal_alignment, PrefuseCache, Projector, ProjectorConfig};
use crate::encoders::{
    make_mock_encoder, uniform_sample_frames, EncoderProfile, MockEncoder, MockEncoderKind,
    VideoTensor,
};
use crate::error::{MervError, Result};
use crate::fusion::{AttentionTable, Fusion, FusionCache, FusionConfig, FusionStrategy};
use crate::numerics::{Scalar, Tensor};
use crate::param::{Param, ParamGroup, Parameters};
use crate::toytrain::lm::{LmCache, ToyLlm, ToyLlmConfig};
use crate::toytrain::synth::SynthSample;
use serde::{Deserialize, Serialize};

/// Everything needed to rebuild a pipeline deterministically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub profiles: Vec<EncoderProfile>,
    pub encoder_kinds: Vec<MockEncoderKind>,
    pub encoder_seed: u64,
    pub target_t: usize,
    pub projector: ProjectorConfig,
    pub fusion: FusionConfig,
    pub llm: ToyLlmConfig,
    pub llm_seed: u64,
}

impl PipelineConfig {
    /// Two-encoder toy setup: a temporal-kind and a spatial-kind mock over a
    /// small grid, 64 visual tokens, 64-wide LLM.
    pub fn toy(seed: u64) -> Self {
        use crate::alignment::ProjectorVariant;
        PipelineConfig {
            profiles: vec![
                EncoderProfile::toy("toy_temporal", 4, 8, 32),
                EncoderProfile::toy("toy_spatial", 4, 8, 32),
            ],
            encoder_kinds: vec![MockEncoderKind::Temporal, MockEncoderKind::Spatial],
            encoder_seed: seed,
            target_t: 4,
            projector: ProjectorConfig::new(ProjectorVariant::Avg2d, 4, 4, 64, seed),
            fusion: FusionConfig::new(FusionStrategy::CrossAttn, seed),
            llm: ToyLlmConfig::default(),
            llm_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() {
            return Err(MervError::config("pipeline needs at least one encoder".to_string()));
        }
        if self.profiles.len() != self.encoder_kinds.len() {
            return Err(MervError::config(format!(
                "{} profiles but {} encoder kinds",
                self.profiles.len(),
                self.encoder_kinds.len()
            )));
        }
        for p in &self.profiles {
            p.validate()?;
        }
        let aligned = align_profiles(&self.profiles, self.target_t)?;
        self.projector.validate(&aligned)?;
        self.fusion.validate(self.profiles.len())?;
        self.llm.validate()?;
        if self.projector.llm_dim != self.llm.dim {
            return Err(MervError::config(format!(
                "projector output width {} != llm width {}",
                self.projector.llm_dim, self.llm.dim
            )));
        }
        let l = self.projector.tokens_per_video(self.target_t);
        let tokens = self.fusion.output_tokens(self.profiles.len(), l);
        if tokens + 4 > self.llm.context {
            return Err(MervError::config(format!(
                "context {} too small for {tokens} visual tokens plus prompt",
                self.llm.context
            )));
        }
        Ok(())
    }
}

pub struct Model<S: Scalar = f32> {
    cfg: PipelineConfig,
    encoders: Vec<MockEncoder>,
    pub projector: Projector<S>,
    pub fusion: Fusion<S>,
    pub llm: ToyLlm<S>,
}

pub struct PipelineForward<S> {
    pub logits: Tensor<S>,
    pub weights: Option<Vec<S>>,
    prefuse_caches: Vec<PrefuseCache<S>>,
    fusion_cache: FusionCache<S>,
    lm_cache: LmCache<S>,
}

#[derive(Clone, Copy, Debug)]
pub struct SampleResult {
    pub loss: f64,
    pub correct: bool,
}

/// Builds encoders, projector, fusion, and LLM from one config:
/// encode -> prefuse -> fuse -> prepend visual tokens -> causal LM.
pub fn build_pipeline<S: Scalar>(cfg: PipelineConfig) -> Result<Model<S>> {
    cfg.validate()?;
    let aligned = align_profiles(&cfg.profiles, cfg.target_t)?;
    let encoders: Vec<MockEncoder> = aligned
        .iter()
        .zip(&cfg.encoder_kinds)
        .map(|(p, &kind)| make_mock_encoder(p.clone(), cfg.encoder_seed, kind))
        .collect::<Result<_>>()?;
    let projector = Projector::new(cfg.projector.clone(), &aligned)?;
    let fusion = Fusion::new(cfg.fusion.clone(), aligned.len(), cfg.projector.llm_dim)?;
    let llm = ToyLlm::new(cfg.llm, cfg.llm_seed)?;
    Ok(Model {
        cfg,
        encoders,
        projector,
        fusion,
        llm,
    })
}

impl<S: Scalar> Model<S> {
    pub fn cfg(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn encoders(&self) -> &[MockEncoder] {
        &self.encoders
    }

    pub fn plan(&self) -> Result<crate::alignment::AlignmentPlan> {
        plan_temporal_alignment(&self.cfg.profiles, self.cfg.target_t)
    }

    pub fn visual_tokens(&self) -> usize {
        self.cfg
            .fusion
            .output_tokens(self.encoders.len(), self.projector.aligned_rows())
    }

    /// Per-encoder features for one clip (each encoder resamples the frames
    /// it needs).
    pub fn encode_features(&self, video: &VideoTensor) -> Result<Vec<Tensor<S>>> {
        let work: Vec<usize> = (0..self.encoders.len()).collect();
        let results = crate::threads::ordered_map(work, |i| {
            let enc = &self.encoders[i];
            let clip = uniform_sample_frames(video, enc.profile().input_frames)?;
            enc.encode::<S>(&clip)
        });
        results.into_iter().collect()
    }

    pub fn forward(&self, video: &VideoTensor, prompt: &[u16]) -> Result<PipelineForward<S>> {
        let features = self.encode_features(video)?;
        let mut aligned = Vec::with_capacity(features.len());
        let mut prefuse_caches = Vec::with_capacity(features.len());
        for (i, f) in features.iter().enumerate() {
            let (x, cache) = self.projector.prefuse(f, i)?;
            aligned.push(x);
            prefuse_caches.push(cache);
        }
        let (fused, fusion_cache) = self.fusion.fuse(&aligned)?;
        let (logits, lm_cache) = self.llm.forward(&fused.tokens, prompt)?;
        Ok(PipelineForward {
            logits,
            weights: fused.weights,
            prefuse_caches,
            fusion_cache,
            lm_cache,
        })
    }

    /// Cross-entropy on the answer token only (the position after the final
    /// prompt token), plus the argmax correctness at that position.
    pub fn answer_loss(
        &self,
        forward: &PipelineForward<S>,
        sample: &SynthSample,
    ) -> Result<(f64, bool, Tensor<S>)> {
        let logits = &forward.logits;
        let seq = logits.shape()[0];
        let vocab = logits.shape()[1];
        let pos = seq - 1;
        let target = sample.answer as usize;
        if target >= vocab {
            return Err(MervError::dimension(format!(
                "answer token {target} outside vocab {vocab}"
            )));
        }
        let row: Vec<f64> = logits.data()[pos * vocab..(pos + 1) * vocab]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        let loss = log_z - row[target];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        let mut d_logits = Tensor::<S>::zeros(vec![seq, vocab]);
        for j in 0..vocab {
            let p = ((row[j] - log_z).exp()) - if j == target { 1.0 } else { 0.0 };
            d_logits.data_mut()[pos * vocab + j] = S::from_f64(p);
        }
        Ok((loss, argmax == target, d_logits))
    }

    /// Forward + backward for one sample; gradients are scaled by `scale`
    /// (1/batch for batch means) and accumulated into the parameters.
    pub fn train_step_sample(&mut self, sample: &SynthSample, scale: f64) -> Result<SampleResult> {
        let forward = self.forward(&sample.video, &sample.prompt)?;
        let (loss, correct, d_logits) = self.answer_loss(&forward, sample)?;
        let d_logits = d_logits.scale(S::from_f64(scale));
        let d_visual = self.llm.backward(&d_logits, &forward.lm_cache)?;
        let d_features = self.fusion.backward(&d_visual, &forward.fusion_cache)?;
        for (i, (df, cache)) in d_features.iter().zip(&forward.prefuse_caches).enumerate() {
            self.projector.backward(i, df, cache)?;
        }
        Ok(SampleResult { loss, correct })
    }

    /// Inference-only loss/accuracy/weights for one sample.
    pub fn eval_sample(&self, sample: &SynthSample) -> Result<(f64, bool, Option<Vec<f64>>)> {
        let forward = self.forward(&sample.video, &sample.prompt)?;
        let (loss, correct, _) = self.answer_loss(&forward, sample)?;
        let weights = forward
            .weights
            .map(|w| w.iter().map(|v| v.as_f64()).collect());
        Ok((loss, correct, weights))
    }

    /// Mixture weights per video, for the encoder-activation analysis. Only
    /// strategies that produce weights are supported.
    pub fn extract_attention_weights(
        &self,
        videos: &[(String, VideoTensor)],
    ) -> Result<AttentionTable> {
        let names: Vec<String> = self.encoders.iter().map(|e| e.profile().name.clone()).collect();
        let mut table = AttentionTable::new(names);
        for (id, video) in videos {
            let features = self.encode_features(video)?;
            let mut aligned = Vec::with_capacity(features.len());
            for (i, f) in features.iter().enumerate() {
                let (x, _) = self.projector.prefuse(f, i)?;
                aligned.push(x);
            }
            let (fused, _) = self.fusion.fuse(&aligned)?;
            let weights = fused.weights.ok_or_else(|| {
                MervError::config(format!(
                    "strategy {} does not produce mixture weights",
                    self.cfg.fusion.strategy.as_str()
                ))
            })?;
            table.push(id.clone(), weights.iter().map(|v| v.as_f64()).collect());
        }
        Ok(table)
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, _, p| p.zero_grad());
    }

    pub fn zero_grads_of(&mut self, groups: &[ParamGroup]) {
        self.visit_params(&mut |g, _, p| {
            if groups.contains(&g) {
                p.zero_grad();
            }
        });
    }

    /// `(group, name)` pairs in visitation order.
    pub fn param_names(&mut self) -> Vec<(ParamGroup, String)> {
        let mut names = Vec::new();
        self.visit_params(&mut |g, name, _| names.push((g, name.to_string())));
        names
    }

    /// Runs `f` on the named parameter; `None` if it does not exist.
    pub fn with_param<R>(&mut self, name: &str, f: impl FnOnce(&mut Param<S>) -> R) -> Option<R> {
        let mut f = Some(f);
        let mut out = None;
        self.visit_params(&mut |_, n, p| {
            if n == name {
                if let Some(f) = f.take() {
                    out = Some(f(p));
                }
            }
        });
        out
    }

    /// Copies of the current values of one group, for bitwise freeze checks.
    pub fn snapshot(&mut self, group: ParamGroup) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |g, name, p| {
            if g == group {
                out.push((name.to_string(), p.value.clone()));
            }
        });
        out
    }
}

impl<S: Scalar> Parameters<S> for Model<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamGroup, &str, &mut Param<S>)) {
        self.projector.visit_params(f);
        self.fusion.visit_params(f);
        self.llm.visit_params(f);
    }
}

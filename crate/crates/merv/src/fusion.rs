//! Fusing the per-encoder aligned features into one token sequence.
//!
//! The default mixer attends a single learned query over per-encoder
//! sequence means: `O = softmax(Q X̄ᵀ / sqrt(d)) X`, a convex combination of
//! the full features whose weights double as an interpretability signal.
//! Keys and values are the projected features themselves; there are no
//! key/value projection matrices and no multi-head structure.

use crate::error::{MervError, Result};
use crate::numerics::{
    gelu, gelu_backward, linear, linear_backward, mean_over_axis, softmax, softmax_backward,
    Scalar, Tensor,
};
use crate::param::{Param, ParamGroup, Parameters};
use crate::rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    CrossAttn,
    ConcatSeq,
    ConcatChannel,
    LearnableWeights,
    FixedMix,
}

impl FusionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::CrossAttn => "cross_attn",
            FusionStrategy::ConcatSeq => "concat_seq",
            FusionStrategy::ConcatChannel => "concat_channel",
            FusionStrategy::LearnableWeights => "learnable_weights",
            FusionStrategy::FixedMix => "fixed_mix",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    #[serde(default)]
    pub seed: u64,
    /// Hidden width of the channel-concat MLP; defaults to the LLM width.
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    /// Mixture weights for `fixed_mix`; must form a probability simplex.
    #[serde(default)]
    pub fixed_weights: Option<Vec<f64>>,
}

impl FusionConfig {
    pub fn new(strategy: FusionStrategy, seed: u64) -> Self {
        FusionConfig {
            strategy,
            seed,
            mlp_hidden: None,
            fixed_weights: None,
        }
    }

    pub fn validate(&self, n_encoders: usize) -> Result<()> {
        if self.strategy == FusionStrategy::FixedMix {
            let w = self.fixed_weights.as_ref().ok_or_else(|| {
                MervError::config("fixed_mix requires fixed_weights".to_string())
            })?;
            if w.len() != n_encoders {
                return Err(MervError::config(format!(
                    "fixed_weights has {} entries for {} encoders",
                    w.len(),
                    n_encoders
                )));
            }
            if w.iter().any(|&v| v < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(MervError::config(
                    "fixed_weights must be nonnegative and sum to 1".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Tokens handed to the LLM for aligned features of `l` rows each.
    pub fn output_tokens(&self, n_encoders: usize, l: usize) -> usize {
        match self.strategy {
            FusionStrategy::ConcatSeq => n_encoders * l,
            _ => l,
        }
    }
}

/// Single-query cross-attention over per-encoder means. Returns the fused
/// `(l, d)` output and the length-N weight vector.
pub fn cross_attend<S: Scalar>(
    query: &Tensor<S>,
    features: &[Tensor<S>],
) -> Result<(Tensor<S>, Vec<S>)> {
    let (out, weights, _) = cross_attend_cached(query, features)?;
    Ok((out, weights))
}

fn check_features<S: Scalar>(features: &[Tensor<S>]) -> Result<(usize, usize)> {
    let first = features
        .first()
        .ok_or_else(|| MervError::dimension("fusion needs at least one feature".to_string()))?;
    if first.rank() != 2 {
        return Err(MervError::dimension(format!(
            "aligned features must be rank 2, got {:?}",
            first.shape()
        )));
    }
    let (l, d) = (first.shape()[0], first.shape()[1]);
    for (i, f) in features.iter().enumerate() {
        if f.shape() != [l, d] {
            return Err(MervError::dimension(format!(
                "feature {i} has shape {:?}, expected [{l}, {d}]",
                f.shape()
            )));
        }
    }
    Ok((l, d))
}

fn cross_attend_cached<S: Scalar>(
    query: &Tensor<S>,
    features: &[Tensor<S>],
) -> Result<(Tensor<S>, Vec<S>, Tensor<S>)> {
    let (l, d) = check_features(features)?;
    if query.shape() != [1, d] {
        return Err(MervError::dimension(format!(
            "query must be [1, {d}], got {:?}",
            query.shape()
        )));
    }
    let n = features.len();
    // keys: per-encoder features averaged over the sequence dimension
    let mut means = Tensor::<S>::zeros(vec![n, d]);
    for (e, f) in features.iter().enumerate() {
        let m = mean_over_axis(f, 0)?;
        means.data_mut()[e * d..(e + 1) * d].copy_from_slice(m.data());
    }
    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    let mut logits = Tensor::<S>::zeros(vec![1, n]);
    for e in 0..n {
        let mut dot = S::zero();
        for j in 0..d {
            dot += query.data()[j] * means.data()[e * d + j];
        }
        logits.data_mut()[e] = dot * scale;
    }
    let probs = softmax(&logits, 1)?;
    let weights: Vec<S> = probs.data().to_vec();
    let mut out = Tensor::<S>::zeros(vec![l, d]);
    for (e, f) in features.iter().enumerate() {
        let w = weights[e];
        for (o, &v) in out.data_mut().iter_mut().zip(f.data()) {
            *o += w * v;
        }
    }
    Ok((out, weights, means))
}

/// Fused output plus the mixture weights when the strategy produces them.
#[derive(Clone, Debug)]
pub struct FusionOutput<S> {
    pub tokens: Tensor<S>,
    pub weights: Option<Vec<S>>,
}

#[derive(Clone, Debug)]
pub enum FusionCache<S> {
    CrossAttn {
        features: Vec<Tensor<S>>,
        means: Tensor<S>,
        weights: Vec<S>,
    },
    ConcatSeq {
        n: usize,
        l: usize,
    },
    ConcatChannel {
        concat: Tensor<S>,
        pre1: Tensor<S>,
        hidden: Tensor<S>,
        n: usize,
        d: usize,
    },
    Mixture {
        features: Vec<Tensor<S>>,
        weights: Vec<S>,
        learnable: bool,
    },
}

/// Learnable fusion state for one pipeline.
#[derive(Clone, Debug)]
pub struct Fusion<S = f32> {
    cfg: FusionConfig,
    n_encoders: usize,
    dim: usize,
    /// `Q`, `(1, d)`, cross-attention only.
    query: Option<Param<S>>,
    /// Pre-softmax mixture logits, learnable-weights only.
    gate_logits: Option<Param<S>>,
    /// Two-layer MLP mapping `(l, N*d)` back to `(l, d)`, channel-concat only.
    mlp: Option<FusionMlp<S>>,
}

#[derive(Clone, Debug)]
struct FusionMlp<S> {
    w1: Param<S>,
    b1: Param<S>,
    w2: Param<S>,
    b2: Param<S>,
}

impl<S: Scalar> Fusion<S> {
    pub fn new(cfg: FusionConfig, n_encoders: usize, dim: usize) -> Result<Self> {
        cfg.validate(n_encoders)?;
        let mut rng = rng::seeded_rng(cfg.seed, "fusion");
        let mut fusion = Fusion {
            cfg,
            n_encoders,
            dim,
            query: None,
            gate_logits: None,
            mlp: None,
        };
        match fusion.cfg.strategy {
            FusionStrategy::CrossAttn => {
                // unit-variance Gaussian scaled by 1/sqrt(d) for stable initial logits
                fusion.query = Some(Param::new(rng::randn_tensor::<S>(
                    vec![1, dim],
                    1.0 / (dim as f64).sqrt(),
                    &mut rng,
                )));
            }
            FusionStrategy::LearnableWeights => {
                fusion.gate_logits = Some(Param::new(Tensor::zeros(vec![n_encoders])));
            }
            FusionStrategy::ConcatChannel => {
                let hidden = fusion.cfg.mlp_hidden.unwrap_or(dim);
                let cin = n_encoders * dim;
                fusion.mlp = Some(FusionMlp {
                    w1: Param::new(rng::randn_tensor::<S>(
                        vec![cin, hidden],
                        1.0 / (cin as f64).sqrt(),
                        &mut rng,
                    )),
                    b1: Param::new(Tensor::zeros(vec![hidden])),
                    w2: Param::new(rng::randn_tensor::<S>(
                        vec![hidden, dim],
                        1.0 / (hidden as f64).sqrt(),
                        &mut rng,
                    )),
                    b2: Param::new(Tensor::zeros(vec![dim])),
                });
            }
            _ => {}
        }
        Ok(fusion)
    }

    pub fn cfg(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn query(&self) -> Option<&Param<S>> {
        self.query.as_ref()
    }

    pub fn query_mut(&mut self) -> Option<&mut Param<S>> {
        self.query.as_mut()
    }

    /// Applies the configured strategy to the aligned features.
    pub fn fuse(&self, features: &[Tensor<S>]) -> Result<(FusionOutput<S>, FusionCache<S>)> {
        let (l, d) = check_features(features)?;
        if d != self.dim {
            return Err(MervError::dimension(format!(
                "features have width {d}, fusion built for {}",
                self.dim
            )));
        }
        if features.len() != self.n_encoders {
            return Err(MervError::dimension(format!(
                "{} features for {} encoders",
                features.len(),
                self.n_encoders
            )));
        }
        let n = features.len();
        match self.cfg.strategy {
            FusionStrategy::CrossAttn => {
                let q = &self.query.as_ref().expect("query built").value;
                let (out, weights, means) = cross_attend_cached(q, features)?;
                Ok((
                    FusionOutput {
                        tokens: out,
                        weights: Some(weights.clone()),
                    },
                    FusionCache::CrossAttn {
                        features: features.to_vec(),
                        means,
                        weights,
                    },
                ))
            }
            FusionStrategy::ConcatSeq => {
                let mut data = Vec::with_capacity(n * l * d);
                for f in features {
                    data.extend_from_slice(f.data());
                }
                Ok((
                    FusionOutput {
                        tokens: Tensor::new(vec![n * l, d], data)?,
                        weights: None,
                    },
                    FusionCache::ConcatSeq { n, l },
                ))
            }
            FusionStrategy::ConcatChannel => {
                let mut data = Vec::with_capacity(l * n * d);
                for r in 0..l {
                    for f in features {
                        data.extend_from_slice(&f.data()[r * d..(r + 1) * d]);
                    }
                }
                let concat = Tensor::new(vec![l, n * d], data)?;
                let mlp = self.mlp.as_ref().expect("mlp built");
                let pre1 = linear(&concat, &mlp.w1.value, Some(&mlp.b1.value))?;
                let hidden = gelu(&pre1);
                let out = linear(&hidden, &mlp.w2.value, Some(&mlp.b2.value))?;
                Ok((
                    FusionOutput {
                        tokens: out,
                        weights: None,
                    },
                    FusionCache::ConcatChannel {
                        concat,
                        pre1,
                        hidden,
                        n,
                        d,
                    },
                ))
            }
            FusionStrategy::LearnableWeights => {
                let logits = &self.gate_logits.as_ref().expect("gate built").value;
                let probs = softmax(logits, 0)?;
                let weights: Vec<S> = probs.data().to_vec();
                let out = mix(features, &weights, l, d);
                Ok((
                    FusionOutput {
                        tokens: out,
                        weights: Some(weights.clone()),
                    },
                    FusionCache::Mixture {
                        features: features.to_vec(),
                        weights,
                        learnable: true,
                    },
                ))
            }
            FusionStrategy::FixedMix => {
                let weights: Vec<S> = self
                    .cfg
                    .fixed_weights
                    .as_ref()
                    .expect("validated")
                    .iter()
                    .map(|&v| S::from_f64(v))
                    .collect();
                let out = mix(features, &weights, l, d);
                Ok((
                    FusionOutput {
                        tokens: out,
                        weights: Some(weights.clone()),
                    },
                    FusionCache::Mixture {
                        features: features.to_vec(),
                        weights,
                        learnable: false,
                    },
                ))
            }
        }
    }

    /// Accumulates fusion-parameter gradients and returns the gradient with
    /// respect to each aligned feature.
    pub fn backward(&mut self, grad: &Tensor<S>, cache: &FusionCache<S>) -> Result<Vec<Tensor<S>>> {
        match cache {
            FusionCache::CrossAttn {
                features,
                means,
                weights,
            } => {
                let (l, d) = (features[0].shape()[0], features[0].shape()[1]);
                let n = features.len();
                let scale = S::from_f64(1.0 / (d as f64).sqrt());
                let inv_l = S::from_f64(1.0 / l as f64);
                // O = sum_e w_e x_e
                let mut d_weights = vec![S::zero(); n];
                let mut d_features: Vec<Tensor<S>> = Vec::with_capacity(n);
                for (e, f) in features.iter().enumerate() {
                    let mut dot = S::zero();
                    for (g, &v) in grad.data().iter().zip(f.data()) {
                        dot += *g * v;
                    }
                    d_weights[e] = dot;
                    d_features.push(grad.scale(weights[e]));
                }
                // weights = softmax(z), z_e = Q . mean_e / sqrt(d)
                let w_t = Tensor::new(vec![1, n], weights.clone())?;
                let dw_t = Tensor::new(vec![1, n], d_weights)?;
                let dz = softmax_backward(&dw_t, &w_t, 1)?;
                let q = &self.query.as_ref().expect("query built").value;
                let mut dq = Tensor::<S>::zeros(vec![1, d]);
                for e in 0..n {
                    let dze = dz.data()[e] * scale;
                    // dQ += dz_e * mean_e ; d mean_e = dz_e * Q
                    for j in 0..d {
                        dq.data_mut()[j] += dze * means.data()[e * d + j];
                    }
                    let dfe = &mut d_features[e];
                    for r in 0..l {
                        for j in 0..d {
                            dfe.data_mut()[r * d + j] += dze * q.data()[j] * inv_l;
                        }
                    }
                }
                self.query.as_mut().expect("query built").accumulate(&dq);
                Ok(d_features)
            }
            FusionCache::ConcatSeq { n, l } => {
                let d = grad.shape()[1];
                let mut out = Vec::with_capacity(*n);
                for e in 0..*n {
                    let slice = grad.data()[e * l * d..(e + 1) * l * d].to_vec();
                    out.push(Tensor::new(vec![*l, d], slice)?);
                }
                Ok(out)
            }
            FusionCache::ConcatChannel {
                concat,
                pre1,
                hidden,
                n,
                d,
            } => {
                let mlp = self.mlp.as_mut().expect("mlp built");
                let (d_hidden, dw2, db2) = linear_backward(grad, hidden, &mlp.w2.value, true)?;
                mlp.w2.accumulate(&dw2);
                mlp.b2.accumulate(&db2.unwrap());
                let d_pre1 = gelu_backward(&d_hidden, pre1)?;
                let (d_concat, dw1, db1) = linear_backward(&d_pre1, concat, &mlp.w1.value, true)?;
                mlp.w1.accumulate(&dw1);
                mlp.b1.accumulate(&db1.unwrap());
                let l = concat.shape()[0];
                let mut outs = vec![Tensor::<S>::zeros(vec![l, *d]); *n];
                for r in 0..l {
                    for e in 0..*n {
                        let src = &d_concat.data()[(r * *n + e) * *d..(r * *n + e + 1) * *d];
                        outs[e].data_mut()[r * *d..(r + 1) * *d].copy_from_slice(src);
                    }
                }
                Ok(outs)
            }
            FusionCache::Mixture {
                features,
                weights,
                learnable,
            } => {
                let n = features.len();
                let mut d_features = Vec::with_capacity(n);
                for e in 0..n {
                    d_features.push(grad.scale(weights[e]));
                }
                if *learnable {
                    let mut d_weights = vec![S::zero(); n];
                    for (e, f) in features.iter().enumerate() {
                        let mut dot = S::zero();
                        for (g, &v) in grad.data().iter().zip(f.data()) {
                            dot += *g * v;
                        }
                        d_weights[e] = dot;
                    }
                    let w_t = Tensor::new(vec![n], weights.clone())?;
                    let dw_t = Tensor::new(vec![n], d_weights)?;
                    let dlogits = softmax_backward(&dw_t, &w_t, 0)?;
                    self.gate_logits
                        .as_mut()
                        .expect("gate built")
                        .accumulate(&dlogits);
                }
                Ok(d_features)
            }
        }
    }
}

fn mix<S: Scalar>(features: &[Tensor<S>], weights: &[S], l: usize, d: usize) -> Tensor<S> {
    let mut out = Tensor::<S>::zeros(vec![l, d]);
    for (f, &w) in features.iter().zip(weights) {
        for (o, &v) in out.data_mut().iter_mut().zip(f.data()) {
            *o += w * v;
        }
    }
    out
}

impl<S: Scalar> Parameters<S> for Fusion<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamGroup, &str, &mut Param<S>)) {
        let g = ParamGroup::Fusion;
        if let Some(q) = self.query.as_mut() {
            f(g, "fusion.query", q);
        }
        if let Some(gl) = self.gate_logits.as_mut() {
            f(g, "fusion.gate_logits", gl);
        }
        if let Some(mlp) = self.mlp.as_mut() {
            f(g, "fusion.mlp.w1", &mut mlp.w1);
            f(g, "fusion.mlp.b1", &mut mlp.b1);
            f(g, "fusion.mlp.w2", &mut mlp.w2);
            f(g, "fusion.mlp.b2", &mut mlp.b2);
        }
    }
}

/// Per-video cross-attention weights, the raw material of the encoder
/// activation analysis.
#[derive(Clone, Debug, Serialize)]
pub struct AttentionRow {
    pub video_id: String,
    pub weights: Vec<f64>,
    pub argmax_encoder: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct AttentionTable {
    pub encoder_names: Vec<String>,
    pub rows: Vec<AttentionRow>,
}

impl AttentionTable {
    pub fn new(encoder_names: Vec<String>) -> Self {
        AttentionTable {
            encoder_names,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, video_id: String, weights: Vec<f64>) {
        debug_assert_eq!(weights.len(), self.encoder_names.len());
        let argmax = weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.rows.push(AttentionRow {
            video_id,
            weights,
            argmax_encoder: self.encoder_names[argmax].clone(),
        });
    }

    /// CSV with one row per video: `video_id, w_1..w_N, argmax_encoder`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("video_id");
        for name in &self.encoder_names {
            s.push_str(&format!(",w_{name}"));
        }
        s.push_str(",argmax_encoder\n");
        for row in &self.rows {
            s.push_str(&row.video_id);
            for w in &row.weights {
                s.push_str(&format!(",{w:.6}"));
            }
            s.push_str(&format!(",{}\n", row.argmax_encoder));
        }
        s
    }

    /// Videos with the highest weight for one encoder, descending.
    pub fn top_k(&self, encoder_idx: usize, k: usize) -> Vec<&AttentionRow> {
        let mut sorted: Vec<&AttentionRow> = self.rows.iter().collect();
        sorted.sort_by(|a, b| {
            b.weights[encoder_idx]
                .partial_cmp(&a.weights[encoder_idx])
                .unwrap()
                .then(a.video_id.cmp(&b.video_id))
        });
        sorted.truncate(k);
        sorted
    }
}

//! Analytical parameter and FLOP accounting per pipeline stage.
//!
//! Counting rules: average pooling costs one add per input element plus one
//! divide per output cell; linear layers cost `2*m*k*n`; convolutions cost
//! `2 * output_cells * kernel_volume * d_in * d_out`; a dense LLM forward
//! costs `2 * tokens * params`, with the attention-quadratic term available
//! behind a flag. Absolute totals depend on these conventions; the pipeline
//! asserts orderings and the projector-level figures, not end-to-end sums.

use crate::alignment::{count_projector_params, resampler_flops, ProjectorConfig, ProjectorVariant};
use crate::encoders::EncoderProfile;
use crate::error::Result;
use crate::fusion::{FusionConfig, FusionStrategy};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub params: u64,
    pub flops: f64,
}

impl StageCost {
    fn add(self, other: StageCost) -> StageCost {
        StageCost {
            params: self.params + other.params,
            flops: self.flops + other.flops,
        }
    }
}

/// Per-stage and total cost of one forward pass over a single video.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub encoder: StageCost,
    pub projector: StageCost,
    pub fusion: StageCost,
    pub llm: StageCost,
    pub total: StageCost,
}

impl CostReport {
    /// Aligned-column text rendering.
    pub fn to_text_table(&self) -> String {
        let rows = [
            ("encoder", self.encoder),
            ("projector", self.projector),
            ("fusion", self.fusion),
            ("llm", self.llm),
            ("total", self.total),
        ];
        let mut s = format!("{:<10} {:>16} {:>18}\n", "stage", "params", "flops");
        for (name, c) in rows {
            s.push_str(&format!("{:<10} {:>16} {:>18.3e}\n", name, c.params, c.flops));
        }
        s
    }
}

/// Optional quadratic attention term: `4 * layers * tokens^2 * width`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnQuadratic {
    pub layers: u64,
    pub width: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostConfig {
    pub profiles: Vec<EncoderProfile>,
    pub target_t: usize,
    pub projector: ProjectorConfig,
    pub fusion: FusionConfig,
    pub llm_params: u64,
    #[serde(default)]
    pub attention_quadratic: Option<AttnQuadratic>,
}

/// Adaptive average pool cost: one add per input element, one divide per
/// output cell.
pub fn pool_flops(
    frames: usize,
    in_h: usize,
    in_w: usize,
    dim: usize,
    out_t: usize,
    out_h: usize,
    out_w: usize,
) -> f64 {
    (frames * in_h * in_w * dim) as f64 + (out_t * out_h * out_w) as f64
}

/// The pooling stage of one encoder's projector (the Table-3a-style figure:
/// no dimension-matching linear included).
pub fn pooling_stage_flops(profile: &EncoderProfile, cfg: &ProjectorConfig, t: usize) -> f64 {
    pool_flops(
        t,
        profile.out_h,
        profile.out_w,
        profile.dim,
        cfg.effective_t(t),
        cfg.target_h,
        cfg.target_w,
    )
}

pub fn linear_flops(m: u64, k: u64, n: u64) -> f64 {
    2.0 * m as f64 * k as f64 * n as f64
}

pub fn conv_flops(output_cells: u64, kernel_volume: u64, d_in: u64, d_out: u64) -> f64 {
    2.0 * output_cells as f64 * kernel_volume as f64 * d_in as f64 * d_out as f64
}

/// Dense forward cost of a decoder-only LLM.
pub fn llm_flops(n_tokens: u64, n_params: u64) -> f64 {
    2.0 * n_tokens as f64 * n_params as f64
}

pub fn llm_flops_with_attention(n_tokens: u64, n_params: u64, quad: AttnQuadratic) -> f64 {
    llm_flops(n_tokens, n_params)
        + 4.0 * quad.layers as f64 * (n_tokens as f64) * (n_tokens as f64) * quad.width as f64
}

/// Total projector FLOPs across the ensemble: variant stage plus each
/// encoder's dimension-matching linear.
pub fn projector_flops(cfg: &ProjectorConfig, profiles: &[EncoderProfile], t: usize) -> f64 {
    let d = cfg.llm_dim as u64;
    let rows = cfg.tokens_per_video(t) as u64;
    profiles
        .iter()
        .map(|p| {
            let de = p.dim as u64;
            let stage = match cfg.variant {
                ProjectorVariant::Avg2d | ProjectorVariant::Avg3d => {
                    pooling_stage_flops(p, cfg, t)
                }
                ProjectorVariant::AttnResampler => {
                    t as f64
                        * resampler_flops(
                            p.dim as f64,
                            (cfg.target_h * cfg.target_w) as f64,
                            (p.out_h * p.out_w) as f64,
                            cfg.resampler.mlp_ratio as f64,
                        )
                }
                ProjectorVariant::Conv2d => {
                    let pre_cells = (t * p.out_h * p.out_w) as u64;
                    let post_cells = (t * cfg.target_h * cfg.target_w) as u64;
                    cfg.conv.blocks_pre as f64 * conv_flops(pre_cells, 9, de, de)
                        + pooling_stage_flops(p, cfg, t)
                        + cfg.conv.blocks_post as f64 * conv_flops(post_cells, 9, de, de)
                }
                ProjectorVariant::Conv3d => {
                    let cells = (t * p.out_h * p.out_w) as u64;
                    conv_flops(cells, 18, de, de) + pooling_stage_flops(p, cfg, t)
                }
            };
            stage + linear_flops(rows, de, d)
        })
        .sum()
}

fn fusion_cost(cfg: &FusionConfig, n: usize, l: usize, d: usize) -> StageCost {
    let (n64, l64, d64) = (n as u64, l as u64, d as u64);
    match cfg.strategy {
        FusionStrategy::CrossAttn => StageCost {
            params: d64,
            flops: (n64 * l64 * d64) as f64        // sequence means
                + 2.0 * (n64 * d64) as f64         // query-key logits
                + 3.0 * n64 as f64                 // softmax
                + 2.0 * (n64 * l64 * d64) as f64,  // weighted mixture
        },
        FusionStrategy::ConcatSeq => StageCost {
            params: 0,
            flops: 0.0,
        },
        FusionStrategy::ConcatChannel => {
            let hidden = cfg.mlp_hidden.unwrap_or(d) as u64;
            StageCost {
                params: n64 * d64 * hidden + hidden + hidden * d64 + d64,
                flops: linear_flops(l64, n64 * d64, hidden) + linear_flops(l64, hidden, d64),
            }
        }
        FusionStrategy::LearnableWeights => StageCost {
            params: n64,
            flops: 3.0 * n64 as f64 + 2.0 * (n64 * l64 * d64) as f64,
        },
        FusionStrategy::FixedMix => StageCost {
            params: 0,
            flops: 2.0 * (n64 * l64 * d64) as f64,
        },
    }
}

/// Full report for one configuration. Alignment is validated as part of the
/// costing (an unreachable `t` is a config error here too).
pub fn pipeline_cost(cfg: &CostConfig) -> Result<CostReport> {
    let aligned = crate::alignment::align_profiles(&cfg.profiles, cfg.target_t)?;
    cfg.projector.validate(&aligned)?;
    cfg.fusion.validate(aligned.len())?;

    let encoder = StageCost {
        params: aligned.iter().map(|p| p.params).sum(),
        flops: aligned
            .iter()
            .map(|p| p.flops_per_frame * p.input_frames as f64)
            .sum(),
    };
    let proj_params = count_projector_params(&cfg.projector, &aligned);
    let projector = StageCost {
        params: proj_params.total(),
        flops: projector_flops(&cfg.projector, &aligned, cfg.target_t),
    };
    let l = cfg.projector.tokens_per_video(cfg.target_t);
    let fusion = fusion_cost(&cfg.fusion, aligned.len(), l, cfg.projector.llm_dim);
    let tokens = cfg.fusion.output_tokens(aligned.len(), l) as u64;
    let llm = StageCost {
        params: cfg.llm_params,
        flops: match cfg.attention_quadratic {
            Some(quad) => llm_flops_with_attention(tokens, cfg.llm_params, quad),
            None => llm_flops(tokens, cfg.llm_params),
        },
    };
    let total = encoder.add(projector).add(fusion).add(llm);
    Ok(CostReport {
        encoder,
        projector,
        fusion,
        llm,
        total,
    })
}

//! Training recipes at toy scale.
//!
//! `frozen` runs a single instruction-tuning stage on the connector
//! (projectors + fusion) with the LLM untouched. `full` runs a captioning
//! stage with the LLM unfrozen and then instruction tuning on connector and
//! LLM. `two_stage_frozen_llm` is the two-stage baseline that keeps the LLM
//! frozen during stage 1. `mixed_single_stage` folds both stages' budget into
//! one pass over mixed data.

use crate::error::{MervError, Result};
use crate::numerics::Scalar;
use crate::param::ParamGroup;
use crate::rng;
use crate::toytrain::model::Model;
use crate::toytrain::optim::{lr_at, Adam, Schedule};
use crate::toytrain::synth::{SynthSample, SynthTask};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Frozen,
    Full,
    TwoStageFrozenLlm,
    MixedSingleStage,
}

impl Recipe {
    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::Frozen => "frozen",
            Recipe::Full => "full",
            Recipe::TwoStageFrozenLlm => "two_stage_frozen_llm",
            Recipe::MixedSingleStage => "mixed_single_stage",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Recipe::Frozen),
            "full" => Ok(Recipe::Full),
            "two_stage_frozen_llm" => Ok(Recipe::TwoStageFrozenLlm),
            "mixed_single_stage" => Ok(Recipe::MixedSingleStage),
            other => Err(MervError::config(format!("unknown recipe `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeConfig {
    pub recipe: Recipe,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub steps_per_stage: usize,
    pub batch_size: usize,
    pub eval_every: usize,
}

impl RecipeConfig {
    /// Toy-scale defaults tuned for the synthetic tasks.
    pub fn toy(recipe: Recipe) -> Self {
        RecipeConfig {
            recipe,
            stage1_lr: 3e-3,
            stage2_lr: 2e-3,
            warmup_ratio: 0.03,
            schedule: Schedule::Cosine,
            steps_per_stage: 150,
            batch_size: 8,
            eval_every: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_stage == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(MervError::config(
                "steps_per_stage, batch_size, eval_every must be >= 1".to_string(),
            ));
        }
        if !(self.stage1_lr.is_finite() && self.stage2_lr.is_finite())
            || self.stage1_lr <= 0.0
            || self.stage2_lr <= 0.0
            || !(0.0..1.0).contains(&self.warmup_ratio)
        {
            return Err(MervError::config("invalid learning rates or warmup".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StageSpec {
    pub name: &'static str,
    pub groups: Vec<ParamGroup>,
    pub lr: f64,
    pub steps: usize,
}

/// The parameter groups each recipe trains, per stage. Mock encoders carry
/// no parameters, so the connector is projectors plus fusion.
pub fn stages_for(cfg: &RecipeConfig) -> Vec<StageSpec> {
    let connector = vec![ParamGroup::Projector, ParamGroup::Fusion];
    let all = vec![ParamGroup::Projector, ParamGroup::Fusion, ParamGroup::Llm];
    match cfg.recipe {
        Recipe::Frozen => vec![StageSpec {
            name: "stage2",
            groups: connector,
            lr: cfg.stage2_lr,
            steps: cfg.steps_per_stage,
        }],
        Recipe::Full => vec![
            StageSpec {
                name: "stage1",
                groups: all.clone(),
                lr: cfg.stage1_lr,
                steps: cfg.steps_per_stage,
            },
            StageSpec {
                name: "stage2",
                groups: all,
                lr: cfg.stage2_lr,
                steps: cfg.steps_per_stage,
            },
        ],
        Recipe::TwoStageFrozenLlm => vec![
            StageSpec {
                name: "stage1",
                groups: connector,
                lr: cfg.stage1_lr,
                steps: cfg.steps_per_stage,
            },
            StageSpec {
                name: "stage2",
                groups: all,
                lr: cfg.stage2_lr,
                steps: cfg.steps_per_stage,
            },
        ],
        Recipe::MixedSingleStage => vec![StageSpec {
            name: "mixed",
            groups: all,
            lr: cfg.stage2_lr,
            steps: 2 * cfg.steps_per_stage,
        }],
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub mean_weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    /// Per-encoder mean mixture weight over the held-out set, when the
    /// strategy produces weights.
    pub mean_weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub history: Vec<MetricsRow>,
    pub final_eval: EvalMetrics,
    pub encoder_names: Vec<String>,
}

impl TrainResult {
    /// Metrics CSV: `step, stage, loss, accuracy, w_<encoder>...`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,stage,loss,accuracy");
        for name in &self.encoder_names {
            s.push_str(&format!(",w_{name}"));
        }
        s.push('\n');
        for row in &self.history {
            s.push_str(&format!("{},{},{:.6},", row.step, row.stage, row.loss));
            if let Some(acc) = row.accuracy {
                s.push_str(&format!("{acc:.4}"));
            }
            match &row.mean_weights {
                Some(ws) => {
                    for w in ws {
                        s.push_str(&format!(",{w:.6}"));
                    }
                }
                None => {
                    for _ in &self.encoder_names {
                        s.push(',');
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

pub fn evaluate<S: Scalar>(model: &Model<S>, samples: &[SynthSample]) -> Result<EvalMetrics> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut weight_acc: Option<Vec<f64>> = None;
    for sample in samples {
        let (l, ok, weights) = model.eval_sample(sample)?;
        loss += l;
        correct += ok as usize;
        if let Some(w) = weights {
            match &mut weight_acc {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&w) {
                        *a += v;
                    }
                }
                None => weight_acc = Some(w),
            }
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(EvalMetrics {
        loss: loss / n,
        accuracy: correct as f64 / n,
        mean_weights: weight_acc.map(|acc| acc.iter().map(|v| v / n).collect()),
    })
}

/// Runs the recipe on the task. Deterministic for a fixed `seed`: batch
/// order, initialization, and update order are all derived from it.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    task: &SynthTask,
    cfg: &RecipeConfig,
    seed: u64,
) -> Result<TrainResult> {
    cfg.validate()?;
    let (train_set, held_out) = task.split();
    if train_set.is_empty() {
        return Err(MervError::config("task too small to split".to_string()));
    }
    let encoder_names: Vec<String> = model
        .encoders()
        .iter()
        .map(|e| e.profile().name.clone())
        .collect();

    let mut optimizer: Adam<S> = Adam::new();
    let mut history = Vec::new();
    let mut global_step = 0usize;

    for (stage_idx, stage) in stages_for(cfg).iter().enumerate() {
        let mut order_rng = rng::seeded_rng(seed, &format!("train/order/{stage_idx}"));
        let mut indices: Vec<usize> = (0..train_set.len()).collect();
        indices.shuffle(&mut order_rng);
        let mut cursor = 0usize;

        for step in 0..stage.steps {
            let lr = lr_at(stage.lr, step, stage.steps, cfg.warmup_ratio, cfg.schedule);
            model.zero_grads();
            let mut batch_loss = 0.0;
            for _ in 0..cfg.batch_size {
                if cursor == indices.len() {
                    indices.shuffle(&mut order_rng);
                    cursor = 0;
                }
                let sample = &train_set[indices[cursor]];
                cursor += 1;
                let res = model.train_step_sample(sample, 1.0 / cfg.batch_size as f64)?;
                batch_loss += res.loss;
            }
            batch_loss /= cfg.batch_size as f64;
            if !batch_loss.is_finite() {
                return Err(MervError::Training {
                    step: global_step,
                    message: "loss is not finite".to_string(),
                });
            }
            // enforce the freezing contract before the update
            let frozen: Vec<ParamGroup> = [ParamGroup::Projector, ParamGroup::Fusion, ParamGroup::Llm]
                .into_iter()
                .filter(|g| !stage.groups.contains(g))
                .collect();
            model.zero_grads_of(&frozen);
            optimizer.step(model, &stage.groups, lr);

            global_step += 1;
            let at_eval = step % cfg.eval_every == cfg.eval_every - 1 || step == stage.steps - 1;
            if at_eval {
                let eval = evaluate(model, held_out)?;
                history.push(MetricsRow {
                    step: global_step,
                    stage: stage.name.to_string(),
                    loss: batch_loss,
                    accuracy: Some(eval.accuracy),
                    mean_weights: eval.mean_weights,
                });
            } else {
                history.push(MetricsRow {
                    step: global_step,
                    stage: stage.name.to_string(),
                    loss: batch_loss,
                    accuracy: None,
                    mean_weights: None,
                });
            }
        }
    }

    let final_eval = evaluate(model, held_out)?;
    Ok(TrainResult {
        history,
        final_eval,
        encoder_names,
    })
}

/// Moving average with the given window.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    if values.is_empty() || window == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len().saturating_sub(window) + 1);
    let mut sum: f64 = values[..window.min(values.len())].iter().sum();
    if values.len() < window {
        return vec![sum / values.len() as f64];
    }
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    out
}

//! Finite-difference verification of the pipeline's analytic gradients,
//! run on an f64 model.

use crate::error::Result;
use crate::numerics::{max_rel_err, Tensor};
use crate::param::ParamGroup;
use crate::toytrain::model::Model;
use crate::toytrain::synth::SynthSample;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub per_param: Vec<(String, f64)>,
}

fn loss_of(model: &Model<f64>, sample: &SynthSample) -> f64 {
    let forward = model.forward(&sample.video, &sample.prompt).expect("forward");
    let (loss, _, _) = model.answer_loss(&forward, sample).expect("loss");
    loss
}

/// Compares analytic gradients of the answer loss against central finite
/// differences for every parameter in `groups`. Returns the worst relative
/// error (floored comparison for near-zero coordinates).
pub fn grad_check(
    model: &mut Model<f64>,
    sample: &SynthSample,
    eps: f64,
    groups: &[ParamGroup],
) -> Result<GradCheckReport> {
    model.zero_grads();
    model.train_step_sample(sample, 1.0)?;

    let names: Vec<String> = model
        .param_names()
        .into_iter()
        .filter(|(g, _)| groups.contains(g))
        .map(|(_, n)| n)
        .collect();

    let mut per_param = Vec::with_capacity(names.len());
    let mut worst = (0.0f64, String::new());
    for name in names {
        let analytic = model
            .with_param(&name, |p| p.grad.clone())
            .expect("param exists");
        let numel = analytic.numel();
        let mut fd = vec![0.0f64; numel];
        for i in 0..numel {
            let orig = model
                .with_param(&name, |p| {
                    let v = p.value.data()[i];
                    p.value.data_mut()[i] = v + eps;
                    v
                })
                .expect("param exists");
            let fp = loss_of(model, sample);
            model.with_param(&name, |p| p.value.data_mut()[i] = orig - eps);
            let fm = loss_of(model, sample);
            model.with_param(&name, |p| p.value.data_mut()[i] = orig);
            fd[i] = (fp - fm) / (2.0 * eps);
        }
        let fd_t = Tensor::new(analytic.shape().to_vec(), fd)?;
        let err = max_rel_err(&analytic, &fd_t);
        if err > worst.0 {
            worst = (err, name.clone());
        }
        per_param.push((name, err));
    }
    Ok(GradCheckReport {
        max_rel_err: worst.0,
        worst_param: worst.1,
        per_param,
    })
}

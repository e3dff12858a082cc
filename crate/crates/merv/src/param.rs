//! Learnable parameter storage shared by the projectors, the fusion mixer,
//! and the toy language model.

use crate::numerics::{Scalar, Tensor};

/// Which optimizer group a parameter belongs to. Recipes freeze and unfreeze
/// whole groups; mock encoders carry no parameters at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Projector,
    Fusion,
    Llm,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Projector => "projector",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Llm => "llm",
        }
    }
}

/// A value tensor plus its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<S = f32> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    pub fn accumulate(&mut self, g: &Tensor<S>) {
        self.grad
            .add_assign(g)
            .expect("gradient shape matches parameter");
    }
}

/// Visitor over named parameters in a fixed, deterministic order.
pub trait Parameters<S: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamGroup, &str, &mut Param<S>));
}

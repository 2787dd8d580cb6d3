//! Dense tensors, the rectifier classifier, and exact first and second derivatives.

mod model;
mod tape;
mod tensor;

pub use model::{
    ce_loss, cosine_similarity, cross_entropy_on_tape, forward, forward_on_tape, grad, grad_of, hvp, hvp_of, one_hot,
    Architecture, CrossEntropy, GradientVector, LabeledBatch, ParamVector, TapeLoss,
};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

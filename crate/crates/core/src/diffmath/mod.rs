//! Differentiable numerical substrate: tensors, a reverse-mode tape, small
//! network blocks, Gaussian helpers and optimizers.

pub mod gaussian;
pub mod gradcheck;
pub mod lbfgs;
pub mod nn;
pub mod optim;
pub mod params;
pub mod special;
pub mod tape;
pub mod tensor;

pub use gaussian::{gaussian_kl, gaussian_kl_node, reparam_node, reparam_sample, standard_normal};
pub use gradcheck::{grad_check, grad_check_with, GradCheckConfig, GradCheckReport};
pub use lbfgs::{lbfgs_minimize, LbfgsConfig, LbfgsOutcome};
pub use nn::{GruCell, Linear, Mlp};
pub use optim::{adam_minimize, step_seed, Adam, AdamConfig, AdamOutcome};
pub use params::ParamSet;
pub use tape::{CustomOp, Gradients, Graph, Var};
pub use tensor::{matmul, Tensor};

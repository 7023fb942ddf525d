//! Policy-guided MPPI with an adaptive prior and KL-regularized policy
//! updates over a learned latent world model.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod dists;
pub mod envs;
pub mod error;
pub mod nnet;
pub mod planner;
pub mod policy;
pub mod prior;
pub mod replay;
pub mod trainer;
pub mod value;
pub mod verify;
pub mod worldmodel;

pub use dists::DiagGaussian;
pub use envs::{Env, EnvKind};
pub use error::{Error, Result};
pub use nnet::{Activation, Mlp};
pub use planner::{PlanConfig, PlanResult};
pub use policy::{GaussianPolicy, Lambda};
pub use prior::PriorMode;
pub use replay::{ReplayBuffer, TransitionRecord};
pub use trainer::{Agent, TrainConfig, Trainer};
pub use value::{QEnsemble, ScaleTracker};
pub use worldmodel::{TwoHot, WorldModel, WorldModelConfig};

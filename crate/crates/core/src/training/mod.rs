//! MAP training of the CF and CTR models under the Base, Disjoint and Joint
//! schedules.

mod hyper;
mod objective;
mod sgd;

pub use hyper::HyperParams;
pub use objective::{
    grad_instance, grad_prior, grad_prior_with, init_params, instance_log_likelihood,
    joint_objective, log_prior, log_prior_with, mean_log_likelihood, objective_gradient,
    objective_value, JointGrad, JointModel, ModelGrad, ObjectiveSpec, PriorLayout, SparseGrad,
};
pub(crate) use sgd::run_mode;
pub use sgd::{sgd_epoch, train, EpochMode, EpochRecord, Regime, TrainReport};

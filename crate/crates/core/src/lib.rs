pub mod autodiff;
pub mod basis;
pub mod bayes;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod hexfloat;
pub mod likelihood;
pub mod model;
pub mod oracles;
pub mod pde;
pub mod special;
pub mod train;
pub mod uq;

pub use autodiff::{grad_check, Gradients, NodeId, OpKind, Tape, Tensor};
pub use basis::{basis_derivatives, basis_eval, layer_forward, phi_eval, BasisSpec, KanLayer, KanNetwork, LayerParams};
pub use error::{Error, Result};
pub use bayes::{BayesianKan, FlowStack, PlanarStep, WeightPosterior};
pub use config::{ExperimentConfig, TaskName};
pub use likelihood::LikelihoodKind;
pub use model::{BhrKanModel, LikelihoodChoice, Mode, ModelConfig};
pub use pde::{Function1d, PdeKind, PdeTask};
pub use train::{train_run, Fit1dTask, Noise, RunManifest, Task, TrainConfig, TrainOutcome};
pub use uq::{build_report, emit_report, posterior_summary, Metrics, UqReport};

//! Three-group training loop, schedules, evaluation, ablation variants and
//! exports.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod probe;
pub mod run;
pub mod schedule;
pub mod step;

pub use checkpoint::Checkpoint;
pub use config::{TrainConfig, Variant};
pub use eval::{domain_probe, evaluate, evaluate_many, export_feature_statistics, DomainProbe, Evaluation, FeatureStats};
pub use gradcheck::{run_gradcheck_suite, GradCheckReport};
pub use metrics::{parse_log, write_log, EpochMetrics};
pub use model::{Dims, Group, ModelState};
pub use probe::{mask_selectivity, ProbeConfig, ProbeResult};
pub use run::{init_model, run_training, run_training_with};
pub use schedule::{ramp_up, Schedule};
pub use step::{train_step, StepAudit, StepContext, StepOutcome};

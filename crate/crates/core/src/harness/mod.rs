//! Run configuration, training loop and the command implementations behind
//! the `mpma` binary.

mod ablate;
mod config;
mod gradcheck;
mod probe;
mod reconstruct;
mod train;

pub use ablate::{cmd_ablate_fusion, AblationRow, AblationTable};
pub use config::RunConfig;
pub use gradcheck::{
    cmd_gradcheck, gradcheck_model_config, random_inputs, GradcheckOptions, GradcheckReport, GroupCheck, MAX_WIDTH,
    TOLERANCE,
};
pub use probe::{
    corpus_labels, encoder_features, linear_probe, probe_classify, probe_on_features, probe_retrieve, recall_at_1, split,
    stratified_subset, ProbeOptions, ProbeReport,
};
pub use reconstruct::{cmd_reconstruct, read_image, write_image, ReconstructionDump};
pub use train::{
    cmd_train, diagnostic_path, evaluate_batch, load_model, params_from_checkpoint, prepare_batch, read_metrics,
    train_loop, train_step, MetricsRecord, TrainOutcome, TrainState,
};

//! Oracles and metrics: finite-difference gradients, a plain-arithmetic loss
//! recomputation, linear disentanglement probes and the attribute-drift metric.

mod drift;
mod gradcheck;
mod metrics;
mod oracle;
mod probe;

pub use drift::{
    darkness_grid, drift_metric, drift_report, object_matches, recover_object, tint_grid, width_grid, DriftReport,
    DARKNESS_TOLERANCE, GRID_STEPS, WIDTH_TOLERANCE,
};
pub use gradcheck::{
    finite_diff_gradient, gradcheck_config, gradcheck_model, relative_error, FdEntry, GradCheckReport, GradMismatch,
    GradTarget, LossProbe, FD_STEP, GRAD_PASS_FRACTION, GRAD_TOLERANCE,
};

pub use metrics::{
    append_drift_csv, append_probe_csv, reconstruction_stats, removal_error, scale_monotonicity, ReconstructionStats,
    DRIFT_CSV_HEADER, PROBE_CSV_HEADER,
};
pub use oracle::{discriminator_loss_oracle, generator_loss_oracle, GeneratorInputs};
pub use probe::{
    disentanglement_probe, encode_features, probe_features, r_squared, ProbeBreakdown, ProbeResult, MIN_PROBE_SAMPLES,
    PROBE_FIT_FRACTION,
};

use thiserror::Error;

use crate::model::ModelError;
use crate::synth::DataError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("loss evaluated to non-finite value {0}")]
    NonFiniteLoss(f64),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

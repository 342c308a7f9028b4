//! Metrics, the zero-velocity baseline, evaluation reports and the error-accumulation lab.

mod lab;
mod metrics;
mod report;

pub use lab::{deviation_curve, error_accumulation_experiment, AccumulationCurves};
pub use metrics::{
    argmax, cycle_probs, frame_errors, horizon_frame, mean_joint_error, recognition_accuracy, zero_velocity_predict,
    DEFAULT_HORIZONS_MS,
};
pub use report::{dataset_fps, evaluate, predict_windows, EvalOptions, EvalReport, HorizonErrors, ReportMetadata};

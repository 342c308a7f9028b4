//! Network components, the non-autoregressive predictor and the autoregressive baseline.

pub mod checkpoint;
pub mod layers;
mod net;
mod params;

pub use layers::{BlockSpec, Forward, Mode};
pub use net::{DecoderInput, Model, ModelConfig, ModelKind, Prediction};
pub use params::ParamStore;

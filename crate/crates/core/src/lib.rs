//! Conditional factuality control (CFC) for set-valued selection over
//! verifier-scored candidates.

pub mod data;
pub mod error;
pub mod features;
pub mod harness;
pub mod methods;
pub mod metrics;
pub mod quantile;
pub mod synth;

pub use data::{Candidate, PromptRecord};
pub use error::{CfcError, Result};
pub use features::{FeatureMapSpec, FittedFeatureMap};
pub use harness::RunConfig;
pub use methods::{
    CalibrationArtifact, CalibrationOptions, Method, MethodSpec, PredictionSet, Predictor, SetMode,
    ThresholdSolver,
};
pub use metrics::EvalReport;
pub use quantile::{Design, QuantileFit};
pub use synth::{SynthConfig, SynthParams};

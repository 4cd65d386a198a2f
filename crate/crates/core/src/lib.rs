//! Discrete-event simulator of low-batch Mixture-of-Experts inference on a
//! multi-chiplet package with streamed, fully sharded expert weights.

pub mod analysis;
pub mod baselines;
pub mod config;
pub mod dse;
pub mod engine;
pub mod error;
pub mod scheduler;
pub mod timing;
pub mod topology;
pub mod workload;

pub use analysis::{run_end_to_end, run_single_layer, SimReport, Strategy};
pub use config::{validate_configs, HardwareConfig, ModelConfig};
pub use engine::{run_layer, EngineMode, LayerResult};
pub use error::{ConfigError, Error, SimError, TraceError};
pub use workload::{generate_gating, GatingTrace, WorkloadParams};

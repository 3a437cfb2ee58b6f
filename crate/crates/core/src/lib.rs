//! Analytical cost model for decoder-only LLM inference.
//!
//! A model description is laid out as an operator graph whose nodes have
//! closed-form op counts, memory traffic, KV-cache traffic and dispatch
//! counts. Runs over prefill, decode and chunked prefill are accumulated in
//! a [`StatsDb`] and turned into latency forecasts for any accelerator
//! described by peak compute, bandwidth and achieved efficiencies.

pub mod config;
pub mod dtype;
pub mod error;
pub mod exec;
pub mod forecast;
pub mod hardware;
pub mod ops;
pub mod plotdata;
pub mod sim;
pub mod stats;
pub mod validation;

pub use config::{
    parse_model_config, preset_variant, ActFnAlgo, KvQuant, LoraMergePolicy, ModelConfig,
    QuantScheme, ScenarioConfig, ScenarioPhase, Variant,
};
pub use dtype::DataType;
pub use error::{Error, Result};
pub use exec::Execution;
pub use forecast::ForecastResult;
pub use hardware::{EfficiencyProfile, HardwareProfile, HardwareSpec};
pub use sim::{build_model, LayerGraph};
pub use stats::{Bytes, Mode, OpClass, Phase, RunSummary, StatsDb, StatsDelta};

/// Unit conventions.
pub mod units {
    /// Bytes per GB. Memory sizes and bandwidths use binary gigabytes.
    pub const GB: f64 = (1u64 << 30) as f64;
    /// Ops per tera-op.
    pub const TERA: f64 = 1e12;
    /// Ops per giga-op.
    pub const GIGA: f64 = 1e9;
}

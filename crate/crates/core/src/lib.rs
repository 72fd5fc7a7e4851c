//! Desk-scale model of heterogeneous LLM inference with an attention
//! co-processor: roofline and utilization analysis, a functional emulator
//! of the accelerator's KV store, GQA attention engine, and offload wire
//! protocol, and a deterministic pipelined multi-device simulator with
//! throughput, breakdown, and energy reporting.

pub mod attention;
pub mod config;
pub mod kvcache;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod roofline;
pub mod sim;

pub use config::Scenario;
pub use model::{DeviceKind, DeviceSpec, KernelLabel, KernelWork, ModelConfig, WorkloadConfig};
pub use roofline::{Boundedness, Efficiency, KernelEstimate};
pub use sim::{Partition, SimKnobs, SimPolicy, StepReport, Timeline, Topology};

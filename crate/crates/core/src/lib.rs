//! Synthetic memory-access probes, a virtual cache machine, and a
//! weighted probe-mix model that predicts application throughput from a
//! catalog of probe measurements.

pub mod counters;
pub mod mixmodel;
pub mod probe;
pub mod refkernels;
pub mod report;
pub mod sweep;
pub mod validate;
pub mod vcache;
pub mod workload;

pub use counters::{CounterSample, MetricPoint, MetricSource};
pub use mixmodel::{GridConfig, ProbeCatalog, WeightGrid};
pub use probe::{AccessMode, ProbeParams};
pub use refkernels::KernelCase;
pub use vcache::MachineModel;
pub use workload::Workload;

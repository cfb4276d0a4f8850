//! Anything that can be replayed on the virtual machine or timed on the host:
//! a probe configuration or a reference-kernel case.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counters::{MetricPoint, MetricSource};
use crate::probe::{self, ProbeError, ProbeParams, RunOptions};
use crate::refkernels::{KernelCase, KernelError};
use crate::vcache::{self, MachineError, MachineModel, VirtualCounters};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Machine(#[from] MachineError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Workload {
    Probe(ProbeParams),
    Kernel(KernelCase),
}

/// Where throughput numbers come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Cycle counts from the virtual machine; fully deterministic.
    #[default]
    Virtual,
    /// Host timing for throughput, virtual machine for metric coordinates.
    Wallclock,
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "virtual" => Ok(Backend::Virtual),
            "wallclock" => Ok(Backend::Wallclock),
            other => Err(format!("unknown backend {other:?} (expected virtual or wallclock)")),
        }
    }
}

/// Outcome of running a workload once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub counters: VirtualCounters,
    pub point: MetricPoint,
    pub mflops: f64,
}

impl Workload {
    pub fn digest(&self) -> String {
        match self {
            Workload::Probe(p) => p.digest(),
            Workload::Kernel(k) => k.digest(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Workload::Probe(p) => p.label(),
            Workload::Kernel(k) => k.label(),
        }
    }

    fn source(&self) -> MetricSource {
        match self {
            Workload::Probe(_) => MetricSource::VirtualProbe,
            Workload::Kernel(_) => MetricSource::VirtualKernel,
        }
    }

    /// Streams the access sequence; returns (flops, accesses).
    pub fn replay(&self, visit: &mut dyn FnMut(u64)) -> Result<(u64, u64), WorkloadError> {
        match self {
            Workload::Probe(p) => {
                p.validate()?;
                let indices = match p.mode {
                    probe::AccessMode::Random => Some(probe::seeded_indices(p)?),
                    probe::AccessMode::Strided => None,
                };
                probe::for_each_access(p, indices.as_ref(), visit);
                Ok((probe::flop_count(p), p.access_count()))
            }
            Workload::Kernel(k) => Ok(k.replay(visit)?),
        }
    }

    /// (flops, accesses) without replaying the stream.
    pub fn counts(&self) -> Result<(u64, u64), WorkloadError> {
        match self {
            Workload::Probe(p) => Ok((probe::flop_count(p), p.access_count())),
            Workload::Kernel(k) => Ok(k.counts()?),
        }
    }

    /// Cold-cache run on the virtual machine.
    pub fn evaluate_virtual(&self, machine: &MachineModel) -> Result<Evaluation, WorkloadError> {
        let mut sim = vcache::CacheSim::new(machine);
        let (flops, _) = self.replay(&mut |e| {
            sim.access_element(e);
        })?;
        let counters = VirtualCounters {
            fp_ops: flops,
            cycles: machine.cycles_for(flops, sim.misses(), sim.hits()),
            l3_misses: sim.misses(),
            l3_hits: sim.hits(),
        };
        self.evaluation_from(counters, machine)
    }

    /// Builds the evaluation for counters obtained elsewhere, e.g. reused
    /// across probes that share an access stream.
    pub fn evaluation_from(
        &self,
        counters: VirtualCounters,
        machine: &MachineModel,
    ) -> Result<Evaluation, WorkloadError> {
        let point = self.point_from(&counters, machine)?;
        Ok(Evaluation {
            counters,
            point,
            mflops: machine.mflops(counters.fp_ops, counters.cycles),
        })
    }

    pub fn evaluate(
        &self,
        machine: &MachineModel,
        backend: Backend,
        opts: RunOptions,
    ) -> Result<Evaluation, WorkloadError> {
        match backend {
            Backend::Virtual => self.evaluate_virtual(machine),
            Backend::Wallclock => self.evaluate_wallclock(machine, opts),
        }
    }

    /// One metric point per window of `window_accesses` accesses.
    pub fn sample_virtual(
        &self,
        machine: &MachineModel,
        window_accesses: u64,
    ) -> Result<Vec<MetricPoint>, WorkloadError> {
        let (flops, total) = self.counts()?;
        let mut failure = None;
        let windows = vcache::simulate_windows(flops, total, window_accesses, machine, |visit| {
            if let Err(e) = self.replay(visit) {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        windows
            .iter()
            .filter(|w| w.cycles > 0)
            .map(|w| self.point_from(w, machine))
            .collect()
    }

    fn point_from(
        &self,
        counters: &VirtualCounters,
        machine: &MachineModel,
    ) -> Result<MetricPoint, WorkloadError> {
        let mut point = vcache::derive_metrics(counters, machine)?;
        point.source = self.source();
        point.label = Some(self.label());
        Ok(point)
    }

    /// Times the workload on the host. Metric coordinates still come from the
    /// virtual machine, since host counters are not read.
    pub fn evaluate_wallclock(
        &self,
        machine: &MachineModel,
        opts: RunOptions,
    ) -> Result<Evaluation, WorkloadError> {
        let mut eval = self.evaluate_virtual(machine)?;
        eval.mflops = match self {
            Workload::Probe(p) => probe::run_probe(p, opts)?.mflops,
            Workload::Kernel(k) => k.run_timed()?.mflops,
        };
        Ok(eval)
    }
}

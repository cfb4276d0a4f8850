//! Kernel-based validation of the probe-mix model across two machines.
//!
//! 1. Measure every kernel data set on the origin machine.
//! 2. Collect metric points for the same runs on the origin machine.
//! 3. Bin each kernel's points into a weight grid.
//! 4. Measure the kernels on the target machine.
//! 5. Select probes from the origin catalog and run them on both machines;
//!    the weighted probe throughput is the prediction.
//! 6. Compare predictions with the measured means.
//!
//! Every data set carries the same total weight, and the measured mean of a
//! kernel is the plain mean of its data sets' throughputs.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counters::MetricPoint;
use crate::mixmodel::{
    self, CatalogEntry, GridConfig, MixError, PredictOptions, ProbeCatalog, SelectOptions,
    Selection, WeightGrid,
};
use crate::probe::RunOptions;
use crate::refkernels::{KernelCase, KernelName};
use crate::sweep::{self, SweepConfig, SweepError};
use crate::vcache::{MachineError, MachineModel};
use crate::workload::{Backend, Workload, WorkloadError};

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("invalid validation config: {0}")]
    Config(String),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("{kernel}: {source}")]
    Mix { kernel: KernelName, source: MixError },
}

/// A machine given inline or as a path to its own file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MachineSpec {
    File(PathBuf),
    Inline(MachineModel),
}

impl MachineSpec {
    pub fn resolve(&self, base: &Path) -> Result<MachineModel, MachineError> {
        match self {
            MachineSpec::File(p) => MachineModel::load(&base.join(p)),
            MachineSpec::Inline(m) => {
                m.validate()?;
                Ok(m.clone())
            }
        }
    }
}

fn default_tolerance() -> f64 {
    15.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    #[serde(default)]
    pub backend: Backend,
    pub origin: MachineSpec,
    pub target: MachineSpec,
    /// Probe sweep run on the origin machine to build the catalog.
    pub sweep: SweepConfig,
    pub kernels: Vec<KernelCase>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub select: SelectOptions,
    #[serde(default)]
    pub predict: PredictOptions,
    /// Split each run into windows of this many accesses, one metric point
    /// per window. Without it every data set is a single point.
    #[serde(default)]
    pub window_accesses: Option<u64>,
    /// Add the kernel runs themselves to the probe catalog.
    #[serde(default)]
    pub catalog_includes_kernels: bool,
    /// Largest acceptable |deviation| in percent.
    #[serde(default = "default_tolerance")]
    pub tolerance_percent: f64,
}

impl ValidateConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ValidateError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ValidateError::Config(e.to_string()))?;
        if cfg.kernels.is_empty() {
            return Err(ValidateError::Config("no kernels listed".into()));
        }
        if cfg.window_accesses == Some(0) {
            return Err(ValidateError::Config("window_accesses must be positive".into()));
        }
        cfg.grid
            .validate()
            .map_err(|e| ValidateError::Config(e.to_string()))?;
        cfg.sweep.validate()?;
        Ok(cfg)
    }

    /// Loads a config; machine paths are relative to the config's directory.
    pub fn load(path: &Path) -> Result<(Self, MachineModel, MachineModel), ValidateError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ValidateError::Config(format!("{}: {e}", path.display())))?;
        let cfg = Self::from_toml_str(&text)
            .map_err(|e| ValidateError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let origin = cfg.origin.resolve(base)?;
        let target = cfg.target.resolve(base)?;
        Ok((cfg, origin, target))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSetResult {
    pub label: String,
    pub digest: String,
    pub origin_mflops: f64,
    pub target_mflops: f64,
    pub origin_point: MetricPoint,
}

/// A selected probe and its throughput on both machines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeChoice {
    pub col: u32,
    pub row: u32,
    pub weight: f64,
    pub label: String,
    pub digest: String,
    pub origin_mflops: f64,
    pub target_mflops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineComparison {
    pub measured_mflops: f64,
    pub predicted_mflops: f64,
    pub deviation_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelValidation {
    pub kernel: KernelName,
    /// Steps 1 and 4, per data set.
    pub data_sets: Vec<DataSetResult>,
    /// Step 2.
    pub metric_points: usize,
    /// Step 3.
    pub weights: WeightGrid,
    /// Step 5.
    pub probes: Vec<ProbeChoice>,
    pub coverage: f64,
    pub uncovered_weight: f64,
    /// Step 6.
    pub origin: MachineComparison,
    pub target: MachineComparison,
    pub within_tolerance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub backend: Backend,
    pub origin_machine: MachineModel,
    pub target_machine: MachineModel,
    pub catalog_entries: usize,
    pub tolerance_percent: f64,
    pub kernels: Vec<KernelValidation>,
    pub passed: bool,
}

fn deviation_percent(predicted: f64, measured: f64) -> f64 {
    100.0 * (predicted - measured) / measured
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

struct SetRun {
    kernel: KernelName,
    result: DataSetResult,
    points: Vec<MetricPoint>,
    origin_eval_entry: CatalogEntry,
}

fn run_data_set(
    case: &KernelCase,
    cfg: &ValidateConfig,
    origin: &MachineModel,
    target: &MachineModel,
) -> Result<SetRun, ValidateError> {
    let w = Workload::Kernel(case.clone());
    let opts = RunOptions::default();
    let on_origin = w.evaluate(origin, cfg.backend, opts)?;
    let on_target = w.evaluate(target, cfg.backend, opts)?;
    let mut points = match cfg.window_accesses {
        Some(window) => w.sample_virtual(origin, window)?,
        None => vec![on_origin.point.clone()],
    };
    // each data set carries unit weight
    let total: f64 = points.iter().map(|p| p.weight).sum();
    let count = points.len() as f64;
    for p in &mut points {
        p.weight = if total > 0.0 { p.weight / total } else { 1.0 / count };
    }
    Ok(SetRun {
        kernel: case.name(),
        result: DataSetResult {
            label: w.label(),
            digest: w.digest(),
            origin_mflops: on_origin.mflops,
            target_mflops: on_target.mflops,
            origin_point: on_origin.point.clone(),
        },
        points,
        origin_eval_entry: CatalogEntry::new(w, on_origin.point, on_origin.mflops),
    })
}

fn with_target_mflops(selection: &Selection, target_mflops: &[f64]) -> Selection {
    let mut s = selection.clone();
    for (cell, &m) in s.selected.iter_mut().zip(target_mflops) {
        cell.entry.mflops = m;
    }
    s
}

/// Runs the six steps with a catalog swept on the origin machine.
pub fn run_validation(
    cfg: &ValidateConfig,
    origin: &MachineModel,
    target: &MachineModel,
) -> Result<ValidationReport, ValidateError> {
    let sweep_cfg = SweepConfig {
        backend: cfg.backend,
        ..cfg.sweep.clone()
    };
    let catalog = sweep::sweep_catalog(&sweep_cfg, origin)?;
    run_validation_with_catalog(cfg, origin, target, catalog)
}

pub fn run_validation_with_catalog(
    cfg: &ValidateConfig,
    origin: &MachineModel,
    target: &MachineModel,
    mut catalog: ProbeCatalog,
) -> Result<ValidationReport, ValidateError> {
    let runs: Vec<SetRun> = cfg
        .kernels
        .par_iter()
        .map(|case| run_data_set(case, cfg, origin, target))
        .collect::<Result<_, _>>()?;
    if cfg.catalog_includes_kernels {
        for r in &runs {
            if !catalog.contains(&r.origin_eval_entry.digest) {
                catalog
                    .push(r.origin_eval_entry.clone())
                    .expect("digest checked above");
            }
        }
    }

    let mut names: Vec<KernelName> = cfg.kernels.iter().map(|k| k.name()).collect();
    names.sort();
    names.dedup();

    let mut kernels = Vec::new();
    for name in names {
        let sets: Vec<&SetRun> = runs.iter().filter(|r| r.kernel == name).collect();
        let mix_err = |source| ValidateError::Mix { kernel: name, source };

        let points: Vec<&MetricPoint> = sets.iter().flat_map(|s| &s.points).collect();
        let weights = mixmodel::kernel_weights(points.iter().copied(), &cfg.grid).map_err(mix_err)?;
        let selection = mixmodel::select_probe_points(&weights, &catalog, &cfg.select);

        let target_mflops: Vec<f64> = selection
            .selected
            .par_iter()
            .map(|s| {
                s.entry
                    .workload
                    .evaluate(target, cfg.backend, RunOptions::default())
                    .map(|e| e.mflops)
            })
            .collect::<Result<_, _>>()?;
        let on_origin = mixmodel::predict(&selection, &cfg.predict).map_err(mix_err)?;
        let on_target = mixmodel::predict(&with_target_mflops(&selection, &target_mflops), &cfg.predict)
            .map_err(mix_err)?;

        let measured_origin = mean(sets.iter().map(|s| s.result.origin_mflops));
        let measured_target = mean(sets.iter().map(|s| s.result.target_mflops));
        let origin_cmp = MachineComparison {
            measured_mflops: measured_origin,
            predicted_mflops: on_origin.predicted_mflops,
            deviation_percent: deviation_percent(on_origin.predicted_mflops, measured_origin),
        };
        let target_cmp = MachineComparison {
            measured_mflops: measured_target,
            predicted_mflops: on_target.predicted_mflops,
            deviation_percent: deviation_percent(on_target.predicted_mflops, measured_target),
        };
        let within_tolerance = origin_cmp.deviation_percent.abs() <= cfg.tolerance_percent
            && target_cmp.deviation_percent.abs() <= cfg.tolerance_percent;
        let probes = selection
            .selected
            .iter()
            .zip(&target_mflops)
            .map(|(s, &t)| ProbeChoice {
                col: s.col,
                row: s.row,
                weight: s.weight,
                label: s.entry.workload.label(),
                digest: s.entry.digest.clone(),
                origin_mflops: s.entry.mflops,
                target_mflops: t,
            })
            .collect();
        kernels.push(KernelValidation {
            kernel: name,
            data_sets: sets.iter().map(|s| s.result.clone()).collect(),
            metric_points: points.len(),
            weights,
            probes,
            coverage: selection.coverage,
            uncovered_weight: selection.uncovered.iter().map(|u| u.weight).sum(),
            origin: origin_cmp,
            target: target_cmp,
            within_tolerance,
        });
    }
    let passed = kernels.iter().all(|k| k.within_tolerance);
    Ok(ValidationReport {
        backend: cfg.backend,
        origin_machine: origin.clone(),
        target_machine: target.clone(),
        catalog_entries: catalog.len(),
        tolerance_percent: cfg.tolerance_percent,
        kernels,
        passed,
    })
}

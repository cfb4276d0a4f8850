//! Python bindings for `apexmap`.
//!
//! Structured results (grids, predictions, counters) are returned as plain
//! dicts and lists.

use std::collections::HashSet;

use apexmap::counters::{self, CounterSample};
use apexmap::mixmodel::{self, GridConfig, PredictOptions, SelectOptions, WeightBy};
use apexmap::probe::{self, RunOptions};
use apexmap::refkernels::{self, CsrMatrix, DenseMatrix, KernelCase};
use apexmap::sweep;
use apexmap::vcache::{self, Associativity};
use apexmap::workload::{Backend, Workload};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Converts any serialisable value into Python objects via JSON.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "ProbeParams", module = "apexmap", frozen, from_py_object)]
#[derive(Clone)]
struct PyProbeParams {
    inner: probe::ProbeParams,
}

#[pymethods]
impl PyProbeParams {
    /// Strided probe over `mem_elements` 8-byte elements.
    #[staticmethod]
    #[pyo3(signature = (mem_elements, stride, intensity = 0))]
    fn strided(mem_elements: u64, stride: u64, intensity: u32) -> PyResult<Self> {
        let inner = probe::ProbeParams::strided(mem_elements, stride, intensity);
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Random probe: `index_count` sub-vectors of `vector_length` elements.
    #[staticmethod]
    #[pyo3(signature = (mem_elements, vector_length, alpha, intensity = 0, index_count = 50, seed = 0))]
    fn random(
        mem_elements: u64,
        vector_length: u64,
        alpha: f64,
        intensity: u32,
        index_count: u64,
        seed: u64,
    ) -> PyResult<Self> {
        let inner =
            probe::ProbeParams::random(mem_elements, vector_length, alpha, intensity, index_count, seed);
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[getter]
    fn mem_elements(&self) -> u64 {
        self.inner.mem_elements
    }

    #[getter]
    fn vector_length(&self) -> u64 {
        self.inner.vector_length
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn stride(&self) -> u64 {
        self.inner.stride
    }

    #[getter]
    fn intensity(&self) -> u32 {
        self.inner.intensity
    }

    #[getter]
    fn index_count(&self) -> u64 {
        self.inner.index_count
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn flop_count(&self) -> u64 {
        probe::flop_count(&self.inner)
    }

    fn access_count(&self) -> u64 {
        self.inner.access_count()
    }

    /// Start indices of the random sub-vectors.
    fn indices(&self) -> PyResult<Vec<u64>> {
        Ok(probe::seeded_indices(&self.inner).map_err(value_err)?.starts)
    }

    /// Element indices in access order.
    #[pyo3(signature = (cap = probe::DEFAULT_TRACE_CAP))]
    fn trace(&self, cap: u64) -> PyResult<Vec<u64>> {
        Ok(probe::emit_trace_capped(&self.inner, cap)
            .map_err(value_err)?
            .element_indices)
    }

    /// Times the probe on this host.
    #[pyo3(signature = (repetitions = 1))]
    fn run<'py>(&self, py: Python<'py>, repetitions: u32) -> PyResult<Bound<'py, PyAny>> {
        let m = py
            .detach(|| probe::run_probe(&self.inner, RunOptions { repetitions }))
            .map_err(value_err)?;
        to_py(py, &m)
    }

    fn __repr__(&self) -> String {
        format!("ProbeParams({})", self.inner.label())
    }
}

#[pyclass(name = "MachineModel", module = "apexmap", frozen, from_py_object)]
#[derive(Clone)]
struct PyMachineModel {
    inner: vcache::MachineModel,
}

#[pymethods]
impl PyMachineModel {
    /// `associativity` is a way count, or None for a fully associative cache.
    #[new]
    #[pyo3(signature = (
        line_bytes = 128,
        cache_bytes = 8 << 20,
        associativity = None,
        peak_flops_per_cycle = 4.0,
        miss_penalty_cycles = 64,
        hit_cycles = 1,
        clock_ghz = 1.6,
    ))]
    fn new(
        line_bytes: u64,
        cache_bytes: u64,
        associativity: Option<u32>,
        peak_flops_per_cycle: f64,
        miss_penalty_cycles: u64,
        hit_cycles: u64,
        clock_ghz: f64,
    ) -> PyResult<Self> {
        let inner = vcache::MachineModel {
            line_bytes,
            cache_bytes,
            associativity: associativity.map_or(Associativity::Full, Associativity::Ways),
            peak_flops_per_cycle,
            miss_penalty_cycles,
            hit_cycles,
            clock_ghz,
        };
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = vcache::MachineModel::from_toml_str(text).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn line_bytes(&self) -> u64 {
        self.inner.line_bytes
    }

    #[getter]
    fn cache_bytes(&self) -> u64 {
        self.inner.cache_bytes
    }

    #[getter]
    fn peak_flops_per_cycle(&self) -> f64 {
        self.inner.peak_flops_per_cycle
    }

    #[getter]
    fn clock_ghz(&self) -> f64 {
        self.inner.clock_ghz
    }

    fn __repr__(&self) -> String {
        format!("MachineModel({})", self.inner.to_toml_string().trim().replace('\n', ", "))
    }
}

fn evaluation_dict<'py>(
    py: Python<'py>,
    eval: &apexmap::workload::Evaluation,
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("fp_ops", eval.counters.fp_ops)?;
    d.set_item("cycles", eval.counters.cycles)?;
    d.set_item("l3_misses", eval.counters.l3_misses)?;
    d.set_item("l3_hits", eval.counters.l3_hits)?;
    d.set_item("flops_per_cycle", eval.point.flops_per_cycle)?;
    d.set_item("miss_bytes_per_cycle", eval.point.miss_bytes_per_cycle)?;
    d.set_item("mflops", eval.mflops)?;
    Ok(d)
}

/// Runs a probe on the virtual machine from a cold cache.
#[pyfunction]
fn simulate<'py>(
    py: Python<'py>,
    params: PyProbeParams,
    machine: PyMachineModel,
) -> PyResult<Bound<'py, PyDict>> {
    let eval = py
        .detach(|| Workload::Probe(params.inner.clone()).evaluate_virtual(&machine.inner))
        .map_err(value_err)?;
    evaluation_dict(py, &eval)
}

/// Runs a reference kernel on the virtual machine. `kernel` is "mod2am"
/// (needs `n`) or "mod2as" (needs `rows` and `fill_ratio`).
#[pyfunction]
#[pyo3(signature = (kernel, machine, n = None, rows = None, fill_ratio = None, seed = 0))]
fn simulate_kernel<'py>(
    py: Python<'py>,
    kernel: &str,
    machine: PyMachineModel,
    n: Option<usize>,
    rows: Option<usize>,
    fill_ratio: Option<f64>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let case = match (kernel, n, rows, fill_ratio) {
        ("mod2am", Some(n), None, None) => KernelCase::Mod2am { n, seed },
        ("mod2as", None, Some(rows), Some(fill_ratio)) => KernelCase::Mod2as {
            rows,
            fill_ratio,
            seed,
        },
        _ => {
            return Err(PyValueError::new_err(
                "expected kernel='mod2am' with n, or kernel='mod2as' with rows and fill_ratio",
            ))
        }
    };
    let eval = py
        .detach(|| Workload::Kernel(case).evaluate_virtual(&machine.inner))
        .map_err(value_err)?;
    evaluation_dict(py, &eval)
}

/// Parses counter-sample CSV text. Returns (samples, rejects).
#[pyfunction]
fn parse_samples<'py>(
    py: Python<'py>,
    text: &str,
) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let log = counters::parse_samples(text.as_bytes()).map_err(value_err)?;
    Ok((to_py(py, &log.samples)?, to_py(py, &log.rejects)?))
}

fn samples_from_text(text: &str) -> PyResult<Vec<CounterSample>> {
    Ok(counters::parse_samples(text.as_bytes())
        .map_err(value_err)?
        .samples)
}

/// Cycle-weighted (miss bytes/cycle, flops/cycle) over all valid rows.
#[pyfunction]
#[pyo3(signature = (text, line_bytes = 128))]
fn summed_metric(text: &str, line_bytes: u64) -> PyResult<(f64, f64)> {
    let p = counters::summed_metric(&samples_from_text(text)?, line_bytes).map_err(value_err)?;
    Ok((p.miss_bytes_per_cycle, p.flops_per_cycle))
}

/// Bins (miss_bytes_per_cycle, flops_per_cycle, weight) triples.
#[pyfunction]
#[pyo3(signature = (points, cell_width = 0.5, cell_height = 0.5, extent_x = 4.0, extent_y = 4.0, count_points = false))]
fn bin_points<'py>(
    py: Python<'py>,
    points: Vec<(f64, f64, f64)>,
    cell_width: f64,
    cell_height: f64,
    extent_x: f64,
    extent_y: f64,
    count_points: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let config = GridConfig {
        cell_width,
        cell_height,
        extent_x,
        extent_y,
        weight_by: if count_points {
            WeightBy::Count
        } else {
            WeightBy::PointWeight
        },
    };
    let pts: Vec<_> = points
        .into_iter()
        .map(|(x, y, w)| {
            counters::MetricPoint::new(x, y, counters::MetricSource::HardwareSample).with_weight(w)
        })
        .collect();
    let grid = mixmodel::bin_points(&pts, &config).map_err(value_err)?;
    to_py(py, &grid)
}

/// Treats `mix` as the application: bins its virtual-machine points,
/// selects representatives from `catalog` and predicts the mix throughput.
/// The result also carries the mix's cycle-weighted true throughput.
#[pyfunction]
#[pyo3(signature = (mix, catalog, machine, min_weight = 0.005))]
fn predict_mix<'py>(
    py: Python<'py>,
    mix: Vec<PyProbeParams>,
    catalog: Vec<PyProbeParams>,
    machine: PyMachineModel,
    min_weight: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let m = &machine.inner;
    let unique = |ps: Vec<PyProbeParams>| {
        let mut seen = HashSet::new();
        ps.into_iter()
            .map(|p| p.inner)
            .filter(|p| seen.insert(p.digest()))
            .collect::<Vec<_>>()
    };
    let (mix, catalog) = (unique(mix), unique(catalog));
    let (prediction, truth) = py
        .detach(|| -> Result<_, String> {
            let mix_entries = sweep::evaluate_probes(&mix, m, Backend::Virtual, RunOptions::default())
                .map_err(|e| e.to_string())?;
            let cat_entries =
                sweep::evaluate_probes(&catalog, m, Backend::Virtual, RunOptions::default())
                    .map_err(|e| e.to_string())?;
            let cat = mixmodel::ProbeCatalog::from_entries(cat_entries).map_err(|e| e.to_string())?;
            let grid = mixmodel::bin_points(mix_entries.iter().map(|e| &e.point), &GridConfig::default())
                .map_err(|e| e.to_string())?;
            let sel = mixmodel::select_probe_points(
                &grid,
                &cat,
                &SelectOptions {
                    min_weight,
                    ..SelectOptions::default()
                },
            );
            let pred = mixmodel::predict(&sel, &PredictOptions::default()).map_err(|e| e.to_string())?;
            let flops: f64 = mix_entries.iter().map(|e| e.point.flops_per_cycle * e.point.weight).sum();
            let cycles: f64 = mix_entries.iter().map(|e| e.point.weight).sum();
            Ok((pred, flops / cycles * m.clock_ghz * 1e3))
        })
        .map_err(PyValueError::new_err)?;
    let out = to_py(py, &prediction)?;
    out.set_item("true_mflops", truth)?;
    Ok(out)
}

fn dense(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    DenseMatrix::new(r, c, rows.into_iter().flatten().collect()).map_err(value_err)
}

/// Dense product of two row-major matrices given as lists of rows.
#[pyfunction]
fn mod2am(py: Python<'_>, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let (a, b) = (dense(a)?, dense(b)?);
    let c = py.detach(|| refkernels::mod2am(&a, &b)).map_err(value_err)?;
    Ok(c.data.chunks(c.cols.max(1)).map(<[f64]>::to_vec).collect())
}

/// CSR matrix-vector product.
#[pyfunction]
fn mod2as(
    cols: usize,
    values: Vec<f64>,
    col_idx: Vec<usize>,
    row_ptr: Vec<usize>,
    x: Vec<f64>,
) -> PyResult<Vec<f64>> {
    let rows = row_ptr.len().saturating_sub(1);
    let a = CsrMatrix::new(rows, cols, values, col_idx, row_ptr).map_err(value_err)?;
    refkernels::mod2as(&a, &x).map_err(value_err)
}

/// Seeded random CSR matrix as a dict of its three arrays.
#[pyfunction]
fn generate_sparse<'py>(
    py: Python<'py>,
    rows: usize,
    cols: usize,
    fill_ratio: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let a = refkernels::generate_sparse(rows, cols, fill_ratio, seed).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("rows", a.rows)?;
    d.set_item("cols", a.cols)?;
    d.set_item("values", a.values)?;
    d.set_item("col_idx", a.col_idx)?;
    d.set_item("row_ptr", a.row_ptr)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "apexmap")]
fn apexmap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProbeParams>()?;
    m.add_class::<PyMachineModel>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(parse_samples, m)?)?;
    m.add_function(wrap_pyfunction!(summed_metric, m)?)?;
    m.add_function(wrap_pyfunction!(bin_points, m)?)?;
    m.add_function(wrap_pyfunction!(predict_mix, m)?)?;
    m.add_function(wrap_pyfunction!(mod2am, m)?)?;
    m.add_function(wrap_pyfunction!(mod2as, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sparse, m)?)?;
    Ok(())
}

//! Parameter sweeps that populate a probe catalog.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mixmodel::{CatalogEntry, ProbeCatalog};
use crate::probe::{self, AccessMode, ProbeParams, ProbeRng, RunOptions};
use crate::report::{self, CatalogWriter, ReportError};
use crate::vcache::{MachineModel, VirtualCounters, ELEMENT_BYTES};
use crate::workload::{Backend, Workload, WorkloadError};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep config: {0}")]
    Config(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

/// A byte count written either as an integer or as a string with a unit
/// suffix ("32 MiB", "1GB").
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MemSpec", into = "u64")]
pub struct MemBytes(pub u64);

#[derive(Deserialize)]
#[serde(untagged)]
enum MemSpec {
    Bytes(u64),
    Text(String),
}

impl TryFrom<MemSpec> for MemBytes {
    type Error = String;

    fn try_from(spec: MemSpec) -> Result<Self, String> {
        match spec {
            MemSpec::Bytes(b) => Ok(MemBytes(b)),
            MemSpec::Text(t) => t.parse(),
        }
    }
}

impl From<MemBytes> for u64 {
    fn from(m: MemBytes) -> u64 {
        m.0
    }
}

impl std::str::FromStr for MemBytes {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.trim()
            .parse::<bytesize::ByteSize>()
            .map(|b| MemBytes(b.as_u64()))
            .map_err(|e| format!("bad size {s:?}: {e}"))
    }
}

impl MemBytes {
    /// Element count; the size must be a whole number of elements.
    pub fn elements(self) -> Result<u64, String> {
        if self.0 < ELEMENT_BYTES || !self.0.is_multiple_of(ELEMENT_BYTES) {
            return Err(format!(
                "memory size {} is not a positive multiple of {ELEMENT_BYTES} bytes",
                self.0
            ));
        }
        Ok(self.0 / ELEMENT_BYTES)
    }
}

fn default_modes() -> Vec<AccessMode> {
    vec![AccessMode::Strided, AccessMode::Random]
}

fn default_index_count() -> u64 {
    50
}

fn default_repetitions() -> u32 {
    1
}

/// Sweep description. Strided combinations are strides × intensities;
/// random ones are alphas × vector_lengths × intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub seed: u64,
    pub mem: MemBytes,
    #[serde(default = "default_modes")]
    pub modes: Vec<AccessMode>,
    #[serde(default)]
    pub strides: Vec<u64>,
    #[serde(default)]
    pub intensities: Vec<u32>,
    #[serde(default)]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub vector_lengths: Vec<u64>,
    #[serde(default = "default_index_count")]
    pub index_count: u64,
    /// Worker threads; 0 lets the pool decide.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SweepError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SweepError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SweepError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SweepError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
            .map_err(|e| SweepError::Config(format!("{}: {e}", path.display())))
    }

    pub fn mem_elements(&self) -> Result<u64, SweepError> {
        self.mem.elements().map_err(SweepError::Config)
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        let bad = |m: String| Err(SweepError::Config(m));
        let m = self.mem_elements()?;
        if self.modes.is_empty() {
            return bad("modes is empty".into());
        }
        if self.intensities.is_empty() {
            return bad("intensities is empty".into());
        }
        if self.index_count == 0 {
            return bad("index_count must be at least 1".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if self.modes.contains(&AccessMode::Strided) {
            if self.strides.is_empty() {
                return bad("strided mode needs at least one stride".into());
            }
            if let Some(s) = self.strides.iter().find(|&&s| s == 0 || s > m) {
                return bad(format!("stride {s} outside [1, {m}]"));
            }
        }
        if self.modes.contains(&AccessMode::Random) {
            if self.alphas.is_empty() || self.vector_lengths.is_empty() {
                return bad("random mode needs alphas and vector_lengths".into());
            }
            if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                return bad(format!("alpha {a} outside [0, 1]"));
            }
            if let Some(l) = self.vector_lengths.iter().find(|&&l| l == 0 || l > m) {
                return bad(format!("vector_length {l} outside [1, {m}]"));
            }
        }
        Ok(())
    }

    /// Every combination, deduplicated by digest. Intensity is the innermost
    /// axis, so probes sharing an access stream are adjacent.
    pub fn combinations(&self) -> Result<Vec<ProbeParams>, SweepError> {
        self.validate()?;
        let m = self.mem_elements()?;
        let mut out = Vec::new();
        for mode in &self.modes {
            match mode {
                AccessMode::Strided => {
                    for &s in &self.strides {
                        for &c in &self.intensities {
                            out.push(ProbeParams::strided(m, s, c));
                        }
                    }
                }
                AccessMode::Random => {
                    for &a in &self.alphas {
                        for &l in &self.vector_lengths {
                            // whole blocks only
                            let ml = m - m % l;
                            for &c in &self.intensities {
                                out.push(ProbeParams::random(
                                    ml,
                                    l,
                                    a,
                                    c,
                                    self.index_count,
                                    self.seed,
                                ));
                            }
                        }
                    }
                }
            }
        }
        let mut seen = HashSet::new();
        out.retain(|p| seen.insert(p.digest()));
        Ok(out)
    }
}

/// Counts reported by [`run_sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SweepSummary {
    pub combinations: usize,
    pub already_present: usize,
    pub evaluated: usize,
}

fn stream_key(p: &ProbeParams) -> ProbeParams {
    ProbeParams { intensity: 0, ..p.clone() }
}

/// Splits parameters into runs that share one access stream.
fn stream_groups(params: &[ProbeParams]) -> Vec<&[ProbeParams]> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=params.len() {
        if i == params.len() || stream_key(&params[i]) != stream_key(&params[start]) {
            groups.push(&params[start..i]);
            start = i;
        }
    }
    groups
}

/// Evaluates probes that differ only in intensity. On the virtual backend
/// the cache is simulated once and the cycle model applied per intensity.
fn evaluate_group(
    group: &[ProbeParams],
    machine: &MachineModel,
    backend: Backend,
    opts: RunOptions,
) -> Result<Vec<CatalogEntry>, WorkloadError> {
    let mut out = Vec::with_capacity(group.len());
    match backend {
        Backend::Virtual => {
            let base = Workload::Probe(group[0].clone()).evaluate_virtual(machine)?.counters;
            for p in group {
                let fp_ops = probe::flop_count(p);
                let counters = VirtualCounters {
                    fp_ops,
                    cycles: machine.cycles_for(fp_ops, base.l3_misses, base.l3_hits),
                    l3_misses: base.l3_misses,
                    l3_hits: base.l3_hits,
                };
                let w = Workload::Probe(p.clone());
                let eval = w.evaluation_from(counters, machine)?;
                out.push(CatalogEntry::new(w, eval.point, eval.mflops));
            }
        }
        Backend::Wallclock => {
            for p in group {
                let w = Workload::Probe(p.clone());
                let eval = w.evaluate_wallclock(machine, opts)?;
                out.push(CatalogEntry::new(w, eval.point, eval.mflops));
            }
        }
    }
    Ok(out)
}

/// Evaluates a list of probes in parallel and returns entries in input
/// order.
pub fn evaluate_probes(
    params: &[ProbeParams],
    machine: &MachineModel,
    backend: Backend,
    opts: RunOptions,
) -> Result<Vec<CatalogEntry>, WorkloadError> {
    let groups = stream_groups(params);
    let parts: Result<Vec<_>, _> = groups
        .par_iter()
        .map(|g| evaluate_group(g, machine, backend, opts))
        .collect();
    Ok(parts?.into_iter().flatten().collect())
}

/// Runs every combination missing from `out`, appending rows as batches
/// complete. Row order follows combination order, so reruns and resumed
/// runs produce the same file.
pub fn run_sweep(
    config: &SweepConfig,
    machine: &MachineModel,
    out: &Path,
) -> Result<SweepSummary, SweepError> {
    let combos = config.combinations()?;
    let present: HashSet<String> = if out.exists() {
        report::read_catalog(out)?
            .catalog
            .entries()
            .iter()
            .map(|e| e.digest.clone())
            .collect()
    } else {
        HashSet::new()
    };
    let pending: Vec<ProbeParams> = combos
        .iter()
        .filter(|p| !present.contains(&p.digest()))
        .cloned()
        .collect();
    let writer = CatalogWriter::open(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| SweepError::Pool(e.to_string()))?;
    let opts = RunOptions {
        repetitions: config.repetitions,
    };
    let batch = (pool.current_num_threads() * 4).max(1);
    let groups = stream_groups(&pending);
    for chunk in groups.chunks(batch) {
        let results: Result<Vec<_>, WorkloadError> = pool.install(|| {
            chunk
                .par_iter()
                .map(|g| evaluate_group(g, machine, config.backend, opts))
                .collect()
        });
        for entry in results?.iter().flatten() {
            writer.append(entry)?;
        }
    }
    Ok(SweepSummary {
        combinations: combos.len(),
        already_present: combos.len() - pending.len(),
        evaluated: pending.len(),
    })
}

/// In-memory sweep, for tests and library callers.
pub fn sweep_catalog(config: &SweepConfig, machine: &MachineModel) -> Result<ProbeCatalog, SweepError> {
    let combos = config.combinations()?;
    let opts = RunOptions {
        repetitions: config.repetitions,
    };
    let entries = evaluate_probes(&combos, machine, config.backend, opts)?;
    ProbeCatalog::from_entries(entries).map_err(|e| SweepError::Config(e.to_string()))
}

/// Bounds for drawing probe parameters at random.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub mem_elements: u64,
    pub min_stride: u64,
    pub max_stride: u64,
    pub max_intensity: u32,
    pub max_vector_length: u64,
    pub index_count: u64,
}

impl Envelope {
    pub fn new(mem_elements: u64) -> Self {
        Self {
            mem_elements,
            min_stride: 2,
            max_stride: 400,
            max_intensity: 1000,
            max_vector_length: 4096,
            index_count: 50,
        }
    }

    fn log_uniform(rng: &mut ProbeRng, lo: u64, hi: u64) -> u64 {
        let (a, b) = ((lo as f64).ln(), ((hi + 1) as f64).ln());
        (rng.random_range(a..b).exp().floor() as u64).clamp(lo, hi)
    }

    /// One probe: strided or random with equal odds, stride, intensity and
    /// vector length log-uniform, alpha uniform.
    pub fn sample(&self, rng: &mut ProbeRng) -> ProbeParams {
        // intensity 0 gets the same share as each decade above it
        let c = if rng.random_bool(0.25) {
            0
        } else {
            Self::log_uniform(rng, 1, self.max_intensity as u64) as u32
        };
        if rng.random_bool(0.5) {
            let s = Self::log_uniform(rng, self.min_stride, self.max_stride);
            ProbeParams::strided(self.mem_elements, s, c)
        } else {
            let l = Self::log_uniform(rng, 1, self.max_vector_length);
            let alpha: f64 = rng.random_range(0.0..=1.0);
            let m = self.mem_elements - self.mem_elements % l;
            ProbeParams::random(m, l, alpha, c, self.index_count, rng.random())
        }
    }

    /// `n` distinct probes whose digests are not in `exclude`.
    pub fn sample_distinct(&self, n: usize, seed: u64, exclude: &HashSet<String>) -> Vec<ProbeParams> {
        let mut rng = ProbeRng::seed_from_u64(seed);
        let mut seen = exclude.clone();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let p = self.sample(&mut rng);
            if seen.insert(p.digest()) {
                out.push(p);
            }
        }
        out
    }
}

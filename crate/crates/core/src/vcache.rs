//! Deterministic virtual machine: a set-associative LRU cache in front of an
//! additive cycle model. Turns an access stream into flop, cycle, miss and
//! hit counts that stand in for hardware counters.

use std::fmt;
use std::num::NonZeroUsize;
use std::path::Path;

use lru::LruCache;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::counters::{MetricPoint, MetricSource};
use crate::probe::AccessTrace;

/// Size of one data element in bytes.
pub const ELEMENT_BYTES: u64 = 8;

#[derive(Debug, Error)]
pub enum MachineError {
    #[error("invalid machine model: {0}")]
    Invalid(String),
    #[error("cannot derive metrics from zero cycles")]
    ZeroCycles,
    #[error("reading machine file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing machine file {path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Associativity {
    Full,
    Ways(u32),
}

impl Serialize for Associativity {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Associativity::Full => s.serialize_str("full"),
            Associativity::Ways(w) => s.serialize_u32(*w),
        }
    }
}

impl<'de> Deserialize<'de> for Associativity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct AssocVisitor;
        impl Visitor<'_> for AssocVisitor {
            type Value = Associativity;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("\"full\" or a positive way count")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Associativity, E> {
                if v.eq_ignore_ascii_case("full") {
                    Ok(Associativity::Full)
                } else {
                    v.parse::<u32>()
                        .map(Associativity::Ways)
                        .map_err(|_| E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Associativity, E> {
                u32::try_from(v)
                    .map(Associativity::Ways)
                    .map_err(|_| E::invalid_value(de::Unexpected::Signed(v), &self))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Associativity, E> {
                u32::try_from(v)
                    .map(Associativity::Ways)
                    .map_err(|_| E::invalid_value(de::Unexpected::Unsigned(v), &self))
            }
        }
        d.deserialize_any(AssocVisitor)
    }
}

/// Parameters of the virtual machine.
///
/// Loadable from a TOML file whose keys are exactly the field names; missing
/// keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineModel {
    pub line_bytes: u64,
    pub cache_bytes: u64,
    pub associativity: Associativity,
    pub peak_flops_per_cycle: f64,
    pub miss_penalty_cycles: u64,
    pub hit_cycles: u64,
    /// Clock used to turn cycles into seconds (and MFlops).
    pub clock_ghz: f64,
}

impl Default for MachineModel {
    fn default() -> Self {
        Self {
            line_bytes: 128,
            cache_bytes: 8 << 20,
            associativity: Associativity::Full,
            peak_flops_per_cycle: 4.0,
            miss_penalty_cycles: 64,
            hit_cycles: 1,
            clock_ghz: 1.6,
        }
    }
}

impl MachineModel {
    pub fn validate(&self) -> Result<(), MachineError> {
        if !self.line_bytes.is_power_of_two() || self.line_bytes < ELEMENT_BYTES {
            return Err(MachineError::Invalid(format!(
                "line_bytes {} must be a power of two >= {ELEMENT_BYTES}",
                self.line_bytes
            )));
        }
        let ways = match self.associativity {
            Associativity::Full => 1,
            Associativity::Ways(0) => {
                return Err(MachineError::Invalid("associativity must be >= 1".into()))
            }
            Associativity::Ways(w) => u64::from(w),
        };
        if self.cache_bytes == 0 || !self.cache_bytes.is_multiple_of(self.line_bytes * ways) {
            return Err(MachineError::Invalid(format!(
                "cache_bytes {} is not a positive multiple of line_bytes x ways ({})",
                self.cache_bytes,
                self.line_bytes * ways
            )));
        }
        if !(self.peak_flops_per_cycle > 0.0) || !self.peak_flops_per_cycle.is_finite() {
            return Err(MachineError::Invalid("peak_flops_per_cycle must be > 0".into()));
        }
        if self.miss_penalty_cycles < self.hit_cycles {
            return Err(MachineError::Invalid(
                "miss_penalty_cycles must be >= hit_cycles".into(),
            ));
        }
        if !(self.clock_ghz > 0.0) || !self.clock_ghz.is_finite() {
            return Err(MachineError::Invalid("clock_ghz must be > 0".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, MachineError> {
        let text = std::fs::read_to_string(path).map_err(|source| MachineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let model = Self::from_toml_str(&text).map_err(|source| MachineError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("machine model serialises")
    }

    pub fn lines(&self) -> u64 {
        self.cache_bytes / self.line_bytes
    }

    fn geometry(&self) -> (usize, usize) {
        let lines = self.lines() as usize;
        match self.associativity {
            Associativity::Full => (1, lines),
            Associativity::Ways(w) => (lines / w as usize, w as usize),
        }
    }

    /// Cycles charged for the given counts.
    pub fn cycles_for(&self, fp_ops: u64, misses: u64, hits: u64) -> u64 {
        let flop_cycles = (fp_ops as f64 / self.peak_flops_per_cycle).ceil() as u64;
        flop_cycles + misses * self.miss_penalty_cycles + hits * self.hit_cycles
    }

    pub fn seconds(&self, cycles: u64) -> f64 {
        cycles as f64 / (self.clock_ghz * 1e9)
    }

    /// MFlops implied by a flop count executed in `cycles`.
    pub fn mflops(&self, fp_ops: u64, cycles: u64) -> f64 {
        if cycles == 0 {
            return 0.0;
        }
        fp_ops as f64 / cycles as f64 * self.clock_ghz * 1e3
    }
}

/// LRU cache over line addresses.
pub struct CacheSim {
    sets: Vec<LruCache<u64, ()>>,
    line_shift: u32,
    last_line: Option<u64>,
    hits: u64,
    misses: u64,
}

impl CacheSim {
    pub fn new(machine: &MachineModel) -> Self {
        let (num_sets, ways) = machine.geometry();
        let ways = NonZeroUsize::new(ways).expect("validated machine has ways >= 1");
        Self {
            sets: (0..num_sets).map(|_| LruCache::new(ways)).collect(),
            line_shift: machine.line_bytes.trailing_zeros(),
            last_line: None,
            hits: 0,
            misses: 0,
        }
    }

    /// Accesses an 8-byte element; returns true on a hit.
    pub fn access_element(&mut self, element: u64) -> bool {
        self.access_line((element * ELEMENT_BYTES) >> self.line_shift)
    }

    pub fn access_line(&mut self, line: u64) -> bool {
        // a repeat of the most recent line is already MRU in its set
        if self.last_line == Some(line) {
            self.hits += 1;
            return true;
        }
        self.last_line = Some(line);
        let nsets = self.sets.len() as u64;
        let set = &mut self.sets[(line % nsets) as usize];
        if set.get(&line).is_some() {
            self.hits += 1;
            true
        } else {
            set.push(line, ());
            self.misses += 1;
            false
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }
}

/// Simulated counter values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualCounters {
    pub fp_ops: u64,
    pub cycles: u64,
    pub l3_misses: u64,
    pub l3_hits: u64,
}

impl VirtualCounters {
    pub fn accesses(&self) -> u64 {
        self.l3_misses + self.l3_hits
    }
}

/// Runs an access stream through a cold cache.
pub fn simulate_stream(
    fp_ops: u64,
    machine: &MachineModel,
    replay: impl FnOnce(&mut dyn FnMut(u64)),
) -> VirtualCounters {
    let mut sim = CacheSim::new(machine);
    replay(&mut |element| {
        sim.access_element(element);
    });
    counters_from(machine, fp_ops, sim.misses(), sim.hits())
}

fn counters_from(machine: &MachineModel, fp_ops: u64, misses: u64, hits: u64) -> VirtualCounters {
    VirtualCounters {
        fp_ops,
        cycles: machine.cycles_for(fp_ops, misses, hits),
        l3_misses: misses,
        l3_hits: hits,
    }
}

pub fn simulate(trace: &AccessTrace, machine: &MachineModel) -> VirtualCounters {
    simulate_stream(trace.flops_total, machine, |visit| {
        for &e in &trace.element_indices {
            visit(e);
        }
    })
}

/// Like [`simulate_stream`], but closes a counter window every
/// `window_accesses` accesses, as a sampling daemon would. Flops are spread
/// evenly over accesses; the windows sum to the whole-run counters up to
/// the rounding of the flop split.
pub fn simulate_windows(
    fp_ops: u64,
    total_accesses: u64,
    window_accesses: u64,
    machine: &MachineModel,
    replay: impl FnOnce(&mut dyn FnMut(u64)),
) -> Vec<VirtualCounters> {
    let window = window_accesses.max(1);
    let mut sim = CacheSim::new(machine);
    let mut windows = Vec::new();
    let mut seen = 0u64;
    let mut flops_assigned = 0u64;
    let (mut base_hits, mut base_misses) = (0u64, 0u64);
    let mut close = |sim: &CacheSim, seen: u64, windows: &mut Vec<VirtualCounters>| {
        let flops_upto = if total_accesses == 0 {
            fp_ops
        } else {
            ((fp_ops as u128 * seen as u128) / total_accesses as u128) as u64
        };
        let flops = flops_upto - flops_assigned;
        flops_assigned = flops_upto;
        windows.push(counters_from(
            machine,
            flops,
            sim.misses() - base_misses,
            sim.hits() - base_hits,
        ));
        base_hits = sim.hits();
        base_misses = sim.misses();
    };
    replay(&mut |element| {
        sim.access_element(element);
        seen += 1;
        if seen.is_multiple_of(window) {
            close(&sim, seen, &mut windows);
        }
    });
    if !seen.is_multiple_of(window) || windows.is_empty() {
        close(&sim, seen, &mut windows);
    }
    windows
}

/// Metric-plane coordinates of a counter set.
pub fn derive_metrics(
    counters: &VirtualCounters,
    machine: &MachineModel,
) -> Result<MetricPoint, MachineError> {
    if counters.cycles == 0 {
        return Err(MachineError::ZeroCycles);
    }
    let cycles = counters.cycles as f64;
    Ok(MetricPoint {
        flops_per_cycle: counters.fp_ops as f64 / cycles,
        miss_bytes_per_cycle: (counters.l3_misses * machine.line_bytes) as f64 / cycles,
        source: MetricSource::VirtualProbe,
        label: None,
        weight: cycles,
    })
}

//! Tunable memory-access probes.
//!
//! Two kernels walk an 8-byte element block: a strided sweep that touches
//! every `stride`-th element, and a random kernel that reads `index_count`
//! contiguous sub-vectors whose start blocks follow a power distribution.
//! Every access is followed by a call to [`compute_kernel`], which raises the
//! flop-to-access ratio without touching the data block.
//!
//! Flop accounting is fixed by [`per_access_flops`] and shared by the timing
//! kernels, trace emission and the virtual machine.

use std::fmt;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// PRNG used for every seeded draw in the crate.
pub type ProbeRng = Xoshiro256PlusPlus;

/// Default cap on materialised trace length.
pub const DEFAULT_TRACE_CAP: u64 = 1 << 28;

/// Flops in one iteration of the compute loop body (8 rows of 8 products).
pub const COMPUTE_BODY_FLOPS: u64 = 128;
/// Flops in the final reduction of the eight partial sums.
pub const COMPUTE_REDUCTION_FLOPS: u64 = 7;
/// Multiply and accumulate of the data element itself.
pub const DATA_ACCESS_FLOPS: u64 = 2;
/// Accumulate of the compute result into the running sum.
pub const COMPUTE_ACCUMULATE_FLOPS: u64 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("invalid probe parameters: {0}")]
    InvalidParams(String),
    #[error("parameters are for {expected:?} mode, got {actual:?}")]
    WrongMode { expected: AccessMode, actual: AccessMode },
    #[error("could not allocate a block of {elements} elements")]
    Allocation { elements: u64 },
    #[error("trace of {accesses} accesses exceeds the cap of {cap}")]
    TraceTooLong { accesses: u64, cap: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessMode {
    Strided,
    Random,
}

impl fmt::Display for AccessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccessMode::Strided => f.write_str("strided"),
            AccessMode::Random => f.write_str("random"),
        }
    }
}

/// Probe configuration. All sizes are in 8-byte elements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub mode: AccessMode,
    pub mem_elements: u64,
    pub vector_length: u64,
    pub alpha: f64,
    pub stride: u64,
    pub intensity: u32,
    pub index_count: u64,
    pub seed: u64,
}

impl ProbeParams {
    /// Strided probe; the random-mode knobs are set to neutral values.
    pub fn strided(mem_elements: u64, stride: u64, intensity: u32) -> Self {
        Self {
            mode: AccessMode::Strided,
            mem_elements,
            vector_length: 1,
            alpha: 1.0,
            stride,
            intensity,
            index_count: 1,
            seed: 0,
        }
    }

    /// Random probe; `stride` is unused and set to 1.
    pub fn random(
        mem_elements: u64,
        vector_length: u64,
        alpha: f64,
        intensity: u32,
        index_count: u64,
        seed: u64,
    ) -> Self {
        Self {
            mode: AccessMode::Random,
            mem_elements,
            vector_length,
            alpha,
            stride: 1,
            intensity,
            index_count,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ProbeError::AlphaOutOfRange(self.alpha));
        }
        if self.mem_elements == 0 {
            return Err(ProbeError::InvalidParams("mem_elements must be positive".into()));
        }
        if self.index_count == 0 {
            return Err(ProbeError::InvalidParams("index_count must be at least 1".into()));
        }
        match self.mode {
            AccessMode::Strided => {
                if self.stride == 0 || self.stride > self.mem_elements {
                    return Err(ProbeError::InvalidParams(format!(
                        "stride {} outside [1, {}]",
                        self.stride, self.mem_elements
                    )));
                }
            }
            AccessMode::Random => {
                if self.vector_length == 0 || self.vector_length > self.mem_elements {
                    return Err(ProbeError::InvalidParams(format!(
                        "vector_length {} outside [1, {}]",
                        self.vector_length, self.mem_elements
                    )));
                }
                if !self.mem_elements.is_multiple_of(self.vector_length) {
                    return Err(ProbeError::InvalidParams(format!(
                        "mem_elements {} is not a multiple of vector_length {}",
                        self.mem_elements, self.vector_length
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of data-block accesses one pass performs.
    pub fn access_count(&self) -> u64 {
        match self.mode {
            AccessMode::Strided => self.mem_elements / self.stride.max(1),
            AccessMode::Random => self.index_count * self.vector_length,
        }
    }

    /// Number of whole sub-blocks in the data block (random mode).
    pub fn block_count(&self) -> u64 {
        self.mem_elements / self.vector_length.max(1)
    }

    /// Stable identifier: lowercase hex of a SHA-256 over the canonical
    /// parameter encoding, truncated to 128 bits.
    pub fn digest(&self) -> String {
        let canonical = format!(
            "probe|{}|{}|{}|{:016x}|{}|{}|{}|{}",
            self.mode,
            self.mem_elements,
            self.vector_length,
            self.alpha.to_bits(),
            self.stride,
            self.intensity,
            self.index_count,
            self.seed
        );
        short_digest(&canonical)
    }

    /// Short human-readable label used in reports.
    pub fn label(&self) -> String {
        match self.mode {
            AccessMode::Strided => format!(
                "strided M={} S={} C={}",
                self.mem_elements, self.stride, self.intensity
            ),
            AccessMode::Random => format!(
                "random M={} L={} a={} C={} I={}",
                self.mem_elements, self.vector_length, self.alpha, self.intensity, self.index_count
            ),
        }
    }
}

pub(crate) fn short_digest(canonical: &str) -> String {
    let hash = Sha256::digest(canonical.as_bytes());
    hash[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// Flops charged for one data-block access at the given intensity.
pub fn per_access_flops(intensity: u32) -> u64 {
    DATA_ACCESS_FLOPS
        + COMPUTE_ACCUMULATE_FLOPS
        + COMPUTE_BODY_FLOPS * u64::from(intensity)
        + COMPUTE_REDUCTION_FLOPS
}

/// Canonical flop count of one pass of the probe.
pub fn flop_count(params: &ProbeParams) -> u64 {
    params.access_count() * per_access_flops(params.intensity)
}

/// Start indices of the random kernel's sub-vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexBuffer {
    pub starts: Vec<u64>,
    /// Set when alpha > 0 but the block holds a single sub-vector, so the
    /// distribution has no support beyond block 0.
    pub single_block: bool,
}

/// Draws `index_count` start indices from the power distribution.
///
/// Block index `floor(u^(1/alpha) * M/L)` for uniform `u` in [0, 1), scaled by
/// `L`. Start indices are therefore block-aligned and lie in `[0, M - L]`.
/// `alpha = 0` is the limit of the distribution: every start is 0.
pub fn generate_indices<R: Rng + ?Sized>(
    params: &ProbeParams,
    rng: &mut R,
) -> Result<IndexBuffer, ProbeError> {
    if params.mode != AccessMode::Random {
        return Err(ProbeError::WrongMode {
            expected: AccessMode::Random,
            actual: params.mode,
        });
    }
    params.validate()?;
    let blocks = params.block_count();
    let len = params.index_count as usize;
    if params.alpha == 0.0 {
        return Ok(IndexBuffer {
            starts: vec![0; len],
            single_block: false,
        });
    }
    let exponent = 1.0 / params.alpha;
    let scale = blocks as f64;
    let last = blocks - 1;
    let starts = (0..len)
        .map(|_| {
            let u: f64 = rng.random();
            let block = ((u.powf(exponent) * scale) as u64).min(last);
            block * params.vector_length
        })
        .collect();
    Ok(IndexBuffer {
        starts,
        single_block: blocks < 2,
    })
}

/// Index buffer seeded from `params.seed`.
pub fn seeded_indices(params: &ProbeParams) -> Result<IndexBuffer, ProbeError> {
    let mut rng = ProbeRng::seed_from_u64(params.seed);
    generate_indices(params, &mut rng)
}

// Operands of the compute loop: one cache line's worth of data.
const COMPUTE_X: [f64; 8] = [1.0e-3, 2.0e-3, 3.0e-3, 4.0e-3, 5.0e-3, 6.0e-3, 7.0e-3, 8.0e-3];
const COMPUTE_Y: [f64; 8] = [1.5e-3, 2.5e-3, 3.5e-3, 4.5e-3, 5.5e-3, 6.5e-3, 7.5e-3, 8.5e-3];

#[inline(never)]
fn dummy(partials: &mut [f64; 8]) {
    black_box(partials);
}

/// Cache-resident compute loop: `intensity` iterations of 128 flops followed
/// by a 7-flop reduction. Each iteration passes the partial sums through an
/// opaque call so the optimiser cannot collapse the loop.
pub fn compute_kernel(intensity: u32) -> f64 {
    let x = black_box(COMPUTE_X);
    let y = black_box(COMPUTE_Y);
    let mut s = [0.0f64; 8];
    for _ in 0..intensity {
        dummy(&mut s);
        for (row, partial) in s.iter_mut().enumerate() {
            let xr = x[row];
            *partial += ((xr * y[0]) + (xr * y[1]))
                + ((xr * y[2]) + (xr * y[3]))
                + ((xr * y[4]) + (xr * y[5]))
                + ((xr * y[6]) + (xr * y[7]));
        }
    }
    ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]))
}

/// Calls `visit` with every element index the kernel dereferences, in order.
pub fn for_each_access(
    params: &ProbeParams,
    indices: Option<&IndexBuffer>,
    mut visit: impl FnMut(u64),
) {
    match params.mode {
        AccessMode::Strided => {
            for k in 0..params.access_count() {
                visit(k * params.stride);
            }
        }
        AccessMode::Random => {
            let Some(indices) = indices else { return };
            for &start in &indices.starts {
                for k in 0..params.vector_length {
                    visit(start + k);
                }
            }
        }
    }
}

/// Element-level access stream of one probe pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AccessTrace {
    pub element_indices: Vec<u64>,
    pub flops_total: u64,
}

impl AccessTrace {
    pub fn len(&self) -> usize {
        self.element_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.element_indices.is_empty()
    }

    pub fn bytes_touched(&self) -> u64 {
        8 * self.element_indices.len() as u64
    }
}

pub fn emit_trace(params: &ProbeParams) -> Result<AccessTrace, ProbeError> {
    emit_trace_capped(params, DEFAULT_TRACE_CAP)
}

pub fn emit_trace_capped(params: &ProbeParams, cap: u64) -> Result<AccessTrace, ProbeError> {
    params.validate()?;
    let accesses = params.access_count();
    if accesses > cap {
        return Err(ProbeError::TraceTooLong { accesses, cap });
    }
    let indices = match params.mode {
        AccessMode::Random => Some(seeded_indices(params)?),
        AccessMode::Strided => None,
    };
    let mut element_indices = Vec::with_capacity(accesses as usize);
    for_each_access(params, indices.as_ref(), |i| element_indices.push(i));
    Ok(AccessTrace {
        element_indices,
        flops_total: flop_count(params),
    })
}

/// Options for the wall-clock kernels.
#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    /// Timed passes; the reported time is per pass.
    pub repetitions: u32,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { repetitions: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeasurement {
    pub params: ProbeParams,
    pub wall_seconds: f64,
    pub flops_total: u64,
    pub mflops: f64,
    /// Final running sum; kept so the kernel cannot be optimised away.
    pub checksum: f64,
}

const MIN_WALL_SECONDS: f64 = 1e-9;

fn allocate_block(elements: u64) -> Result<Vec<f64>, ProbeError> {
    let len = usize::try_from(elements).map_err(|_| ProbeError::Allocation { elements })?;
    let mut data = Vec::new();
    data.try_reserve_exact(len)
        .map_err(|_| ProbeError::Allocation { elements })?;
    data.resize(len, 1.0);
    Ok(data)
}

fn measurement(params: &ProbeParams, seconds: f64, checksum: f64) -> ProbeMeasurement {
    let wall_seconds = seconds.max(MIN_WALL_SECONDS);
    let flops_total = flop_count(params);
    ProbeMeasurement {
        params: params.clone(),
        wall_seconds,
        flops_total,
        mflops: flops_total as f64 / wall_seconds / 1e6,
        checksum,
    }
}

#[inline(never)]
fn strided_pass(data: &[f64], stride: usize, count: usize, intensity: u32) -> f64 {
    let c0 = black_box(1.0f64);
    let mut w0 = 0.0;
    for k in 0..count {
        w0 += c0 * data[k * stride];
        w0 += compute_kernel(intensity);
    }
    w0
}

#[inline(never)]
fn random_pass(data: &[f64], starts: &[u64], len: usize, intensity: u32) -> f64 {
    let c0 = black_box(1.0f64);
    let mut w0 = 0.0;
    for &start in starts {
        let start = start as usize;
        for k in 0..len {
            w0 += c0 * data[start + k];
            w0 += compute_kernel(intensity);
        }
    }
    w0
}

fn timed(repetitions: u32, mut pass: impl FnMut() -> f64) -> (f64, f64) {
    // one untimed warm-up pass
    let mut checksum = black_box(pass());
    let reps = repetitions.max(1);
    let start = Instant::now();
    for _ in 0..reps {
        checksum = black_box(pass());
    }
    (start.elapsed().as_secs_f64() / f64::from(reps), checksum)
}

/// Times the strided kernel.
pub fn run_strided(params: &ProbeParams, opts: RunOptions) -> Result<ProbeMeasurement, ProbeError> {
    if params.mode != AccessMode::Strided {
        return Err(ProbeError::WrongMode {
            expected: AccessMode::Strided,
            actual: params.mode,
        });
    }
    params.validate()?;
    let data = allocate_block(params.mem_elements)?;
    let stride = params.stride as usize;
    let count = params.access_count() as usize;
    let (seconds, checksum) = timed(opts.repetitions, || {
        strided_pass(&data, stride, count, params.intensity)
    });
    Ok(measurement(params, seconds, checksum))
}

/// Times the random kernel. One index buffer is drawn per measurement and
/// reused by the warm-up and all timed passes.
pub fn run_random(params: &ProbeParams, opts: RunOptions) -> Result<ProbeMeasurement, ProbeError> {
    let indices = seeded_indices(params)?;
    let data = allocate_block(params.mem_elements)?;
    let len = params.vector_length as usize;
    let (seconds, checksum) = timed(opts.repetitions, || {
        random_pass(&data, &indices.starts, len, params.intensity)
    });
    Ok(measurement(params, seconds, checksum))
}

/// Dispatches on `params.mode`.
pub fn run_probe(params: &ProbeParams, opts: RunOptions) -> Result<ProbeMeasurement, ProbeError> {
    match params.mode {
        AccessMode::Strided => run_strided(params, opts),
        AccessMode::Random => run_random(params, opts),
    }
}

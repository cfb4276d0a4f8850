//! End-to-end acceptance checks. Each check prints one PASS or FAIL line;
//! the process exits non-zero if any check fails.
//!
//! Run alone with `cargo test -p apexmap --test acceptance`; pass check
//! numbers as arguments to run a subset.

use std::collections::HashSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use apexmap::counters::{self, MetricPoint, SAMPLE_COLUMNS};
use apexmap::mixmodel::{self, GridConfig, PredictOptions, ProbeCatalog, SelectOptions};
use apexmap::probe::{self, ProbeParams, ProbeRng};
use apexmap::refkernels::{self, CsrMatrix, DenseMatrix, KernelCase};
use apexmap::sweep::{self, Envelope, SweepConfig};
use apexmap::validate::{self, ValidateConfig};
use apexmap::vcache::{CacheSim, MachineModel};
use apexmap::workload::{Backend, Workload};
use rand::{Rng, SeedableRng};
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn machine(name: &str) -> MachineModel {
    MachineModel::load(&configs().join("machines").join(name)).expect("shipped machine config")
}

fn block_counts(alpha: f64, blocks: u64, vector_length: u64, draws: u64, seed: u64) -> Vec<u64> {
    let p = ProbeParams::random(blocks * vector_length, vector_length, alpha, 0, draws, seed);
    let starts = probe::seeded_indices(&p).unwrap().starts;
    let mut counts = vec![0u64; blocks as usize];
    for s in starts {
        assert_eq!(s % vector_length, 0);
        counts[(s / vector_length) as usize] += 1;
    }
    counts
}

fn index_distribution() -> Outcome {
    const DRAWS: u64 = 1_000_000;
    let mut notes = Vec::new();
    let mut pass = true;

    let counts = block_counts(1.0, 1024, 4, DRAWS, 11);
    let expected = DRAWS as f64 / 1024.0;
    let chi2: f64 = counts
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    let q999 = ChiSquared::new(1023.0).unwrap().inverse_cdf(0.999);
    pass &= chi2 < q999;
    notes.push(format!("chi2={chi2:.1} (q0.999={q999:.1})"));

    for alpha in [0.1, 0.25, 0.5] {
        for blocks in [16u64, 1024] {
            let counts = block_counts(alpha, blocks, 8, DRAWS, 12);
            let mut cum = 0u64;
            let mut sup = 0.0f64;
            for (k, c) in counts.iter().enumerate() {
                cum += c;
                let analytic = ((k + 1) as f64 / blocks as f64).powf(alpha);
                sup = sup.max((cum as f64 / DRAWS as f64 - analytic).abs());
            }
            pass &= sup <= 0.01;
            notes.push(format!("a={alpha} M/L={blocks} sup={sup:.4}"));
        }
    }

    let zero = ProbeParams::random(1 << 20, 64, 0.0, 0, 100_000, 5);
    let all_zero = probe::seeded_indices(&zero).unwrap().starts.iter().all(|&s| s == 0);
    pass &= all_zero;
    notes.push(format!("a=0 all zero: {all_zero}"));
    Outcome::new(pass, notes.join("; "))
}

fn stride_cliff() -> Outcome {
    let m = MachineModel::default();
    let mem = 1u64 << 23; // 64 MiB
    let mut per_access = Vec::new();
    let mut min_fpc = f64::INFINITY;
    for s in [1u64, 2, 4, 8, 16, 32, 64, 400] {
        let base = Workload::Probe(ProbeParams::strided(mem, s, 0))
            .evaluate_virtual(&m)
            .unwrap();
        per_access.push((s, base.counters.l3_misses as f64 / base.counters.accesses() as f64));
        let heavy = Workload::Probe(ProbeParams::strided(mem, s, 1000))
            .evaluate_virtual(&m)
            .unwrap();
        min_fpc = min_fpc.min(heavy.point.flops_per_cycle);
    }
    let rising = per_access[..5].windows(2).all(|w| w[0].1 <= w[1].1);
    let plateau = per_access[4..].iter().all(|&(_, r)| r == per_access[4].1);
    let near_peak = min_fpc >= 0.95 * m.peak_flops_per_cycle;
    let rates: Vec<String> = per_access.iter().map(|(s, r)| format!("S{s}:{r:.4}")).collect();
    Outcome::new(
        rising && plateau && near_peak,
        format!(
            "misses/access {}; min flops/cycle at C=1000 {min_fpc:.4} (>= {:.2})",
            rates.join(" "),
            0.95 * m.peak_flops_per_cycle
        ),
    )
}

/// Explicit recency list, most recent first.
fn reference_lru(trace: &[u64], capacity: usize) -> Vec<bool> {
    let mut recency: Vec<u64> = Vec::new();
    trace
        .iter()
        .map(|&line| {
            let hit = match recency.iter().position(|&l| l == line) {
                Some(i) => {
                    recency.remove(i);
                    true
                }
                None => false,
            };
            recency.insert(0, line);
            recency.truncate(capacity);
            hit
        })
        .collect()
}

/// Visits every trace of length 1..=max_len over at most `symbols` lines,
/// up to renaming of lines (first occurrences appear in order 0, 1, 2...).
/// Fully associative LRU does not depend on line names, so this covers
/// every trace.
fn for_each_trace(buf: &mut Vec<u64>, used: u64, symbols: u64, max_len: usize, f: &mut dyn FnMut(&[u64])) {
    if !buf.is_empty() {
        f(buf);
    }
    if buf.len() == max_len {
        return;
    }
    for next in 0..=used.min(symbols - 1) {
        buf.push(next);
        for_each_trace(buf, used.max(next + 1), symbols, max_len, f);
        buf.pop();
    }
}

fn lru_oracle() -> Outcome {
    let mut cases = 0u64;
    let mut mismatches = 0u64;
    let mut first_bad = None;
    let machines: Vec<MachineModel> = (1..=4u64)
        .map(|lines| MachineModel {
            cache_bytes: lines * 128,
            ..MachineModel::default()
        })
        .collect();
    for_each_trace(&mut Vec::new(), 0, 6, 12, &mut |trace| {
        for (i, m) in machines.iter().enumerate() {
            let mut sim = CacheSim::new(m);
            // element addresses 16 apart land on distinct 128-byte lines
            let got: Vec<bool> = trace.iter().map(|&l| sim.access_element(l * 16 + 3)).collect();
            cases += 1;
            if got != reference_lru(trace, i + 1) {
                mismatches += 1;
                first_bad.get_or_insert_with(|| (trace.to_vec(), i + 1));
            }
        }
    });
    Outcome::new(
        mismatches == 0 && cases >= 100_000,
        format!("{cases} cases, {mismatches} mismatches{}", match first_bad {
            Some((t, c)) => format!(", first {t:?} with {c} lines"),
            None => String::new(),
        }),
    )
}

/// Cycle-weighted throughput of a set of runs.
fn true_mean(entries: &[mixmodel::CatalogEntry], m: &MachineModel) -> f64 {
    let flops: f64 = entries.iter().map(|e| e.point.flops_per_cycle * e.point.weight).sum();
    let cycles: f64 = entries.iter().map(|e| e.point.weight).sum();
    flops / cycles * m.clock_ghz * 1e3
}

fn self_consistency() -> Outcome {
    let m = MachineModel::default();
    let env = Envelope::new(1 << 20);
    let mix = env.sample_distinct(200, 404, &HashSet::new());
    let entries = sweep::evaluate_probes(&mix, &m, Backend::Virtual, Default::default()).unwrap();
    let truth = true_mean(&entries, &m);
    let catalog = ProbeCatalog::from_entries(entries.clone()).unwrap();
    // One representative per cell can only reproduce the mean exactly if
    // no two distinct runs share a cell, hence the very fine grid.
    let fine = GridConfig {
        cell_width: 1e-8,
        cell_height: 1e-8,
        ..GridConfig::default()
    };
    let grid = mixmodel::bin_points(entries.iter().map(|e| &e.point), &fine).unwrap();
    let opts = SelectOptions {
        min_weight: 0.0,
        ..SelectOptions::default()
    };
    let sel = mixmodel::select_probe_points(&grid, &catalog, &opts);
    let pred = mixmodel::predict(&sel, &PredictOptions::default()).unwrap();
    let rel = ((pred.predicted_mflops - truth) / truth).abs();

    // the same mix on the standard grid, for reference
    let coarse = mixmodel::bin_points(entries.iter().map(|e| &e.point), &GridConfig::default()).unwrap();
    let coarse_pred = mixmodel::predict(
        &mixmodel::select_probe_points(&coarse, &catalog, &SelectOptions::default()),
        &PredictOptions::default(),
    )
    .unwrap();
    Outcome::new(
        sel.coverage == 1.0 && rel <= 1e-9,
        format!(
            "coverage {} predicted {:.6} true {:.6} rel {rel:.2e}; 0.5x0.5 grid: {:.2}%",
            sel.coverage,
            pred.predicted_mflops,
            truth,
            100.0 * (coarse_pred.predicted_mflops - truth) / truth
        ),
    )
}

fn held_out_prediction() -> Outcome {
    let m = MachineModel::default();
    let cfg = SweepConfig::load(&configs().join("sweep/envelope.toml")).unwrap();
    let catalog = sweep::sweep_catalog(&cfg, &m).unwrap();
    let exclude: HashSet<String> = catalog.entries().iter().map(|e| e.digest.clone()).collect();
    let env = Envelope::new(cfg.mem_elements().unwrap());
    let mut pass = catalog.len() >= 1000;
    let mut notes = vec![format!("catalog {}", catalog.len())];
    for seed in [1u64, 2, 3] {
        let mix = env.sample_distinct(200, seed, &exclude);
        let entries = sweep::evaluate_probes(&mix, &m, Backend::Virtual, Default::default()).unwrap();
        let truth = true_mean(&entries, &m);
        let grid = mixmodel::bin_points(entries.iter().map(|e| &e.point), &GridConfig::default()).unwrap();
        let sel = mixmodel::select_probe_points(&grid, &catalog, &SelectOptions::default());
        let pred = mixmodel::predict(&sel, &PredictOptions::default()).unwrap();
        let dev = (pred.predicted_mflops - truth) / truth;
        pass &= sel.coverage >= 0.95 && dev.abs() <= 0.15;
        notes.push(format!(
            "mix {seed}: coverage {:.4} predicted {:.1} true {:.1} dev {:+.2}%",
            sel.coverage,
            pred.predicted_mflops,
            truth,
            100.0 * dev
        ));
    }
    Outcome::new(pass, notes.join("; "))
}

fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / w.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

fn kernel_correctness() -> Outcome {
    let mut rng = ProbeRng::seed_from_u64(66);
    let mut worst_am = 0.0f64;
    for i in 0..50u64 {
        let (m, k, n) = (
            rng.random_range(1..=64),
            rng.random_range(1..=64),
            rng.random_range(1..=64),
        );
        let a = refkernels::generate_dense(m, k, 2 * i);
        let b = refkernels::generate_dense(k, n, 2 * i + 1);
        let naive = refkernels::mod2am_naive(&a, &b).unwrap();
        let blocked = refkernels::mod2am_blocked(&a, &b).unwrap();
        worst_am = worst_am.max(max_rel_err(&blocked.data, &naive.data));
    }
    let mut worst_as = 0.0f64;
    for i in 0..50u64 {
        let rows = rng.random_range(1..=64);
        let cols = rng.random_range(1..=64);
        let fill = rng.random_range(0.02..=1.0);
        let a = refkernels::generate_sparse(rows, cols, fill, i).unwrap();
        let x = refkernels::generate_vector(cols, 1000 + i);
        let y = refkernels::mod2as(&a, &x).unwrap();
        let d = a.to_dense();
        let dense_y: Vec<f64> = (0..rows)
            .map(|r| (0..cols).map(|c| d.get(r, c) * x[c]).sum())
            .collect();
        worst_as = worst_as.max(max_rel_err(&y, &dense_y));
    }
    let same_sparse: bool = {
        let a: CsrMatrix = refkernels::generate_sparse(100, 100, 0.05, 9).unwrap();
        let b = refkernels::generate_sparse(100, 100, 0.05, 9).unwrap();
        a == b
    };
    let same_dense: bool = {
        let a: DenseMatrix = refkernels::generate_dense(33, 17, 4);
        a == refkernels::generate_dense(33, 17, 4)
    };
    Outcome::new(
        worst_am <= 1e-12 && worst_as <= 1e-12 && same_sparse && same_dense,
        format!(
            "blocked vs naive max rel err {worst_am:.1e}; CSR vs dense {worst_as:.1e}; seeded reproducible: {}",
            same_sparse && same_dense
        ),
    )
}

fn separation(m: &MachineModel) -> (bool, String, u64) {
    let dense = [256usize, 320];
    let sparse = [(10_000usize, 0.01), (10_000, 0.05), (15_000, 0.01)];
    let mut am: Vec<MetricPoint> = Vec::new();
    let mut asp: Vec<MetricPoint> = Vec::new();
    let mut min_footprint = u64::MAX;
    for (i, &n) in dense.iter().enumerate() {
        let case = KernelCase::Mod2am { n, seed: i as u64 };
        min_footprint = min_footprint.min(case.footprint_bytes().unwrap());
        am.push(Workload::Kernel(case).evaluate_virtual(m).unwrap().point);
    }
    for (i, &(rows, fill_ratio)) in sparse.iter().enumerate() {
        let case = KernelCase::Mod2as {
            rows,
            fill_ratio,
            seed: i as u64,
        };
        min_footprint = min_footprint.min(case.footprint_bytes().unwrap());
        asp.push(Workload::Kernel(case).evaluate_virtual(m).unwrap().point);
    }
    let fold = |v: &[MetricPoint], f: fn(&MetricPoint) -> f64, max: bool| {
        v.iter().map(f).fold(if max { f64::MIN } else { f64::MAX }, |a, b| if max { a.max(b) } else { a.min(b) })
    };
    let y = |p: &MetricPoint| p.flops_per_cycle;
    let x = |p: &MetricPoint| p.miss_bytes_per_cycle;
    let (am_min_y, as_max_y) = (fold(&am, y, false), fold(&asp, y, true));
    let (am_max_x, as_min_x) = (fold(&am, x, true), fold(&asp, x, false));
    (
        am_min_y > as_max_y && am_max_x < as_min_x,
        format!(
            "mod2am flops/cycle >= {am_min_y:.3} vs mod2as <= {as_max_y:.3}; mod2am miss B/cycle <= {am_max_x:.3} vs mod2as >= {as_min_x:.3}"
        ),
        min_footprint,
    )
}

fn classification() -> Outcome {
    let small = machine("small_cache.toml");
    let (sep, detail, footprint) = separation(&small);
    let big_enough = footprint >= 4 * small.cache_bytes;
    let (sep_default, detail_default, _) = separation(&MachineModel::default());
    Outcome::new(
        sep && big_enough,
        format!(
            "{} KiB cache, smallest footprint {} KiB: {detail}; default machine separable: {sep_default} ({detail_default})",
            small.cache_bytes >> 10,
            footprint >> 10
        ),
    )
}

fn six_steps() -> Outcome {
    let path = configs().join("validate/two_machines.toml");
    let (cfg, origin, target) = ValidateConfig::load(&path).unwrap();
    let distinct = origin != target;
    let report = validate::run_validation(&cfg, &origin, &target).unwrap();
    let kernels: HashSet<String> = report.kernels.iter().map(|k| k.kernel.to_string()).collect();
    let mut pass = distinct && kernels.len() == 2;
    let mut notes = Vec::new();
    for k in &report.kernels {
        pass &= k.coverage > 0.0
            && k.origin.deviation_percent.abs() <= 15.0
            && k.target.deviation_percent.abs() <= 15.0;
        notes.push(format!(
            "{}: origin {:.1} vs {:.1} ({:+.2}%), target {:.1} vs {:.1} ({:+.2}%), coverage {:.3}",
            k.kernel,
            k.origin.predicted_mflops,
            k.origin.measured_mflops,
            k.origin.deviation_percent,
            k.target.predicted_mflops,
            k.target.measured_mflops,
            k.target.deviation_percent,
            k.coverage
        ));
    }
    Outcome::new(pass, notes.join("; "))
}

fn ingestion_scale() -> Outcome {
    const ROWS: usize = 3_200_000;
    let mut rng = ProbeRng::seed_from_u64(32);
    let mut text = String::with_capacity(ROWS * 48);
    text.push_str(&SAMPLE_COLUMNS.join(","));
    text.push('\n');
    for i in 0..ROWS {
        let cycles: u64 = rng.random_range(1_000_000..20_000_000_000);
        let fp = (cycles as f64 * rng.random_range(0.0..4.0)) as u64;
        let misses = (cycles as f64 * rng.random_range(0.0..4.0) / 128.0) as u64;
        text.push_str(&format!("{},h{},{},{fp},{cycles},{misses}\n", 1_300_000_000 + i, i % 97, i % 16));
    }
    let start = Instant::now();
    let log = counters::parse_samples(text.as_bytes()).unwrap();
    let points: Vec<MetricPoint> = log.samples.iter().map(|s| counters::to_metric(s, 128)).collect();
    let grid = mixmodel::bin_points(&points, &GridConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let sum = grid.weight_sum();
    Outcome::new(
        log.samples.len() == ROWS && (sum - 1.0).abs() <= 1e-9 && elapsed < Duration::from_secs(60),
        format!(
            "{} rows, {} rejected, {} cells, weight sum {sum:.12}, parse+bin {:.2}s",
            log.samples.len(),
            log.rejects.len(),
            grid.cells.len(),
            elapsed.as_secs_f64()
        ),
    )
}

type Check = (u32, &'static str, Option<Duration>, fn() -> Outcome);

fn main() -> ExitCode {
    let checks: [Check; 9] = [
        (1, "index distribution", Some(Duration::from_secs(10)), index_distribution),
        (2, "stride cliff and intensity limit", Some(Duration::from_secs(60)), stride_cliff),
        (3, "exhaustive LRU oracle", Some(Duration::from_secs(120)), lru_oracle),
        (4, "self-consistent prediction", None, self_consistency),
        (5, "held-out prediction", Some(Duration::from_secs(600)), held_out_prediction),
        (6, "kernel correctness", None, kernel_correctness),
        (7, "compute/memory-bound separation", None, classification),
        (8, "two-machine kernel validation", None, six_steps),
        (9, "ingestion at scale", Some(Duration::from_secs(60)), ingestion_scale),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, budget, check) in checks {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let in_budget = budget.is_none_or(|b| elapsed <= b);
        let pass = outcome.pass && in_budget;
        failed += u32::from(!pass);
        let budget_note = match budget {
            Some(b) => format!("{:.2}s of {}s", elapsed.as_secs_f64(), b.as_secs()),
            None => format!("{:.2}s", elapsed.as_secs_f64()),
        };
        println!(
            "{} [{id}] {name}: {} ({budget_note})",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

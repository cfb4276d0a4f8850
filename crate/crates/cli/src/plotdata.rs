//! CSV tables for plotting, derived from whatever file is handed in.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use apexmap::counters::{self, MetricPoint};
use apexmap::mixmodel::{self, GridConfig, MixPrediction, Selection, WeightGrid};
use apexmap::report::{self, kinds};
use apexmap::validate::ValidationReport;
use apexmap::vcache::MachineModel;
use apexmap::workload::Workload;
use apexmap::AccessMode;

use crate::{data, internal, CliError, CliResult};

/// Dense matrices beyond this many cells are skipped.
const MAX_MATRIX_CELLS: u64 = 1 << 20;

struct Out<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl Out<'_> {
    fn table(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> CliResult<()> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(internal)?;
        w.write_record(header).map_err(internal)?;
        for r in rows {
            w.write_record(&r).map_err(internal)?;
        }
        w.flush().map_err(internal)?;
        self.written.push(path);
        Ok(())
    }
}

fn f(v: f64) -> String {
    v.to_string()
}

pub fn export(input: &Path, dir: &Path, machine: &MachineModel) -> CliResult<Vec<PathBuf>> {
    let mut out = Out {
        dir,
        written: Vec::new(),
    };
    let ext = input.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "jsonl" => catalog_tables(input, &mut out)?,
        "csv" => sample_tables(input, machine, &mut out)?,
        _ => {
            let text = std::fs::read_to_string(input)
                .map_err(|e| data(format!("{}: {e}", input.display())))?;
            let origin = input.display().to_string();
            let kind = report::document_kind(&text, &origin)?;
            match kind.as_str() {
                kinds::WEIGHT_GRID => {
                    let grid: WeightGrid = report::from_json_document(&text, &kind, &origin)?;
                    grid_tables(&grid, "grid", &mut out)?;
                }
                kinds::SELECTION => {
                    let s: Selection = report::from_json_document(&text, &kind, &origin)?;
                    selection_table(&s, &mut out)?;
                }
                kinds::MIX_PREDICTION => {
                    let p: MixPrediction = report::from_json_document(&text, &kind, &origin)?;
                    selection_table(&p.selection, &mut out)?;
                }
                kinds::VALIDATION_REPORT => {
                    let r: ValidationReport = report::from_json_document(&text, &kind, &origin)?;
                    validation_tables(&r, &mut out)?;
                }
                other => {
                    return Err(CliError::Data(format!(
                        "{origin}: no plot tables for documents of kind {other:?}"
                    )))
                }
            }
        }
    }
    Ok(out.written)
}

/// Cell list plus, when small enough, a dense percent matrix whose entries
/// sum to 100.
fn grid_tables(grid: &WeightGrid, prefix: &str, out: &mut Out) -> CliResult<()> {
    let c = &grid.config;
    let cells = grid
        .cells
        .iter()
        .map(|(idx, s)| {
            let (cx, cy) = c.center(*idx);
            vec![
                idx.col.to_string(),
                idx.row.to_string(),
                f(cx - c.cell_width / 2.0),
                f(cx + c.cell_width / 2.0),
                f(cy - c.cell_height / 2.0),
                f(cy + c.cell_height / 2.0),
                s.count.to_string(),
                f(s.weight * 100.0),
                f(s.centroid_x),
                f(s.centroid_y),
            ]
        })
        .collect();
    out.table(
        &format!("{prefix}_cells.csv"),
        &[
            "col",
            "row",
            "miss_bytes_lo",
            "miss_bytes_hi",
            "flops_lo",
            "flops_hi",
            "count",
            "weight_percent",
            "centroid_miss_bytes",
            "centroid_flops",
        ],
        cells,
    )?;
    if c.columns().saturating_mul(c.rows()) > MAX_MATRIX_CELLS {
        eprintln!("grid has too many cells for a dense matrix; wrote the cell list only");
        return Ok(());
    }
    let col_labels: Vec<String> = (0..c.columns())
        .map(|i| f(i as f64 * c.cell_width))
        .collect();
    let mut header = vec!["flops_lo"];
    header.extend(col_labels.iter().map(String::as_str));
    let rows = grid
        .percent_matrix()
        .into_iter()
        .enumerate()
        .map(|(r, row)| {
            let mut line = vec![f(r as f64 * c.cell_height)];
            line.extend(row.into_iter().map(f));
            line
        })
        .collect();
    out.table(&format!("{prefix}_percent.csv"), &header, rows)
}

fn catalog_tables(input: &Path, out: &mut Out) -> CliResult<()> {
    let loaded = report::read_catalog(input)?;
    let mut rows = Vec::new();
    for e in loaded.catalog.entries() {
        let mut row = vec![e.digest.clone()];
        match &e.workload {
            Workload::Probe(p) => row.extend([
                match p.mode {
                    AccessMode::Strided => "strided".to_string(),
                    AccessMode::Random => "random".to_string(),
                },
                p.mem_elements.to_string(),
                p.stride.to_string(),
                p.vector_length.to_string(),
                f(p.alpha),
                p.intensity.to_string(),
            ]),
            Workload::Kernel(k) => {
                row.push(k.name().to_string());
                row.extend(std::iter::repeat_n(String::new(), 5));
            }
        }
        row.extend([
            f(e.point.miss_bytes_per_cycle),
            f(e.point.flops_per_cycle),
            f(e.mflops),
        ]);
        rows.push(row);
    }
    out.table(
        "catalog_points.csv",
        &[
            "digest",
            "mode",
            "mem_elements",
            "stride",
            "vector_length",
            "alpha",
            "intensity",
            "miss_bytes_per_cycle",
            "flops_per_cycle",
            "mflops",
        ],
        rows,
    )
}

fn sample_tables(input: &Path, machine: &MachineModel, out: &mut Out) -> CliResult<()> {
    let file = File::open(input).map_err(|e| data(format!("{}: {e}", input.display())))?;
    let log = counters::parse_samples(BufReader::new(file))
        .map_err(|e| data(format!("{}: {e}", input.display())))?;
    let points: Vec<MetricPoint> = log
        .samples
        .iter()
        .map(|s| counters::to_metric(s, machine.line_bytes))
        .collect();
    let rows = points
        .iter()
        .map(|p| vec![f(p.miss_bytes_per_cycle), f(p.flops_per_cycle), f(p.weight)])
        .collect();
    out.table(
        "sample_points.csv",
        &["miss_bytes_per_cycle", "flops_per_cycle", "cycles"],
        rows,
    )?;
    let grid = mixmodel::bin_points(&points, &GridConfig::default()).map_err(data)?;
    grid_tables(&grid, "sample_grid", out)
}

fn selection_table(s: &Selection, out: &mut Out) -> CliResult<()> {
    let mut rows: Vec<Vec<String>> = s
        .selected
        .iter()
        .map(|c| {
            vec![
                c.col.to_string(),
                c.row.to_string(),
                f(c.weight * 100.0),
                c.entry.workload.label(),
                f(c.entry.point.miss_bytes_per_cycle),
                f(c.entry.point.flops_per_cycle),
                f(c.entry.mflops),
            ]
        })
        .collect();
    rows.extend(s.uncovered.iter().map(|u| {
        vec![
            u.col.to_string(),
            u.row.to_string(),
            f(u.weight * 100.0),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ]
    }));
    out.table(
        "selected_points.csv",
        &[
            "col",
            "row",
            "weight_percent",
            "probe",
            "miss_bytes_per_cycle",
            "flops_per_cycle",
            "mflops",
        ],
        rows,
    )
}

fn validation_tables(r: &ValidationReport, out: &mut Out) -> CliResult<()> {
    let mut means = Vec::new();
    let mut points = Vec::new();
    for k in &r.kernels {
        for (machine, c) in [("origin", &k.origin), ("target", &k.target)] {
            means.push(vec![
                k.kernel.to_string(),
                machine.to_string(),
                f(c.measured_mflops),
                f(c.predicted_mflops),
                f(c.deviation_percent),
            ]);
        }
        for d in &k.data_sets {
            points.push(vec![
                k.kernel.to_string(),
                d.label.clone(),
                f(d.origin_point.miss_bytes_per_cycle),
                f(d.origin_point.flops_per_cycle),
                f(d.origin_mflops),
                f(d.target_mflops),
            ]);
        }
        grid_tables(&k.weights, &format!("weights_{}", k.kernel), out)?;
    }
    out.table(
        "validation_means.csv",
        &["kernel", "machine", "measured_mflops", "predicted_mflops", "deviation_percent"],
        means,
    )?;
    out.table(
        "validation_data_sets.csv",
        &[
            "kernel",
            "data_set",
            "miss_bytes_per_cycle",
            "flops_per_cycle",
            "origin_mflops",
            "target_mflops",
        ],
        points,
    )
}

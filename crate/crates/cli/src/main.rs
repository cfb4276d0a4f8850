use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apexmap::counters::{self, CounterTotals};
use apexmap::mixmodel::{
    self, GridConfig, PredictOptions, SelectOptions, SelectionTarget, WeightGrid,
};
use apexmap::report::{self, kinds, ReportError};
use apexmap::sweep::{self, SweepConfig};
use apexmap::validate::{self, ValidateConfig};
use apexmap::vcache::MachineModel;
use apexmap::workload::Backend;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod plotdata;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn internal<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Internal(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Virtual,
    Wallclock,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Virtual => Backend::Virtual,
            BackendArg::Wallclock => Backend::Wallclock,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TargetArg {
    MassCentroid,
    CellCenter,
}

#[derive(Parser)]
#[command(name = "apexmap", version, about = "Probe sweeps, mix models and predictions")]
struct Cli {
    /// Machine model file (TOML); the built-in reference machine otherwise.
    #[arg(long, global = true)]
    machine: Option<PathBuf>,
    /// Seed override for probe index generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Throughput source; overrides the config file.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GridArgs {
    /// Grid settings (TOML with cell_width, cell_height, extent_x, extent_y, weight_by).
    #[arg(long)]
    grid_config: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    /// Weight grid JSON from `model`.
    #[arg(long)]
    grid: PathBuf,
    /// Probe catalog (JSON lines) from `sweep`.
    #[arg(long)]
    catalog: PathBuf,
    /// Cells lighter than this fraction get no probe.
    #[arg(long, default_value_t = 0.005)]
    min_weight: f64,
    #[arg(long, value_enum, default_value = "mass-centroid")]
    target: TargetArg,
}

#[derive(Subcommand)]
enum Command {
    /// Run a probe sweep and append rows to a catalog.
    Sweep {
        /// Sweep config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Catalog file name inside the output directory.
        #[arg(long, default_value = "catalog.jsonl")]
        catalog: String,
    },
    /// Parse a counter-sample CSV, write rejected rows and a summary.
    Ingest {
        #[arg(long)]
        samples: PathBuf,
    },
    /// Bin counter samples into a weight grid.
    Model {
        #[arg(long)]
        samples: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Choose a probe for every significant grid cell.
    Select {
        #[command(flatten)]
        args: SelectArgs,
    },
    /// Predict mix throughput from a grid and a catalog.
    Predict {
        #[command(flatten)]
        args: SelectArgs,
        /// Count uncovered weight as zero throughput instead of renormalising.
        #[arg(long)]
        uncovered_as_zero: bool,
    },
    /// Kernel validation across two machine models.
    Validate {
        /// Validation config (TOML).
        #[arg(long)]
        config: PathBuf,
    },
    /// Export CSV tables for plotting from any output file.
    Plotdata {
        #[arg(long)]
        input: PathBuf,
    },
}

fn machine(cli: &Cli) -> CliResult<MachineModel> {
    match &cli.machine {
        Some(p) => MachineModel::load(p).map_err(data),
        None => Ok(MachineModel::default()),
    }
}

fn output_dir(cli: &Cli) -> CliResult<&Path> {
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| internal(format!("{}: {e}", cli.out.display())))?;
    Ok(&cli.out)
}

fn write_doc<T: Serialize>(dir: &Path, name: &str, kind: &str, body: &T) -> CliResult<PathBuf> {
    let path = dir.join(name);
    report::write_json_document(&path, kind, body).map_err(internal)?;
    Ok(path)
}

fn open(path: &Path) -> CliResult<File> {
    File::open(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn read_samples(path: &Path) -> CliResult<counters::SampleLog> {
    counters::parse_samples(BufReader::new(open(path)?))
        .map_err(|e| data(format!("{}: {e}", path.display())))
}

fn grid_config(args: &GridArgs) -> CliResult<GridConfig> {
    let Some(path) = &args.grid_config else {
        return Ok(GridConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    let cfg: GridConfig =
        toml::from_str(&text).map_err(|e| data(format!("{}: {e}", path.display())))?;
    cfg.validate().map_err(|e| data(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

#[derive(Serialize)]
struct IngestSummary {
    samples: usize,
    rejected: usize,
    line_bytes: u64,
    total_fp_ops: u128,
    total_cycles: u128,
    total_l3_misses: u128,
    flops_per_cycle: Option<f64>,
    miss_bytes_per_cycle: Option<f64>,
}

fn cmd_sweep(cli: &Cli, config: &Path, catalog: &str) -> CliResult<()> {
    let mut cfg = SweepConfig::load(config).map_err(data)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(b) = cli.backend {
        cfg.backend = b.into();
    }
    let m = machine(cli)?;
    let path = output_dir(cli)?.join(catalog);
    let summary = sweep::run_sweep(&cfg, &m, &path).map_err(|e| match e {
        sweep::SweepError::Report(ReportError::Io { .. }) | sweep::SweepError::Pool(_) => internal(e),
        other => data(other),
    })?;
    println!(
        "{}: {} combinations, {} already present, {} evaluated",
        path.display(),
        summary.combinations,
        summary.already_present,
        summary.evaluated
    );
    Ok(())
}

fn cmd_ingest(cli: &Cli, samples: &Path) -> CliResult<()> {
    let m = machine(cli)?;
    let log = read_samples(samples)?;
    let dir = output_dir(cli)?;
    let rejects_path = dir.join("rejects.csv");
    let f = File::create(&rejects_path).map_err(internal)?;
    counters::write_rejects(f, &log.rejects).map_err(internal)?;
    let totals: CounterTotals = log.samples.iter().collect();
    let point = totals.to_metric(m.line_bytes).ok();
    let summary = IngestSummary {
        samples: log.samples.len(),
        rejected: log.rejects.len(),
        line_bytes: m.line_bytes,
        total_fp_ops: totals.fp_ops,
        total_cycles: totals.cycles,
        total_l3_misses: totals.l3_misses,
        flops_per_cycle: point.as_ref().map(|p| p.flops_per_cycle),
        miss_bytes_per_cycle: point.as_ref().map(|p| p.miss_bytes_per_cycle),
    };
    let path = write_doc(dir, "ingest.json", "ingest_summary", &summary)?;
    println!(
        "{} samples, {} rejected; summary in {}, rejects in {}",
        summary.samples,
        summary.rejected,
        path.display(),
        rejects_path.display()
    );
    Ok(())
}

fn cmd_model(cli: &Cli, samples: &Path, grid: &GridArgs) -> CliResult<()> {
    let m = machine(cli)?;
    let cfg = grid_config(grid)?;
    let log = read_samples(samples)?;
    let points: Vec<_> = log
        .samples
        .iter()
        .map(|s| counters::to_metric(s, m.line_bytes))
        .collect();
    let grid = mixmodel::bin_points(&points, &cfg).map_err(data)?;
    let path = write_doc(output_dir(cli)?, "grid.json", kinds::WEIGHT_GRID, &grid)?;
    println!(
        "{} samples ({} rejected) in {} cells, {} clamped; grid in {}",
        grid.total_samples,
        log.rejects.len(),
        grid.cells.len(),
        grid.spillover,
        path.display()
    );
    Ok(())
}

fn select(args: &SelectArgs) -> CliResult<mixmodel::Selection> {
    if !(0.0..=1.0).contains(&args.min_weight) {
        return Err(CliError::Usage(format!(
            "--min-weight {} outside [0, 1]",
            args.min_weight
        )));
    }
    let grid: WeightGrid = report::read_json_document(&args.grid, kinds::WEIGHT_GRID)?;
    let loaded = report::read_catalog(&args.catalog)?;
    if loaded.truncated_tail {
        eprintln!("{}: ignoring a partial last line", args.catalog.display());
    }
    if loaded.catalog.is_empty() {
        return Err(data(format!("{}: catalog is empty", args.catalog.display())));
    }
    let opts = SelectOptions {
        min_weight: args.min_weight,
        target: match args.target {
            TargetArg::MassCentroid => SelectionTarget::MassCentroid,
            TargetArg::CellCenter => SelectionTarget::CellCenter,
        },
    };
    Ok(mixmodel::select_probe_points(&grid, &loaded.catalog, &opts))
}

fn cmd_select(cli: &Cli, args: &SelectArgs) -> CliResult<()> {
    let selection = select(args)?;
    let path = write_doc(output_dir(cli)?, "selection.json", kinds::SELECTION, &selection)?;
    println!(
        "{} cells covered, {} uncovered, coverage {:.4}; selection in {}",
        selection.selected.len(),
        selection.uncovered.len(),
        selection.coverage,
        path.display()
    );
    Ok(())
}

fn cmd_predict(cli: &Cli, args: &SelectArgs, uncovered_as_zero: bool) -> CliResult<()> {
    let selection = select(args)?;
    let prediction =
        mixmodel::predict(&selection, &PredictOptions { uncovered_as_zero }).map_err(data)?;
    let path = write_doc(output_dir(cli)?, "prediction.json", kinds::MIX_PREDICTION, &prediction)?;
    println!(
        "predicted {:.1} MFlops, coverage {:.4}; prediction in {}",
        prediction.predicted_mflops,
        prediction.selection.coverage,
        path.display()
    );
    Ok(())
}

fn cmd_validate(cli: &Cli, config: &Path) -> CliResult<()> {
    let (mut cfg, mut origin, target) = ValidateConfig::load(config).map_err(data)?;
    if let Some(seed) = cli.seed {
        cfg.sweep.seed = seed;
    }
    if let Some(b) = cli.backend {
        cfg.backend = b.into();
    }
    if cli.machine.is_some() {
        origin = machine(cli)?;
    }
    let report = validate::run_validation(&cfg, &origin, &target).map_err(data)?;
    let path = write_doc(output_dir(cli)?, "validation.json", kinds::VALIDATION_REPORT, &report)?;
    println!("catalog: {} probes swept on the origin machine", report.catalog_entries);
    println!(
        "{:<8} {:>9} {:>14} {:>14} {:>10}",
        "kernel", "machine", "measured", "predicted", "deviation"
    );
    for k in &report.kernels {
        for (name, c) in [("origin", &k.origin), ("target", &k.target)] {
            println!(
                "{:<8} {:>9} {:>14.1} {:>14.1} {:>9.2}%",
                k.kernel.to_string(),
                name,
                c.measured_mflops,
                c.predicted_mflops,
                c.deviation_percent
            );
        }
    }
    println!(
        "{} (tolerance {}%); report in {}",
        if report.passed { "within tolerance" } else { "outside tolerance" },
        report.tolerance_percent,
        path.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Sweep { config, catalog } => cmd_sweep(cli, config, catalog),
        Command::Ingest { samples } => cmd_ingest(cli, samples),
        Command::Model { samples, grid } => cmd_model(cli, samples, grid),
        Command::Select { args } => cmd_select(cli, args),
        Command::Predict {
            args,
            uncovered_as_zero,
        } => cmd_predict(cli, args, *uncovered_as_zero),
        Command::Validate { config } => cmd_validate(cli, config),
        Command::Plotdata { input } => {
            let m = machine(cli)?;
            let written = plotdata::export(input, output_dir(cli)?, &m)?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

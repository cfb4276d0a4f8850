//! Application-mix model.
//!
//! Metric points are binned into rectangular cells of the
//! (miss bytes per cycle, flops per cycle) plane. Each cell's share of the
//! total binning weight becomes its weight in the mix. A catalog of probe
//! runs supplies, for every significant cell, the entry closest to the cell's
//! centroid; the weighted mean of those entries' MFlops is the prediction.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counters::MetricPoint;
use crate::workload::Workload;

#[derive(Debug, Error, PartialEq)]
pub enum MixError {
    #[error("invalid grid configuration: {0}")]
    InvalidGrid(String),
    #[error("no covered cells")]
    NoCoverage,
    #[error("duplicate catalog entry {0}")]
    DuplicateEntry(String),
}

/// How much each binned point counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightBy {
    /// Every point counts once.
    Count,
    /// Points count with their `weight` field (cycles for counter data).
    #[default]
    PointWeight,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Cell width along the miss-bytes-per-cycle axis.
    pub cell_width: f64,
    /// Cell height along the flops-per-cycle axis.
    pub cell_height: f64,
    pub extent_x: f64,
    pub extent_y: f64,
    pub weight_by: WeightBy,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            cell_width: 0.5,
            cell_height: 0.5,
            extent_x: 4.0,
            extent_y: 4.0,
            weight_by: WeightBy::PointWeight,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), MixError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.cell_width) || !positive(self.cell_height) {
            return Err(MixError::InvalidGrid("cell dimensions must be > 0".into()));
        }
        if !positive(self.extent_x) || !positive(self.extent_y) {
            return Err(MixError::InvalidGrid("extent must be > 0".into()));
        }
        let (cols, rows) = (self.columns(), self.rows());
        if cols > u64::from(u32::MAX) || rows > u64::from(u32::MAX) {
            return Err(MixError::InvalidGrid("too many cells along an axis".into()));
        }
        Ok(())
    }

    pub fn columns(&self) -> u64 {
        (self.extent_x / self.cell_width).ceil().max(1.0) as u64
    }

    pub fn rows(&self) -> u64 {
        (self.extent_y / self.cell_height).ceil().max(1.0) as u64
    }

    /// Cell of a point, and whether it had to be clamped into the grid.
    pub fn locate(&self, miss_bytes_per_cycle: f64, flops_per_cycle: f64) -> (CellIndex, bool) {
        let (col, cx) = clamp_axis(miss_bytes_per_cycle / self.cell_width, self.columns());
        let (row, cy) = clamp_axis(flops_per_cycle / self.cell_height, self.rows());
        (CellIndex { col, row }, cx || cy)
    }

    /// Geometric centre of a cell.
    pub fn center(&self, cell: CellIndex) -> (f64, f64) {
        (
            (f64::from(cell.col) + 0.5) * self.cell_width,
            (f64::from(cell.row) + 0.5) * self.cell_height,
        )
    }
}

fn clamp_axis(scaled: f64, cells: u64) -> (u32, bool) {
    if !(scaled >= 0.0) {
        return (0, true);
    }
    let idx = scaled.floor();
    if idx >= cells as f64 {
        ((cells - 1) as u32, true)
    } else {
        (idx as u32, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub col: u32,
    pub row: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub count: u64,
    /// Normalised share of the total binning weight.
    pub weight: f64,
    /// Weighted mean of the points in the cell.
    pub centroid_x: f64,
    pub centroid_y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CellRecord {
    col: u32,
    row: u32,
    #[serde(flatten)]
    stats: CellStats,
}

mod cell_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        cells: &BTreeMap<CellIndex, CellStats>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(cells.iter().map(|(c, stats)| CellRecord {
            col: c.col,
            row: c.row,
            stats: *stats,
        }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<CellIndex, CellStats>, D::Error> {
        let records = Vec::<CellRecord>::deserialize(d)?;
        Ok(records
            .into_iter()
            .map(|r| (CellIndex { col: r.col, row: r.row }, r.stats))
            .collect())
    }
}

/// Binned application mix. Only non-empty cells are stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightGrid {
    pub config: GridConfig,
    pub total_samples: u64,
    /// Sum of the raw binning weights.
    pub total_weight: f64,
    /// Points clamped into an edge cell.
    pub spillover: u64,
    #[serde(with = "cell_map")]
    pub cells: BTreeMap<CellIndex, CellStats>,
}

impl WeightGrid {
    pub fn weight(&self, cell: CellIndex) -> f64 {
        self.cells.get(&cell).map_or(0.0, |c| c.weight)
    }

    pub fn weight_sum(&self) -> f64 {
        self.cells.values().map(|c| c.weight).sum()
    }

    /// Dense matrix of weights in percent, `rows() x columns()`, row 0 first.
    pub fn percent_matrix(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.config.columns() as usize]; self.config.rows() as usize];
        for (cell, stats) in &self.cells {
            m[cell.row as usize][cell.col as usize] = stats.weight * 100.0;
        }
        m
    }
}

#[derive(Default)]
struct Accumulator {
    count: u64,
    mass: f64,
    sum_x: f64,
    sum_y: f64,
}

/// Bins points into a weight grid. Empty input gives an empty grid.
pub fn bin_points<'a>(
    points: impl IntoIterator<Item = &'a MetricPoint>,
    config: &GridConfig,
) -> Result<WeightGrid, MixError> {
    config.validate()?;
    let mut acc: BTreeMap<CellIndex, Accumulator> = BTreeMap::new();
    let mut total_samples = 0u64;
    let mut total_weight = 0.0;
    let mut spillover = 0u64;
    for p in points {
        let (cell, clamped) = config.locate(p.miss_bytes_per_cycle, p.flops_per_cycle);
        let mass = match config.weight_by {
            WeightBy::Count => 1.0,
            WeightBy::PointWeight => p.weight.max(0.0),
        };
        let a = acc.entry(cell).or_default();
        a.count += 1;
        a.mass += mass;
        a.sum_x += mass * p.miss_bytes_per_cycle;
        a.sum_y += mass * p.flops_per_cycle;
        total_samples += 1;
        total_weight += mass;
        spillover += u64::from(clamped);
    }
    let cells = acc
        .into_iter()
        .map(|(cell, a)| {
            let (cx, cy) = config.center(cell);
            let stats = CellStats {
                count: a.count,
                weight: if total_weight > 0.0 { a.mass / total_weight } else { 0.0 },
                centroid_x: if a.mass > 0.0 { a.sum_x / a.mass } else { cx },
                centroid_y: if a.mass > 0.0 { a.sum_y / a.mass } else { cy },
            };
            (cell, stats)
        })
        .collect();
    Ok(WeightGrid {
        config: *config,
        total_samples,
        total_weight,
        spillover,
        cells,
    })
}

/// Per-kernel weights; the same binning applied to kernel measurements.
pub fn kernel_weights<'a>(
    kernel_points: impl IntoIterator<Item = &'a MetricPoint>,
    config: &GridConfig,
) -> Result<WeightGrid, MixError> {
    bin_points(kernel_points, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub digest: String,
    pub workload: Workload,
    pub point: MetricPoint,
    pub mflops: f64,
}

impl CatalogEntry {
    pub fn new(workload: Workload, point: MetricPoint, mflops: f64) -> Self {
        Self {
            digest: workload.digest(),
            workload,
            point,
            mflops,
        }
    }
}

/// Measured probe points, unique by digest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeCatalog {
    entries: Vec<CatalogEntry>,
    digests: HashSet<String>,
}

impl ProbeCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = CatalogEntry>) -> Result<Self, MixError> {
        let mut c = Self::new();
        for e in entries {
            c.push(e)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, entry: CatalogEntry) -> Result<(), MixError> {
        if !self.digests.insert(entry.digest.clone()) {
            return Err(MixError::DuplicateEntry(entry.digest));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.digests.contains(digest)
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Point each cell's representative should be closest to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionTarget {
    /// Weighted centroid of the mix points in the cell.
    #[default]
    MassCentroid,
    /// Geometric centre of the cell.
    CellCenter,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectOptions {
    /// Cells lighter than this are not given a representative.
    pub min_weight: f64,
    pub target: SelectionTarget,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            min_weight: 0.005,
            target: SelectionTarget::MassCentroid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedCell {
    pub col: u32,
    pub row: u32,
    pub weight: f64,
    pub entry: CatalogEntry,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncoveredCell {
    pub col: u32,
    pub row: u32,
    pub weight: f64,
}

/// Representative catalog entries for the weighted cells of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selected: Vec<SelectedCell>,
    /// Cells at or above `min_weight` with no in-cell catalog entry.
    pub uncovered: Vec<UncoveredCell>,
    /// Share of the grid weight in cells with a representative.
    pub coverage: f64,
    pub min_weight: f64,
}

fn distance2(config: &GridConfig, point: &MetricPoint, target: (f64, f64)) -> f64 {
    let dx = (point.miss_bytes_per_cycle - target.0) / config.cell_width;
    let dy = (point.flops_per_cycle - target.1) / config.cell_height;
    dx * dx + dy * dy
}

/// Picks, for every cell with weight >= `min_weight`, the in-cell catalog
/// entry closest to the selection target in cell-normalised coordinates.
/// Ties go to the lexicographically smaller digest, so the result does not
/// depend on catalog order.
pub fn select_probe_points(grid: &WeightGrid, catalog: &ProbeCatalog, opts: &SelectOptions) -> Selection {
    let config = &grid.config;
    let target_of = |cell: CellIndex, stats: &CellStats| match opts.target {
        SelectionTarget::MassCentroid => (stats.centroid_x, stats.centroid_y),
        SelectionTarget::CellCenter => config.center(cell),
    };
    let mut best: BTreeMap<CellIndex, (f64, &CatalogEntry)> = BTreeMap::new();
    for entry in catalog.entries() {
        let (cell, _) = config.locate(entry.point.miss_bytes_per_cycle, entry.point.flops_per_cycle);
        let Some(stats) = grid.cells.get(&cell) else { continue };
        if stats.weight < opts.min_weight {
            continue;
        }
        let d = distance2(config, &entry.point, target_of(cell, stats));
        match best.get(&cell) {
            Some(&(bd, be)) if bd < d || (bd == d && be.digest <= entry.digest) => {}
            _ => {
                best.insert(cell, (d, entry));
            }
        }
    }
    let mut selected = Vec::new();
    let mut uncovered = Vec::new();
    // both sums run over the same cells in the same order, so full
    // coverage comes out as exactly 1
    let mut covered_weight = 0.0;
    let mut total_weight = 0.0;
    for (cell, stats) in &grid.cells {
        total_weight += stats.weight;
        if stats.weight < opts.min_weight {
            continue;
        }
        match best.get(cell) {
            Some((_, entry)) => {
                covered_weight += stats.weight;
                selected.push(SelectedCell {
                    col: cell.col,
                    row: cell.row,
                    weight: stats.weight,
                    entry: (*entry).clone(),
                });
            }
            None => uncovered.push(UncoveredCell {
                col: cell.col,
                row: cell.row,
                weight: stats.weight,
            }),
        }
    }
    Selection {
        selected,
        uncovered,
        coverage: if total_weight > 0.0 {
            (covered_weight / total_weight).min(1.0)
        } else {
            0.0
        },
        min_weight: opts.min_weight,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictOptions {
    /// Count uncovered weight as zero performance instead of renormalising
    /// over the covered cells.
    pub uncovered_as_zero: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixPrediction {
    #[serde(flatten)]
    pub selection: Selection,
    pub predicted_mflops: f64,
    pub renormalised: bool,
}

/// Weighted mean of the selected entries' MFlops.
pub fn predict(selection: &Selection, opts: &PredictOptions) -> Result<MixPrediction, MixError> {
    let covered: f64 = selection.selected.iter().map(|s| s.weight).sum();
    if selection.selected.is_empty() || !(covered > 0.0) {
        return Err(MixError::NoCoverage);
    }
    let weighted: f64 = selection.selected.iter().map(|s| s.weight * s.entry.mflops).sum();
    let denominator = if opts.uncovered_as_zero {
        (covered + selection.uncovered.iter().map(|u| u.weight).sum::<f64>()).max(covered)
    } else {
        covered
    };
    Ok(MixPrediction {
        selection: selection.clone(),
        predicted_mflops: weighted / denominator,
        renormalised: !opts.uncovered_as_zero,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counters::MetricSource;
    use crate::probe::ProbeParams;

    fn pt(x: f64, y: f64) -> MetricPoint {
        MetricPoint::new(x, y, MetricSource::HardwareSample)
    }

    fn entry(stride: u64, x: f64, y: f64, mflops: f64) -> CatalogEntry {
        CatalogEntry::new(
            Workload::Probe(ProbeParams::strided(1 << 20, stride, 0)),
            MetricPoint::new(x, y, MetricSource::VirtualProbe),
            mflops,
        )
    }

    #[test]
    fn single_cell_grid() {
        let points = vec![pt(0.1, 0.4); 5];
        let grid = bin_points(&points, &GridConfig::default()).unwrap();
        assert_eq!(grid.cells.len(), 1);
        assert_eq!(grid.weight(CellIndex { col: 0, row: 0 }), 1.0);
        assert_eq!(grid.total_samples, 5);
    }

    #[test]
    fn paper_mix_means_land_in_origin_cell() {
        let (cell, clamped) = GridConfig::default().locate(0.2, 0.48);
        assert_eq!(cell, CellIndex { col: 0, row: 0 });
        assert!(!clamped);
    }

    #[test]
    fn empty_input_gives_empty_grid() {
        let grid = bin_points(&[], &GridConfig::default()).unwrap();
        assert_eq!(grid.total_samples, 0);
        assert!(grid.cells.is_empty());
    }

    #[test]
    fn out_of_extent_points_are_clamped() {
        let grid = bin_points(&[pt(9.0, 0.1), pt(0.1, 4.0)], &GridConfig::default()).unwrap();
        assert_eq!(grid.spillover, 2);
        assert!(grid.cells.contains_key(&CellIndex { col: 7, row: 0 }));
        assert!(grid.cells.contains_key(&CellIndex { col: 0, row: 7 }));
    }

    #[test]
    fn invalid_grid_rejected() {
        let cfg = GridConfig {
            cell_width: 0.0,
            ..GridConfig::default()
        };
        assert!(bin_points(&[], &cfg).is_err());
    }

    #[test]
    fn point_weights_drive_cell_weights() {
        let points = vec![pt(0.1, 0.1).with_weight(3.0), pt(1.1, 0.1).with_weight(1.0)];
        let grid = bin_points(&points, &GridConfig::default()).unwrap();
        assert_eq!(grid.weight(CellIndex { col: 0, row: 0 }), 0.75);
        let by_count = GridConfig {
            weight_by: WeightBy::Count,
            ..GridConfig::default()
        };
        let grid = bin_points(&points, &by_count).unwrap();
        assert_eq!(grid.weight(CellIndex { col: 2, row: 0 }), 0.5);
    }

    #[test]
    fn single_entry_is_selected() {
        let grid = bin_points(&[pt(0.1, 0.4)], &GridConfig::default()).unwrap();
        let catalog = ProbeCatalog::from_entries([entry(2, 0.2, 0.2, 770.0)]).unwrap();
        let sel = select_probe_points(&grid, &catalog, &SelectOptions::default());
        assert_eq!(sel.selected.len(), 1);
        assert_eq!(sel.coverage, 1.0);
        let pred = predict(&sel, &PredictOptions::default()).unwrap();
        assert_eq!(pred.predicted_mflops, 770.0);
    }

    #[test]
    fn equidistant_tie_goes_to_smaller_digest() {
        let grid = bin_points(&[pt(0.25, 0.25)], &GridConfig::default()).unwrap();
        let a = entry(2, 0.15, 0.25, 100.0);
        let b = entry(3, 0.35, 0.25, 200.0);
        let expected = if a.digest < b.digest { a.digest.clone() } else { b.digest.clone() };
        for order in [vec![a.clone(), b.clone()], vec![b.clone(), a.clone()]] {
            let catalog = ProbeCatalog::from_entries(order).unwrap();
            let sel = select_probe_points(&grid, &catalog, &SelectOptions::default());
            assert_eq!(sel.selected[0].entry.digest, expected);
        }
    }

    #[test]
    fn two_cells_average() {
        let grid = bin_points(&[pt(0.1, 0.1), pt(1.1, 0.1)], &GridConfig::default()).unwrap();
        let catalog =
            ProbeCatalog::from_entries([entry(2, 0.2, 0.2, 100.0), entry(3, 1.2, 0.2, 300.0)]).unwrap();
        let sel = select_probe_points(&grid, &catalog, &SelectOptions::default());
        let pred = predict(&sel, &PredictOptions::default()).unwrap();
        assert_eq!(pred.predicted_mflops, 200.0);
    }

    #[test]
    fn uncovered_cells_reported_and_optionally_zero() {
        let grid = bin_points(&[pt(0.1, 0.1), pt(1.1, 0.1)], &GridConfig::default()).unwrap();
        let catalog = ProbeCatalog::from_entries([entry(2, 0.2, 0.2, 100.0)]).unwrap();
        let sel = select_probe_points(&grid, &catalog, &SelectOptions::default());
        assert_eq!(sel.coverage, 0.5);
        assert_eq!(sel.uncovered, vec![UncoveredCell { col: 2, row: 0, weight: 0.5 }]);
        let renorm = predict(&sel, &PredictOptions::default()).unwrap();
        assert_eq!(renorm.predicted_mflops, 100.0);
        let zero = predict(&sel, &PredictOptions { uncovered_as_zero: true }).unwrap();
        assert_eq!(zero.predicted_mflops, 50.0);
    }

    #[test]
    fn light_cells_are_skipped() {
        let mut points = vec![pt(0.1, 0.1); 999];
        points.push(pt(1.1, 0.1));
        let grid = bin_points(&points, &GridConfig::default()).unwrap();
        let catalog = ProbeCatalog::from_entries([entry(2, 0.2, 0.2, 100.0)]).unwrap();
        let sel = select_probe_points(&grid, &catalog, &SelectOptions::default());
        assert!(sel.uncovered.is_empty());
        assert!((sel.coverage - 0.999).abs() < 1e-12);
    }

    #[test]
    fn zero_coverage_is_an_error() {
        let grid = bin_points(&[pt(0.1, 0.1)], &GridConfig::default()).unwrap();
        let sel = select_probe_points(&grid, &ProbeCatalog::new(), &SelectOptions::default());
        assert_eq!(predict(&sel, &PredictOptions::default()), Err(MixError::NoCoverage));
    }

    #[test]
    fn duplicate_digests_rejected() {
        let e = entry(2, 0.2, 0.2, 1.0);
        assert!(matches!(
            ProbeCatalog::from_entries([e.clone(), e]),
            Err(MixError::DuplicateEntry(_))
        ));
    }

    #[test]
    fn grid_json_roundtrip() {
        let grid = bin_points(&[pt(0.1, 0.1), pt(1.1, 2.1)], &GridConfig::default()).unwrap();
        let json = serde_json::to_string(&grid).unwrap();
        assert!(json.contains(r#""cells":[{"col":0,"row":0,"count":1"#));
        assert_eq!(serde_json::from_str::<WeightGrid>(&json).unwrap(), grid);
    }
}

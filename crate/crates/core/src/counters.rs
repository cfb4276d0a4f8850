//! Counter-sample ingestion and the metric plane.
//!
//! A sample log is CSV with the exact header
//! `timestamp,host_id,cpu_id,fp_ops,cycles,l3_misses`, one row per sampling
//! window. Each valid row maps to a [`MetricPoint`] at
//! (miss bytes per cycle, flops per cycle).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Column names of a sample log, in order.
pub const SAMPLE_COLUMNS: [&str; 6] = ["timestamp", "host_id", "cpu_id", "fp_ops", "cycles", "l3_misses"];

#[derive(Debug, Error)]
pub enum CountersError {
    #[error("sample log header mismatch: expected {expected:?}, found {found:?}")]
    Header {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("cannot aggregate an empty sample set")]
    Empty,
    #[error("aggregated samples have zero cycles")]
    ZeroCycles,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSample {
    pub timestamp: u64,
    pub host_id: String,
    pub cpu_id: u32,
    pub fp_ops: u64,
    pub cycles: u64,
    pub l3_misses: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSource {
    HardwareSample,
    VirtualProbe,
    VirtualKernel,
}

/// A point in the (miss bytes per cycle, flops per cycle) plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub flops_per_cycle: f64,
    pub miss_bytes_per_cycle: f64,
    pub source: MetricSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Binning weight; the cycle count of the window the point summarises.
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl MetricPoint {
    pub fn new(miss_bytes_per_cycle: f64, flops_per_cycle: f64, source: MetricSource) -> Self {
        Self {
            flops_per_cycle,
            miss_bytes_per_cycle,
            source,
            label: None,
            weight: 1.0,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

/// A row that failed to parse or validate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    /// 1-based line number in the input.
    pub line: u64,
    pub fields: Vec<String>,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleLog {
    pub samples: Vec<CounterSample>,
    pub rejects: Vec<RejectedRow>,
}

fn parse_field<T: std::str::FromStr>(record: &csv::StringRecord, i: usize) -> Result<T, String> {
    let raw = record.get(i).ok_or_else(|| format!("missing {}", SAMPLE_COLUMNS[i]))?;
    raw.trim()
        .parse()
        .map_err(|_| format!("bad {} {raw:?}", SAMPLE_COLUMNS[i]))
}

fn sample_from_record(record: &csv::StringRecord) -> Result<CounterSample, String> {
    if record.len() != SAMPLE_COLUMNS.len() {
        return Err(format!(
            "expected {} fields, found {}",
            SAMPLE_COLUMNS.len(),
            record.len()
        ));
    }
    let sample = CounterSample {
        timestamp: parse_field(record, 0)?,
        host_id: record[1].to_string(),
        cpu_id: parse_field(record, 2)?,
        fp_ops: parse_field(record, 3)?,
        cycles: parse_field(record, 4)?,
        l3_misses: parse_field(record, 5)?,
    };
    if sample.cycles == 0 {
        return Err("zero cycles".into());
    }
    Ok(sample)
}

/// Parses a sample log. A header that does not match [`SAMPLE_COLUMNS`]
/// exactly is fatal; bad rows are collected in `rejects` and parsing goes on.
pub fn parse_samples<R: Read>(reader: R) -> Result<SampleLog, CountersError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let found: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
    if found != SAMPLE_COLUMNS {
        return Err(CountersError::Header {
            expected: SAMPLE_COLUMNS.iter().map(|s| s.to_string()).collect(),
            found,
        });
    }
    let mut log = SampleLog::default();
    let mut record = csv::StringRecord::new();
    let mut line = 1u64;
    loop {
        line += 1;
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                if let Some(pos) = record.position() {
                    line = pos.line();
                }
                match sample_from_record(&record) {
                    Ok(s) => log.samples.push(s),
                    Err(reason) => log.rejects.push(RejectedRow {
                        line,
                        fields: record.iter().map(str::to_string).collect(),
                        reason,
                    }),
                }
            }
            Err(err) => {
                if let Some(pos) = err.position() {
                    line = pos.line();
                }
                // invalid UTF-8 and similar per-row faults are not fatal
                if matches!(err.kind(), csv::ErrorKind::Utf8 { .. }) {
                    log.rejects.push(RejectedRow {
                        line,
                        fields: Vec::new(),
                        reason: "invalid utf-8".into(),
                    });
                    continue;
                }
                return Err(err.into());
            }
        }
    }
    Ok(log)
}

pub fn write_samples<W: Write>(writer: W, samples: &[CounterSample]) -> Result<(), CountersError> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    wtr.write_record(SAMPLE_COLUMNS)?;
    for s in samples {
        wtr.serialize(s)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes rejected rows as CSV: the sample columns plus `line` and `reason`.
pub fn write_rejects<W: Write>(writer: W, rejects: &[RejectedRow]) -> Result<(), CountersError> {
    let mut wtr = csv::WriterBuilder::new().flexible(true).from_writer(writer);
    let mut header: Vec<&str> = SAMPLE_COLUMNS.to_vec();
    header.extend(["line", "reason"]);
    wtr.write_record(&header)?;
    for r in rejects {
        let mut row: Vec<String> = (0..SAMPLE_COLUMNS.len())
            .map(|i| r.fields.get(i).cloned().unwrap_or_default())
            .collect();
        row.push(r.line.to_string());
        row.push(r.reason.clone());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn to_metric(sample: &CounterSample, line_bytes: u64) -> MetricPoint {
    let cycles = sample.cycles as f64;
    MetricPoint {
        flops_per_cycle: sample.fp_ops as f64 / cycles,
        miss_bytes_per_cycle: sample.l3_misses as f64 * line_bytes as f64 / cycles,
        source: MetricSource::HardwareSample,
        label: None,
        weight: cycles,
    }
}

/// Running sums of counter deltas.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CounterTotals {
    pub fp_ops: u128,
    pub cycles: u128,
    pub l3_misses: u128,
    pub samples: u64,
}

impl CounterTotals {
    pub fn add(&mut self, sample: &CounterSample) {
        self.fp_ops += u128::from(sample.fp_ops);
        self.cycles += u128::from(sample.cycles);
        self.l3_misses += u128::from(sample.l3_misses);
        self.samples += 1;
    }

    pub fn merge(mut self, other: CounterTotals) -> CounterTotals {
        self.fp_ops += other.fp_ops;
        self.cycles += other.cycles;
        self.l3_misses += other.l3_misses;
        self.samples += other.samples;
        self
    }

    pub fn to_metric(&self, line_bytes: u64) -> Result<MetricPoint, CountersError> {
        if self.samples == 0 {
            return Err(CountersError::Empty);
        }
        if self.cycles == 0 {
            return Err(CountersError::ZeroCycles);
        }
        let cycles = self.cycles as f64;
        Ok(MetricPoint {
            flops_per_cycle: self.fp_ops as f64 / cycles,
            miss_bytes_per_cycle: (self.l3_misses * u128::from(line_bytes)) as f64 / cycles,
            source: MetricSource::HardwareSample,
            label: None,
            weight: cycles,
        })
    }
}

impl<'a> FromIterator<&'a CounterSample> for CounterTotals {
    fn from_iter<I: IntoIterator<Item = &'a CounterSample>>(iter: I) -> Self {
        let mut totals = CounterTotals::default();
        for s in iter {
            totals.add(s);
        }
        totals
    }
}

/// Cycle-weighted aggregate: summed flops and misses over summed cycles.
pub fn summed_metric(samples: &[CounterSample], line_bytes: u64) -> Result<MetricPoint, CountersError> {
    samples.iter().collect::<CounterTotals>().to_metric(line_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(fp_ops: u64, cycles: u64, l3_misses: u64) -> CounterSample {
        CounterSample {
            timestamp: 0,
            host_id: "h1".into(),
            cpu_id: 0,
            fp_ops,
            cycles,
            l3_misses,
        }
    }

    const HEADER: &str = "timestamp,host_id,cpu_id,fp_ops,cycles,l3_misses\n";

    #[test]
    fn parses_simple_row() {
        let log = parse_samples(format!("{HEADER}0,h1,0,480,1000,0\n").as_bytes()).unwrap();
        assert_eq!(log.samples, vec![sample(480, 1000, 0)]);
        assert!(log.rejects.is_empty());
    }

    #[test]
    fn zero_cycles_row_rejected() {
        let text = format!("{HEADER}0,h1,0,480,0,0\n1,h1,0,1,2,3\n");
        let log = parse_samples(text.as_bytes()).unwrap();
        assert_eq!(log.samples.len(), 1);
        assert_eq!(log.rejects.len(), 1);
        assert_eq!(log.rejects[0].reason, "zero cycles");
        assert_eq!(log.rejects[0].line, 2);
    }

    #[test]
    fn malformed_rows_are_not_fatal() {
        let text = format!("{HEADER}x,h1,0,1,2,3\n0,h1,0,-1,2,3\n0,h1,0,1,2\n5,h2,3,4,5,6\n");
        let log = parse_samples(text.as_bytes()).unwrap();
        assert_eq!(log.samples.len(), 1);
        assert_eq!(log.samples[0].host_id, "h2");
        let lines: Vec<u64> = log.rejects.iter().map(|r| r.line).collect();
        assert_eq!(lines, vec![2, 3, 4]);
        assert!(log.rejects[2].reason.contains("expected 6 fields"));
    }

    #[test]
    fn invalid_utf8_row_rejected() {
        let mut bytes = HEADER.as_bytes().to_vec();
        bytes.extend_from_slice(b"0,h\xff,0,1,2,3\n0,h1,0,1,2,3\n");
        let log = parse_samples(bytes.as_slice()).unwrap();
        assert_eq!(log.samples.len(), 1);
        assert_eq!(log.rejects[0].reason, "invalid utf-8");
    }

    #[test]
    fn renamed_column_is_fatal() {
        let text = "timestamp,host,cpu_id,fp_ops,cycles,l3_misses\n0,h1,0,1,2,3\n";
        assert!(matches!(
            parse_samples(text.as_bytes()),
            Err(CountersError::Header { .. })
        ));
        let text = "timestamp,host_id,cpu_id,fp_ops,cycles\n";
        assert!(matches!(
            parse_samples(text.as_bytes()),
            Err(CountersError::Header { .. })
        ));
    }

    #[test]
    fn rejects_report_has_reason_column() {
        let text = format!("{HEADER}0,h1,0,480,0,0\n");
        let log = parse_samples(text.as_bytes()).unwrap();
        let mut out = Vec::new();
        write_rejects(&mut out, &log.rejects).unwrap();
        let out = String::from_utf8(out).unwrap();
        assert_eq!(
            out,
            "timestamp,host_id,cpu_id,fp_ops,cycles,l3_misses,line,reason\n0,h1,0,480,0,0,2,zero cycles\n"
        );
    }

    #[test]
    fn to_metric_values() {
        let p = to_metric(&sample(48, 100, 0), 128);
        assert_eq!((p.miss_bytes_per_cycle, p.flops_per_cycle), (0.0, 0.48));
        assert_eq!(p.source, MetricSource::HardwareSample);
        let p = to_metric(&sample(0, 100, 100), 128);
        assert_eq!((p.miss_bytes_per_cycle, p.flops_per_cycle), (128.0, 0.0));
    }

    #[test]
    fn summed_metric_is_ratio_of_sums() {
        let p = summed_metric(&[sample(10, 100, 0), sample(38, 900, 0)], 128).unwrap();
        assert!((p.flops_per_cycle - 0.048).abs() < 1e-15);
        let single = sample(7, 91, 3);
        assert_eq!(summed_metric(&[single.clone()], 128).unwrap(), to_metric(&single, 128));
        let zero = summed_metric(&[sample(0, 10, 2), sample(0, 30, 0)], 128).unwrap();
        assert_eq!(zero.flops_per_cycle, 0.0);
        assert!(zero.miss_bytes_per_cycle >= 0.0);
        assert!(matches!(summed_metric(&[], 128), Err(CountersError::Empty)));
    }
}

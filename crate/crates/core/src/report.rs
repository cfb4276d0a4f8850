//! On-disk formats.
//!
//! JSON documents carry `schema_version` and `kind` ahead of their body. The
//! probe catalog is JSON lines, one entry per line, so sweeps can append rows
//! and resume after an interruption. Readers reject any major version other
//! than [`SCHEMA_MAJOR`].

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mixmodel::{CatalogEntry, MixError, ProbeCatalog};
use crate::probe::ProbeMeasurement;
use crate::refkernels::KernelRun;

pub const SCHEMA_VERSION: &str = "1.0";
pub const SCHEMA_MAJOR: u64 = 1;

pub mod kinds {
    pub const WEIGHT_GRID: &str = "weight_grid";
    pub const SELECTION: &str = "selection";
    pub const MIX_PREDICTION: &str = "mix_prediction";
    pub const VALIDATION_REPORT: &str = "validation_report";
    pub const METRIC_POINTS: &str = "metric_points";
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: unsupported schema_version {found:?} (expected major {SCHEMA_MAJOR})")]
    SchemaVersion { path: String, found: String },
    #[error("{path}: expected a {expected} document, found {found:?}")]
    Kind {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Catalog {
        path: String,
        line: usize,
        source: MixError,
    },
}

impl ReportError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ReportError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub fn schema_major(version: &str) -> Option<u64> {
    version.split('.').next()?.trim().parse().ok()
}

fn check_version(path: &str, version: &str) -> Result<(), ReportError> {
    if schema_major(version) != Some(SCHEMA_MAJOR) {
        return Err(ReportError::SchemaVersion {
            path: path.to_string(),
            found: version.to_string(),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct DocumentOut<'a, T> {
    schema_version: &'a str,
    kind: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Deserialize)]
struct Header {
    schema_version: String,
    kind: String,
}

/// Pretty JSON with the version header first.
pub fn to_json_document<T: Serialize>(kind: &str, body: &T) -> String {
    let doc = DocumentOut {
        schema_version: SCHEMA_VERSION,
        kind,
        body,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("report types serialise");
    s.push('\n');
    s
}

/// Returns the `kind` of a document after checking its version.
pub fn document_kind(text: &str, origin: &str) -> Result<String, ReportError> {
    let header: Header = serde_json::from_str(text).map_err(|e| ReportError::Malformed {
        path: origin.to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    check_version(origin, &header.schema_version)?;
    Ok(header.kind)
}

pub fn from_json_document<T: DeserializeOwned>(
    text: &str,
    kind: &str,
    origin: &str,
) -> Result<T, ReportError> {
    let found = document_kind(text, origin)?;
    if found != kind {
        return Err(ReportError::Kind {
            path: origin.to_string(),
            expected: kind.to_string(),
            found,
        });
    }
    serde_json::from_str(text).map_err(|e| ReportError::Malformed {
        path: origin.to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_json_document<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<(), ReportError> {
    write_atomic(path, to_json_document(kind, body).as_bytes())
}

pub fn read_json_document<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|e| ReportError::io(path, e))?;
    from_json_document(&text, kind, &path.display().to_string())
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| format!(".{}.tmp", n.to_string_lossy()))
        .unwrap_or_else(|| ".out.tmp".into());
    tmp.set_file_name(name);
    std::fs::write(&tmp, bytes).map_err(|e| ReportError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| ReportError::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct CatalogLine {
    schema_version: String,
    #[serde(flatten)]
    entry: CatalogEntry,
}

pub fn catalog_line(entry: &CatalogEntry) -> String {
    let mut line = serde_json::to_string(&CatalogLine {
        schema_version: SCHEMA_VERSION.to_string(),
        entry: entry.clone(),
    })
    .expect("catalog entries serialise");
    line.push('\n');
    line
}

/// Catalog read from disk, plus the number of trailing bytes ignored
/// because the last line was cut short.
pub struct LoadedCatalog {
    pub catalog: ProbeCatalog,
    pub truncated_tail: bool,
}

/// Reads a JSON-lines catalog. A final line without a newline is treated as
/// an interrupted append and skipped.
pub fn read_catalog(path: &Path) -> Result<LoadedCatalog, ReportError> {
    let file = File::open(path).map_err(|e| ReportError::io(path, e))?;
    let origin = path.display().to_string();
    let mut reader = BufReader::new(file);
    let mut catalog = ProbeCatalog::new();
    let mut truncated_tail = false;
    let mut buf = String::new();
    let mut line_no = 0usize;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|e| ReportError::io(path, e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if !buf.ends_with('\n') {
            truncated_tail = true;
            break;
        }
        let text = buf.trim();
        if text.is_empty() {
            continue;
        }
        let row: CatalogLine = serde_json::from_str(text).map_err(|e| ReportError::Malformed {
            path: origin.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        check_version(&format!("{origin}:{line_no}"), &row.schema_version)?;
        catalog.push(row.entry).map_err(|source| ReportError::Catalog {
            path: origin.clone(),
            line: line_no,
            source,
        })?;
    }
    Ok(LoadedCatalog {
        catalog,
        truncated_tail,
    })
}

/// Appends catalog rows; each row goes out in a single write.
pub struct CatalogWriter {
    path: PathBuf,
    file: Mutex<File>,
}

impl CatalogWriter {
    /// Opens for appending. If the file ends in a partial line, that line
    /// is dropped first so the next row starts cleanly.
    pub fn open(path: &Path) -> Result<Self, ReportError> {
        if path.exists() {
            let bytes = std::fs::read(path).map_err(|e| ReportError::io(path, e))?;
            if !bytes.is_empty() && !bytes.ends_with(b"\n") {
                let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
                let f = OpenOptions::new()
                    .write(true)
                    .open(path)
                    .map_err(|e| ReportError::io(path, e))?;
                f.set_len(keep as u64).map_err(|e| ReportError::io(path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ReportError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn append(&self, entry: &CatalogEntry) -> Result<(), ReportError> {
        let line = catalog_line(entry);
        let mut f = self.file.lock().expect("catalog writer lock");
        f.write_all(line.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| ReportError::io(&self.path, e))
    }
}

pub fn write_catalog(path: &Path, catalog: &ProbeCatalog) -> Result<(), ReportError> {
    let text: String = catalog.entries().iter().map(catalog_line).collect();
    write_atomic(path, text.as_bytes())
}

/// Row shared by probe and kernel timing reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: String,
    pub kind: String,
    pub label: String,
    pub flops_total: u64,
    pub wall_seconds: f64,
    pub mflops: f64,
}

impl From<&ProbeMeasurement> for RunRecord {
    fn from(m: &ProbeMeasurement) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.into(),
            kind: "probe".into(),
            label: m.params.label(),
            flops_total: m.flops_total,
            wall_seconds: m.wall_seconds,
            mflops: m.mflops,
        }
    }
}

impl From<&KernelRun> for RunRecord {
    fn from(r: &KernelRun) -> Self {
        let label = match r.name {
            crate::refkernels::KernelName::Mod2am => format!("mod2am n={}", r.problem_size[0]),
            crate::refkernels::KernelName::Mod2as => format!(
                "mod2as rows={} nnz={}",
                r.problem_size[0], r.problem_size[2]
            ),
        };
        Self {
            schema_version: SCHEMA_VERSION.into(),
            kind: r.name.to_string(),
            label,
            flops_total: r.flops_total,
            wall_seconds: r.wall_seconds,
            mflops: r.mflops,
        }
    }
}

pub fn write_run_records<W: Write>(writer: W, records: &[RunRecord]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counters::{MetricPoint, MetricSource};
    use crate::probe::ProbeParams;
    use crate::workload::Workload;

    fn entry(stride: u64) -> CatalogEntry {
        CatalogEntry::new(
            Workload::Probe(ProbeParams::strided(1024, stride, 0)),
            MetricPoint::new(0.5, 1.0, MetricSource::VirtualProbe),
            100.0,
        )
    }

    #[test]
    fn major_version_checked() {
        let doc = to_json_document("thing", &serde_json::json!({"a": 1}));
        assert!(doc.starts_with("{\n  \"schema_version\": \"1.0\",\n  \"kind\": \"thing\""));
        assert_eq!(document_kind(&doc, "x").unwrap(), "thing");
        let future = doc.replace("\"1.0\"", "\"2.0\"");
        assert!(matches!(
            document_kind(&future, "x"),
            Err(ReportError::SchemaVersion { .. })
        ));
        let minor = doc.replace("\"1.0\"", "\"1.7\"");
        assert!(document_kind(&minor, "x").is_ok());
        assert!(matches!(
            from_json_document::<serde_json::Value>(&doc, "other", "x"),
            Err(ReportError::Kind { .. })
        ));
    }

    #[test]
    fn catalog_resumes_after_partial_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cat.jsonl");
        let w = CatalogWriter::open(&path).unwrap();
        w.append(&entry(2)).unwrap();
        w.append(&entry(3)).unwrap();
        drop(w);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"schema_version\":\"1.0\",\"dig").unwrap();
        drop(f);
        let loaded = read_catalog(&path).unwrap();
        assert_eq!(loaded.catalog.len(), 2);
        assert!(loaded.truncated_tail);
        let w = CatalogWriter::open(&path).unwrap();
        w.append(&entry(4)).unwrap();
        let loaded = read_catalog(&path).unwrap();
        assert_eq!(loaded.catalog.len(), 3);
        assert!(!loaded.truncated_tail);
    }

    #[test]
    fn catalog_rejects_unknown_major_and_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cat.jsonl");
        let good = catalog_line(&entry(2));
        let bad = catalog_line(&entry(3)).replace("\"1.0\"", "\"3.0\"");
        std::fs::write(&path, format!("{good}{bad}")).unwrap();
        let err = read_catalog(&path).err().unwrap();
        assert!(err.to_string().contains(":2"), "{err}");
        std::fs::write(&path, format!("{good}not json\n")).unwrap();
        let err = read_catalog(&path).err().unwrap();
        assert!(matches!(err, ReportError::Malformed { line: 2, .. }));
    }

    #[test]
    fn run_records_share_one_schema() {
        let kernel = KernelRun::new(crate::refkernels::KernelName::Mod2as, [10, 10, 20], 40, 1e-6);
        let probe = ProbeMeasurement {
            params: ProbeParams::strided(64, 1, 0),
            wall_seconds: 1e-3,
            flops_total: 640,
            mflops: 0.64,
            checksum: 64.0,
        };
        let mut out = Vec::new();
        write_run_records(&mut out, &[RunRecord::from(&probe), RunRecord::from(&kernel)]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "schema_version,kind,label,flops_total,wall_seconds,mflops"
        );
        assert!(lines.next().unwrap().starts_with("1.0,probe,"));
        assert!(lines.next().unwrap().starts_with("1.0,mod2as,mod2as rows=10 nnz=20,40,"));
    }
}

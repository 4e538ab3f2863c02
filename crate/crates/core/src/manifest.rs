//! Training corpus catalog with per-sample provenance.
//!
//! A [`DataManifest`] is immutable once built. Removal produces a new
//! manifest (copy-on-write) with a new content hash, so every model can bind
//! its lineage to the exact data it saw.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::{Digest, Hasher};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("row {row}: expected {expected} features, found {found}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("duplicate sample_id `{0}`")]
    DuplicateId(String),
    #[error("row {row}: non-finite value in column `{column}`")]
    NonFinite { row: usize, column: String },
    #[error("row {row}: unparseable value `{value}` in column `{column}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("sample `{sample_id}`: label {label} outside [0, {num_classes})")]
    UnknownLabel {
        sample_id: String,
        label: usize,
        num_classes: usize,
    },
    #[error("sample `{sample_id}`: risk weight {value} must be finite and non-negative")]
    InvalidRiskWeight { sample_id: String, value: f64 },
    #[error("unknown sample_id `{0}`")]
    UnknownId(String),
    #[error("sidecar {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, ManifestError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    /// Content owner / provenance tag; the grouping handle for disgorgement.
    pub source_id: String,
    pub features: Vec<f64>,
    pub label: usize,
    /// Prior probability weight of being disgorged.
    pub risk_weight: f64,
}

impl SampleRecord {
    pub fn new(
        sample_id: impl Into<String>,
        source_id: impl Into<String>,
        features: Vec<f64>,
        label: usize,
    ) -> Self {
        SampleRecord {
            sample_id: sample_id.into(),
            source_id: source_id.into(),
            features,
            label,
            risk_weight: 1.0,
        }
    }

    pub fn with_risk(mut self, risk_weight: f64) -> Self {
        self.risk_weight = risk_weight;
        self
    }
}

/// Sidecar metadata persisted next to a manifest CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub dim: usize,
    pub num_classes: usize,
    pub num_records: usize,
    pub manifest_hash: Digest,
}

#[derive(Debug, Clone)]
pub struct DataManifest {
    records: Vec<SampleRecord>,
    dim: usize,
    num_classes: usize,
    hash: Digest,
    index: HashMap<String, usize>,
}

impl PartialEq for DataManifest {
    fn eq(&self, other: &Self) -> bool {
        self.hash == other.hash && self.records == other.records
    }
}

impl DataManifest {
    /// Validates `records` and computes the manifest hash.
    pub fn new(records: Vec<SampleRecord>, dim: usize, num_classes: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (row, r) in records.iter().enumerate() {
            if r.features.len() != dim {
                return Err(ManifestError::DimensionMismatch {
                    row,
                    expected: dim,
                    found: r.features.len(),
                });
            }
            if let Some(j) = r.features.iter().position(|v| !v.is_finite()) {
                return Err(ManifestError::NonFinite {
                    row,
                    column: format!("f{j}"),
                });
            }
            if r.label >= num_classes {
                return Err(ManifestError::UnknownLabel {
                    sample_id: r.sample_id.clone(),
                    label: r.label,
                    num_classes,
                });
            }
            if !(r.risk_weight.is_finite() && r.risk_weight >= 0.0) {
                return Err(ManifestError::InvalidRiskWeight {
                    sample_id: r.sample_id.clone(),
                    value: r.risk_weight,
                });
            }
            if index.insert(r.sample_id.clone(), row).is_some() {
                return Err(ManifestError::DuplicateId(r.sample_id.clone()));
            }
        }
        let hash = canonical_hash(&records, dim, num_classes);
        Ok(DataManifest {
            records,
            dim,
            num_classes,
            hash,
            index,
        })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn manifest_hash(&self) -> Digest {
        self.hash
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.index.get(sample_id).map(|&i| &self.records[i])
    }

    /// Position of `sample_id` in file order.
    pub fn position(&self, sample_id: &str) -> Option<usize> {
        self.index.get(sample_id).copied()
    }

    pub fn contains(&self, sample_id: &str) -> bool {
        self.index.contains_key(sample_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.sample_id.as_str())
    }

    /// Returns `D'`: every record whose id is not in `ids`, in original order.
    pub fn remove_samples(&self, ids: &BTreeSet<String>) -> Result<DataManifest> {
        if let Some(missing) = ids.iter().find(|id| !self.contains(id)) {
            return Err(ManifestError::UnknownId(missing.clone()));
        }
        let kept = self
            .records
            .iter()
            .filter(|r| !ids.contains(&r.sample_id))
            .cloned()
            .collect();
        DataManifest::new(kept, self.dim, self.num_classes)
    }

    /// Ids of every record owned by `source_id`; empty for unknown sources.
    pub fn query_by_source(&self, source_id: &str) -> BTreeSet<String> {
        self.records
            .iter()
            .filter(|r| r.source_id == source_id)
            .map(|r| r.sample_id.clone())
            .collect()
    }

    /// Distinct sources in order of first appearance.
    pub fn sources(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.source_id.as_str()))
            .map(|r| r.source_id.as_str())
            .collect()
    }

    pub fn meta(&self) -> ManifestMeta {
        ManifestMeta {
            dim: self.dim,
            num_classes: self.num_classes,
            num_records: self.records.len(),
            manifest_hash: self.hash,
        }
    }

    /// Writes the CSV plus its `.meta.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let meta = serde_json::to_string_pretty(&self.meta()).expect("meta serializes");
        let side = sidecar_path(path);
        fs::write(&side, meta + "\n").map_err(|source| ManifestError::Io { path: side, source })
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("sample_id,source_id,label,risk_weight");
        for j in 0..self.dim {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        for r in &self.records {
            let mut row = vec![
                r.sample_id.clone(),
                r.source_id.clone(),
                r.label.to_string(),
                format!("{}", r.risk_weight),
            ];
            row.extend(r.features.iter().map(|v| format!("{v}")));
            w.write_record(&row).expect("writing to memory");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8"));
        out
    }
}

/// Path of the JSON sidecar that accompanies a manifest CSV.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn canonical_hash(records: &[SampleRecord], dim: usize, num_classes: usize) -> Digest {
    const FIELD: &str = "\x1f";
    const RECORD: &str = "\x1e";
    let mut h = Hasher::new();
    h.update(format!("manifest{FIELD}{dim}{FIELD}{num_classes}{RECORD}"));
    for r in records {
        h.update(&r.sample_id).update(FIELD);
        h.update(&r.source_id).update(FIELD);
        h.update(r.label.to_string()).update(FIELD);
        h.real(r.risk_weight);
        for v in &r.features {
            h.update(FIELD).real(*v);
        }
        h.update(RECORD);
    }
    h.finish()
}

/// Parsed CSV header: column positions of the fixed fields plus feature columns.
pub(crate) struct Header {
    pub sample_id: usize,
    pub source_id: Option<usize>,
    pub label: Option<usize>,
    pub risk_weight: Option<usize>,
    pub features: Vec<usize>,
}

impl Header {
    pub(crate) fn parse(headers: &csv::StringRecord, require_labels: bool) -> Result<Header> {
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let sample_id = find("sample_id")
            .ok_or_else(|| ManifestError::Header("missing `sample_id` column".into()))?;
        let source_id = find("source_id");
        let label = find("label");
        if require_labels {
            if source_id.is_none() {
                return Err(ManifestError::Header("missing `source_id` column".into()));
            }
            if label.is_none() {
                return Err(ManifestError::Header("missing `label` column".into()));
            }
        }
        let mut features = Vec::new();
        loop {
            let name = format!("f{}", features.len());
            match find(&name) {
                Some(pos) => features.push(pos),
                None => break,
            }
        }
        let known = 1 + source_id.is_some() as usize
            + label.is_some() as usize
            + find("risk_weight").is_some() as usize
            + features.len();
        if known != headers.len() {
            return Err(ManifestError::Header(format!(
                "unexpected columns in `{}`; expected sample_id,source_id,label,risk_weight,f0..f{{d-1}}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        Ok(Header {
            sample_id,
            source_id,
            label,
            risk_weight: find("risk_weight"),
            features,
        })
    }
}

pub(crate) fn parse_real(row: usize, column: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| ManifestError::Parse {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })?;
    if !v.is_finite() {
        return Err(ManifestError::NonFinite {
            row,
            column: column.to_string(),
        });
    }
    Ok(v)
}

pub(crate) fn parse_features(
    row: usize,
    record: &csv::StringRecord,
    header: &Header,
) -> Result<Vec<f64>> {
    header
        .features
        .iter()
        .enumerate()
        .map(|(j, &pos)| parse_real(row, &format!("f{j}"), &record[pos]))
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a manifest CSV. When `num_classes` is `None` the class count is
/// taken from the sidecar if one exists, else inferred as `max(label) + 1`.
pub fn ingest_csv(path: &Path, num_classes: Option<usize>) -> Result<DataManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let side = sidecar_path(path);
    let meta: Option<ManifestMeta> = if side.exists() {
        let raw = fs::read_to_string(&side).map_err(io_err(&side))?;
        Some(
            serde_json::from_str(&raw).map_err(|e| ManifestError::Sidecar {
                path: side.clone(),
                reason: e.to_string(),
            })?,
        )
    } else {
        None
    };
    let m = parse_csv(&text, num_classes.or(meta.as_ref().map(|m| m.num_classes)))?;
    if let Some(meta) = meta {
        if meta.manifest_hash != m.manifest_hash() || meta.dim != m.dim() {
            return Err(ManifestError::Sidecar {
                path: side,
                reason: format!(
                    "recorded hash {} does not match recomputed {}",
                    meta.manifest_hash,
                    m.manifest_hash()
                ),
            });
        }
    }
    Ok(m)
}

/// Parses manifest CSV text (see [`ingest_csv`]).
pub fn parse_csv(text: &str, num_classes: Option<usize>) -> Result<DataManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = Header::parse(reader.headers()?, true)?;
    let width = reader.headers()?.len();
    let dim = header.features.len();
    let (source_col, label_col) = (header.source_id.unwrap(), header.label.unwrap());

    let mut records = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != width {
            return Err(ManifestError::DimensionMismatch {
                row,
                expected: dim,
                found: rec.len().saturating_sub(width - dim),
            });
        }
        let features = parse_features(row, &rec, &header)?;
        let label: usize = rec[label_col]
            .trim()
            .parse()
            .map_err(|_| ManifestError::Parse {
                row,
                column: "label".into(),
                value: rec[label_col].to_string(),
            })?;
        let risk_weight = match header.risk_weight {
            Some(pos) if !rec[pos].trim().is_empty() => parse_real(row, "risk_weight", &rec[pos])?,
            _ => 1.0,
        };
        records.push(SampleRecord {
            sample_id: rec[header.sample_id].trim().to_string(),
            source_id: rec[source_col].trim().to_string(),
            features,
            label,
            risk_weight,
        });
    }
    let num_classes = num_classes
        .unwrap_or_else(|| records.iter().map(|r| r.label + 1).max().unwrap_or(0));
    DataManifest::new(records, dim, num_classes)
}

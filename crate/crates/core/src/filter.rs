//! Distance suite and the post-hoc candidate rejection filter.
//!
//! A candidate is accepted only when its distance to every protected sample
//! is at least `ε`. Nearest neighbours are found by exhaustive scan.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::manifest::{parse_features, DataManifest, Header, ManifestError};
use crate::rng;
use crate::submodel::LogisticModel;

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("conceptual distance needs a model")]
    MissingModel,
    #[error("p must be >= 1 (or inf), got {0}")]
    InvalidP(f64),
    #[error("epsilon must be a finite value > 0, got {0}")]
    InvalidEpsilon(f64),
    #[error("protected set is empty")]
    EmptyProtectedSet,
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

pub type Result<T> = std::result::Result<T, FilterError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum PNorm {
    Finite(f64),
    Inf,
}

impl FromStr for PNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "max" => Ok(PNorm::Inf),
            other => other
                .parse::<f64>()
                .map(PNorm::Finite)
                .map_err(|_| format!("p must be a number >= 1 or `inf`, got `{s}`")),
        }
    }
}

impl fmt::Display for PNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PNorm::Finite(p) => write!(f, "{p}"),
            PNorm::Inf => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum DistanceKind {
    /// `‖x₂ − x₁‖_p` on raw features.
    Geometric(PNorm),
    /// Euclidean distance between low-level feature statistics `φ(x)`.
    Perceptual,
    /// Euclidean distance between the class scores `ψ(x)` of a model.
    Conceptual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSpec {
    pub kind: DistanceKind,
    pub phi_seed: u64,
    pub psi_model: Option<LogisticModel>,
    pub epsilon: f64,
}

impl DistanceSpec {
    pub fn geometric(p: PNorm, epsilon: f64) -> Self {
        DistanceSpec {
            kind: DistanceKind::Geometric(p),
            phi_seed: 0,
            psi_model: None,
            epsilon,
        }
    }

    pub fn perceptual(phi_seed: u64, epsilon: f64) -> Self {
        DistanceSpec {
            kind: DistanceKind::Perceptual,
            phi_seed,
            psi_model: None,
            epsilon,
        }
    }

    pub fn conceptual(model: LogisticModel, epsilon: f64) -> Self {
        DistanceSpec {
            kind: DistanceKind::Conceptual,
            phi_seed: 0,
            psi_model: Some(model),
            epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(FilterError::InvalidEpsilon(self.epsilon));
        }
        match self.kind {
            DistanceKind::Geometric(PNorm::Finite(p)) if !(p >= 1.0 && p.is_finite()) => {
                Err(FilterError::InvalidP(p))
            }
            DistanceKind::Conceptual if self.psi_model.is_none() => Err(FilterError::MissingModel),
            _ => Ok(()),
        }
    }

    /// Fixes the feature maps for inputs of dimension `dim`.
    pub fn metric(&self, dim: usize) -> Result<Metric> {
        self.validate()?;
        Ok(match self.kind {
            DistanceKind::Geometric(p) => Metric::Geometric { p, dim },
            DistanceKind::Perceptual => Metric::Perceptual(Perceptual::new(dim, self.phi_seed)),
            DistanceKind::Conceptual => {
                let model = self.psi_model.clone().ok_or(FilterError::MissingModel)?;
                if model.dim() != dim {
                    return Err(FilterError::DimensionMismatch {
                        expected: dim,
                        found: model.dim(),
                    });
                }
                Metric::Conceptual(model)
            }
        })
    }
}

/// Block length of the perceptual statistics.
pub const PERCEPTUAL_BLOCK: usize = 2;

/// `φ`: seeded Gaussian projection to `max(1, d/2)` dims, then per-block
/// (mean, population variance) over consecutive blocks of the projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Perceptual {
    projection: DMatrix<f64>,
}

impl Perceptual {
    pub fn new(dim: usize, seed: u64) -> Self {
        let m = (dim / 2).max(1);
        let mut r = rng::seeded(seed);
        let scale = 1.0 / (m as f64).sqrt();
        let projection = DMatrix::from_fn(m, dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut r);
            z * scale
        });
        Perceptual { projection }
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let projected = &self.projection * nalgebra::DVector::from_column_slice(x);
        let mut out = Vec::new();
        for block in projected.as_slice().chunks(PERCEPTUAL_BLOCK) {
            let n = block.len() as f64;
            let mean = block.iter().sum::<f64>() / n;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            out.push(mean);
            out.push(var);
        }
        out
    }
}

/// A distance with its feature maps fixed.
#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    Geometric { p: PNorm, dim: usize },
    Perceptual(Perceptual),
    Conceptual(LogisticModel),
}

impl Metric {
    pub fn dim(&self) -> usize {
        match self {
            Metric::Geometric { dim, .. } => *dim,
            Metric::Perceptual(p) => p.projection.ncols(),
            Metric::Conceptual(m) => m.dim(),
        }
    }

    /// The space the distance is measured in: `x`, `φ(x)` or `ψ(x)`.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(FilterError::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(match self {
            Metric::Geometric { .. } => x.to_vec(),
            Metric::Perceptual(p) => p.features(x),
            Metric::Conceptual(m) => m.logits(x),
        })
    }

    /// Distance between two already-embedded points.
    pub fn between(&self, a: &[f64], b: &[f64]) -> f64 {
        let p = match self {
            Metric::Geometric { p, .. } => *p,
            _ => PNorm::Finite(2.0),
        };
        p_distance(a, b, p)
    }

    pub fn distance(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        Ok(self.between(&self.embed(x1)?, &self.embed(x2)?))
    }
}

pub fn p_distance(a: &[f64], b: &[f64], p: PNorm) -> f64 {
    let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
    match p {
        PNorm::Inf => diffs.fold(0.0, f64::max),
        PNorm::Finite(p) if p == 1.0 => diffs.sum(),
        PNorm::Finite(p) if p == 2.0 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        PNorm::Finite(p) => diffs.map(|d| d.powf(p)).sum::<f64>().powf(1.0 / p),
    }
}

/// One-shot distance between two raw feature vectors.
pub fn distance(x1: &[f64], x2: &[f64], spec: &DistanceSpec) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(FilterError::DimensionMismatch {
            expected: x1.len(),
            found: x2.len(),
        });
    }
    spec.metric(x1.len())?.distance(x1, x2)
}

/// Protected samples embedded once for repeated nearest-neighbour queries.
#[derive(Debug, Clone)]
pub struct ProtectedSet {
    metric: Metric,
    ids: Vec<String>,
    points: Vec<Vec<f64>>,
}

impl ProtectedSet {
    pub fn new(protected: &DataManifest, spec: &DistanceSpec) -> Result<Self> {
        if protected.is_empty() {
            return Err(FilterError::EmptyProtectedSet);
        }
        let metric = spec.metric(protected.dim())?;
        let points = protected
            .records()
            .iter()
            .map(|r| metric.embed(&r.features))
            .collect::<Result<_>>()?;
        Ok(ProtectedSet {
            metric,
            ids: protected.ids().map(String::from).collect(),
            points,
        })
    }

    /// Exact minimum distance and the nearest id (ties go to the lower id).
    pub fn nearest(&self, x: &[f64]) -> Result<(f64, &str)> {
        let q = self.metric.embed(x)?;
        let mut best: Option<(f64, &str)> = None;
        for (id, p) in self.ids.iter().zip(&self.points) {
            let d = self.metric.between(&q, p);
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && id.as_str() < bid),
            };
            if better {
                best = Some((d, id));
            }
        }
        Ok(best.expect("protected set is non-empty"))
    }
}

pub fn min_distance_to_set(x: &[f64], protected: &DataManifest, spec: &DistanceSpec) -> Result<(f64, String)> {
    let set = ProtectedSet::new(protected, spec)?;
    set.nearest(x).map(|(d, id)| (d, id.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub candidate_id: String,
    pub features: Vec<f64>,
}

impl Candidate {
    pub fn new(id: impl Into<String>, features: Vec<f64>) -> Self {
        Candidate {
            candidate_id: id.into(),
            features,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Accept,
    Reject,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Accept => "ACCEPT",
            Verdict::Reject => "REJECT",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterRow {
    pub candidate_id: String,
    pub verdict: Verdict,
    pub dmin: f64,
    pub nearest_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub epsilon: f64,
    pub rows: Vec<FilterRow>,
    pub accepted: usize,
    pub rejected: usize,
}

impl FilterReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("candidate_id,verdict,dmin,nearest_id\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.candidate_id, r.verdict, r.dmin, r.nearest_id));
        }
        out.push_str(&self.summary());
        out.push('\n');
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "# summary: candidates={} accepted={} rejected={} epsilon={}",
            self.rows.len(),
            self.accepted,
            self.rejected,
            self.epsilon
        )
    }
}

/// `ACCEPT` iff `dmin ≥ ε`; rows keep input order.
pub fn filter_candidates(
    candidates: &[Candidate],
    protected: &DataManifest,
    spec: &DistanceSpec,
) -> Result<FilterReport> {
    let set = ProtectedSet::new(protected, spec)?;
    let mut rows = Vec::with_capacity(candidates.len());
    for c in candidates {
        let (dmin, nearest) = set.nearest(&c.features)?;
        rows.push(FilterRow {
            candidate_id: c.candidate_id.clone(),
            verdict: if dmin >= spec.epsilon {
                Verdict::Accept
            } else {
                Verdict::Reject
            },
            dmin,
            nearest_id: nearest.to_string(),
        });
    }
    let accepted = rows.iter().filter(|r| r.verdict == Verdict::Accept).count();
    Ok(FilterReport {
        epsilon: spec.epsilon,
        rejected: rows.len() - accepted,
        accepted,
        rows,
    })
}

/// Reads candidates from manifest-schema CSV; `source_id`, `label` and
/// `risk_weight` columns are optional and ignored.
pub fn parse_candidates(text: &str) -> Result<Vec<Candidate>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(ManifestError::from)?.clone();
    let header = Header::parse(&headers, false)?;
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(ManifestError::from)?;
        if rec.len() != headers.len() {
            return Err(ManifestError::DimensionMismatch {
                row,
                expected: header.features.len(),
                found: rec.len().saturating_sub(headers.len() - header.features.len()),
            }
            .into());
        }
        out.push(Candidate::new(rec[header.sample_id].trim(), parse_features(row, &rec, &header)?));
    }
    Ok(out)
}

pub fn read_candidates(path: &Path) -> Result<Vec<Candidate>> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_candidates(&text)
}

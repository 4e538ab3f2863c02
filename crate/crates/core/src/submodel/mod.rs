//! Shard sub-models and their lineage.
//!
//! Three model kinds, each with its own removal route:
//!
//! | kind | training | removal | removal cost |
//! |------|----------|---------|--------------|
//! | [`NcmModel`] | class means (one pass) | mean subtraction | 0 gradient-evals |
//! | [`RidgeModel`] | Sherman-Morrison updates | rank-one downdate | 1 gradient-eval |
//! | [`LogisticModel`] | seeded mini-batch SGD | Newton step on influence | 2·\|shard\| gradient-evals |
//!
//! Cost is counted in per-sample gradient evaluations, never wall-clock,
//! so forgetting budgets are reproducible across machines.

mod logistic;
mod ncm;
mod persist;
mod ridge;

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::digest::{digest_json, Digest, Hasher};
use crate::dp::{DpConfig, DpHyper, PrivacyAccount};
use crate::manifest::{DataManifest, SampleRecord};

pub use logistic::{influence_remove, train_logistic_sgd, LogisticHyper, LogisticModel};
pub(crate) use logistic::accumulate_ce_gradient;
#[cfg(test)]
pub(crate) use logistic::objective;
pub use ncm::{ncm_remove_sample, train_ncm, NcmModel};
pub use persist::{ModelFile, ParamBlock, MODEL_FORMAT};
pub use ridge::{ridge_add_sample, ridge_remove_sample, train_ridge, RidgeModel};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("cannot train on an empty shard")]
    EmptyShard,
    #[error("sample `{0}` is not in this model's lineage")]
    NotInLineage(String),
    #[error("sample `{0}` is already in this model's lineage")]
    AlreadyInLineage(String),
    #[error("sample `{0}` not found in manifest")]
    UnknownSample(String),
    #[error("class {class} has no samples left to remove")]
    ClassUnderflow { class: usize },
    #[error("non-finite value while {0}; the system is ill-conditioned")]
    NonFinite(&'static str),
    #[error("degenerate downdate (denominator {denominator:e}); retrain required")]
    DegenerateDowndate { denominator: f64 },
    #[error("training diverged at epoch {epoch} (loss {loss}); lower the learning rate")]
    Divergence { epoch: usize, loss: f64 },
    #[error("hessian solve failed (not positive definite); retrain required")]
    HessianSolve,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("unknown model kind `{0}` (expected ncm, ridge or logistic)")]
    UnknownKind(String),
    #[error("model file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ModelError {
    /// Errors that mean "incremental removal is not trustworthy, retrain".
    pub fn requires_retrain(&self) -> bool {
        matches!(
            self,
            ModelError::DegenerateDowndate { .. } | ModelError::HessianSolve | ModelError::NonFinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    Ncm,
    Ridge,
    Logistic,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Ncm => "ncm",
            ModelKind::Ridge => "ridge",
            ModelKind::Logistic => "logistic",
        })
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncm" | "Ncm" => Ok(ModelKind::Ncm),
            "ridge" | "Ridge" => Ok(ModelKind::Ridge),
            "logistic" | "Logistic" => Ok(ModelKind::Logistic),
            other => Err(ModelError::UnknownKind(other.to_string())),
        }
    }
}

/// How a sample left a model; doubles as the disgorgement mode of a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalMethod {
    ExactRetrain,
    Instant,
    Influence,
    ShardDrop,
    DpAttestation,
}

impl RemovalMethod {
    pub const ALL: [RemovalMethod; 5] = [
        RemovalMethod::ExactRetrain,
        RemovalMethod::Instant,
        RemovalMethod::Influence,
        RemovalMethod::ShardDrop,
        RemovalMethod::DpAttestation,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RemovalMethod::ExactRetrain => "exact-retrain",
            RemovalMethod::Instant => "instant",
            RemovalMethod::Influence => "influence",
            RemovalMethod::ShardDrop => "shard-drop",
            RemovalMethod::DpAttestation => "dp-attestation",
        }
    }
}

impl fmt::Display for RemovalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RemovalMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let norm = s.replace('_', "-").to_ascii_lowercase();
        RemovalMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| {
                format!("unknown mode `{s}` (expected exact-retrain, instant, influence, shard-drop or dp-attestation)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub sample_id: String,
    pub method: RemovalMethod,
}

/// Which data a model has been exposed to, and what it cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    /// `None` for monolithic models.
    pub shard_id: Option<usize>,
    pub sample_ids: Vec<String>,
    pub manifest_hash: Digest,
    pub seed: u64,
    pub gradient_evals: u64,
    pub removed: Vec<Removal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub privacy: Option<PrivacyAccount>,
}

impl Lineage {
    pub fn new(data: &ShardData, seed: u64) -> Self {
        Lineage {
            shard_id: data.shard_id,
            sample_ids: data.sample_ids.clone(),
            manifest_hash: data.manifest_hash,
            seed,
            gradient_evals: 0,
            removed: Vec::new(),
            privacy: None,
        }
    }

    pub fn contains(&self, sample_id: &str) -> bool {
        self.sample_ids.iter().any(|s| s == sample_id)
    }

    /// Moves `sample_id` from the exposure set to the removal log.
    pub fn record_removal(&mut self, sample_id: &str, method: RemovalMethod) -> Result<()> {
        let pos = self
            .sample_ids
            .iter()
            .position(|s| s == sample_id)
            .ok_or_else(|| ModelError::NotInLineage(sample_id.to_string()))?;
        self.sample_ids.remove(pos);
        self.removed.push(Removal {
            sample_id: sample_id.to_string(),
            method,
        });
        Ok(())
    }

    pub fn intersects(&self, ids: &BTreeSet<String>) -> bool {
        self.sample_ids.iter().any(|s| ids.contains(s))
    }

    pub fn digest(&self) -> Digest {
        digest_json(self)
    }
}

/// Feature rows and labels of one shard (or a whole manifest), in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardData {
    pub shard_id: Option<usize>,
    pub sample_ids: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub num_classes: usize,
    pub manifest_hash: Digest,
}

impl ShardData {
    /// Gathers `ids` from `m`.
    pub fn from_manifest(m: &DataManifest, ids: &[String], shard_id: Option<usize>) -> Result<Self> {
        let mut features = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for id in ids {
            let r = m.get(id).ok_or_else(|| ModelError::UnknownSample(id.clone()))?;
            features.push(r.features.clone());
            labels.push(r.label);
        }
        Ok(ShardData {
            shard_id,
            sample_ids: ids.to_vec(),
            features,
            labels,
            dim: m.dim(),
            num_classes: m.num_classes(),
            manifest_hash: m.manifest_hash(),
        })
    }

    /// Every record of `m` as one monolithic training set.
    pub fn whole(m: &DataManifest) -> Self {
        let ids: Vec<String> = m.ids().map(String::from).collect();
        Self::from_manifest(m, &ids, None).expect("ids come from the manifest")
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn position(&self, sample_id: &str) -> Option<usize> {
        self.sample_ids.iter().position(|s| s == sample_id)
    }

    pub fn record(&self, i: usize) -> SampleRecord {
        SampleRecord::new(
            self.sample_ids[i].clone(),
            String::new(),
            self.features[i].clone(),
            self.labels[i],
        )
    }

    /// Copy with `sample_id` removed.
    pub fn without(&self, sample_id: &str) -> Result<ShardData> {
        let pos = self
            .position(sample_id)
            .ok_or_else(|| ModelError::NotInLineage(sample_id.to_string()))?;
        let mut out = self.clone();
        out.sample_ids.remove(pos);
        out.features.remove(pos);
        out.labels.remove(pos);
        Ok(out)
    }

    /// Mean feature vector; zeros when empty.
    pub fn centroid(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        if self.is_empty() {
            return c;
        }
        for x in &self.features {
            for (acc, v) in c.iter_mut().zip(x) {
                *acc += v;
            }
        }
        let n = self.len() as f64;
        c.iter_mut().for_each(|v| *v /= n);
        c
    }
}

/// How to (re)train a sub-model from shard data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainSpec {
    Ncm,
    Ridge { lambda: f64 },
    Logistic(LogisticHyper),
    /// Full-batch DP gradient descent; see [`crate::dp`].
    DpLogistic { hyper: DpHyper, config: DpConfig },
}

impl TrainSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainSpec::Ncm => ModelKind::Ncm,
            TrainSpec::Ridge { .. } => ModelKind::Ridge,
            TrainSpec::Logistic(_) | TrainSpec::DpLogistic { .. } => ModelKind::Logistic,
        }
    }

    pub fn train(&self, data: &ShardData, seed: u64) -> Result<SubModel> {
        Ok(match self {
            TrainSpec::Ncm => SubModel::Ncm(train_ncm(data, seed)?),
            TrainSpec::Ridge { lambda } => SubModel::Ridge(train_ridge(data, *lambda, seed)?),
            TrainSpec::Logistic(h) => SubModel::Logistic(train_logistic_sgd(data, h, seed, None)?),
            TrainSpec::DpLogistic { hyper, config } => {
                let config = DpConfig { seed, ..*config };
                match crate::dp::dp_train_on(data, hyper, &config) {
                    Ok((m, _)) => SubModel::Logistic(m),
                    Err(crate::dp::DpError::Model(e)) => return Err(e),
                    Err(e) => return Err(ModelError::InvalidHyper(e.to_string())),
                }
            }
        })
    }

    /// Gradient-evals spent training from scratch on `n` samples.
    pub fn training_cost(&self, n: usize) -> u64 {
        match self {
            TrainSpec::Logistic(h) => (h.epochs * n) as u64,
            TrainSpec::DpLogistic { config, .. } => (config.steps * n) as u64,
            _ => n as u64,
        }
    }
}

/// A trained shard model of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum SubModel {
    Ncm(NcmModel),
    Ridge(RidgeModel),
    Logistic(LogisticModel),
}

impl SubModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            SubModel::Ncm(_) => ModelKind::Ncm,
            SubModel::Ridge(_) => ModelKind::Ridge,
            SubModel::Logistic(_) => ModelKind::Logistic,
        }
    }

    pub fn lineage(&self) -> &Lineage {
        match self {
            SubModel::Ncm(m) => &m.lineage,
            SubModel::Ridge(m) => &m.lineage,
            SubModel::Logistic(m) => &m.lineage,
        }
    }

    pub fn lineage_mut(&mut self) -> &mut Lineage {
        match self {
            SubModel::Ncm(m) => &mut m.lineage,
            SubModel::Ridge(m) => &mut m.lineage,
            SubModel::Logistic(m) => &mut m.lineage,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SubModel::Ncm(m) => m.dim(),
            SubModel::Ridge(m) => m.weights.nrows(),
            SubModel::Logistic(m) => m.weights.nrows(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            SubModel::Ncm(m) => m.class_counts.len(),
            SubModel::Ridge(m) => m.weights.ncols(),
            SubModel::Logistic(m) => m.weights.ncols(),
        }
    }

    /// Class probabilities for one feature vector.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        match self {
            SubModel::Ncm(m) => m.predict_proba(x),
            SubModel::Ridge(m) => m.predict_proba(x),
            SubModel::Logistic(m) => m.predict_proba(x),
        }
    }

    /// Parameters flattened in file order (see [`ModelFile`]).
    pub fn param_blocks(&self) -> Vec<ParamBlock> {
        persist::param_blocks(self)
    }

    /// Bit-exact digest of the parameters (lineage excluded).
    pub fn param_digest(&self) -> Digest {
        let mut h = Hasher::new();
        h.update(self.kind().to_string());
        for block in self.param_blocks() {
            h.update(&block.name);
            h.update((block.rows as u64).to_le_bytes());
            h.update((block.cols as u64).to_le_bytes());
            for v in &block.values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn param_values(&self) -> Vec<f64> {
        self.param_blocks().into_iter().flat_map(|b| b.values).collect()
    }
}

impl From<NcmModel> for SubModel {
    fn from(m: NcmModel) -> Self {
        SubModel::Ncm(m)
    }
}

impl From<RidgeModel> for SubModel {
    fn from(m: RidgeModel) -> Self {
        SubModel::Ridge(m)
    }
}

impl From<LogisticModel> for SubModel {
    fn from(m: LogisticModel) -> Self {
        SubModel::Logistic(m)
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lineage_removal_moves_id() {
        let data = testutil::blobs(4, 2, 2, 1.0, 0);
        let mut l = Lineage::new(&data, 5);
        l.record_removal("s001", RemovalMethod::Instant).unwrap();
        assert!(!l.contains("s001"));
        assert_eq!(l.removed.len(), 1);
        assert!(matches!(
            l.record_removal("s001", RemovalMethod::Instant),
            Err(ModelError::NotInLineage(_))
        ));
    }

    #[test]
    fn shard_data_without_and_centroid() {
        let mut data = testutil::blobs(3, 2, 1, 1.0, 0);
        data.features = vec![vec![0.0, 0.0], vec![2.0, 4.0], vec![4.0, 2.0]];
        assert_eq!(data.centroid(), vec![2.0, 2.0]);
        let less = data.without("s000").unwrap();
        assert_eq!(less.centroid(), vec![3.0, 3.0]);
        assert!(data.without("zzz").is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in RemovalMethod::ALL {
            assert_eq!(m.to_string().parse::<RemovalMethod>().unwrap(), m);
        }
        assert_eq!("exact_retrain".parse::<RemovalMethod>().unwrap(), RemovalMethod::ExactRetrain);
        assert!("forget".parse::<RemovalMethod>().is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("ridge".parse::<ModelKind>().unwrap(), ModelKind::Ridge);
        assert!("tree".parse::<ModelKind>().is_err());
    }
}

//! Shard ensembles: probability-space aggregation of sub-models.
//!
//! Members are kept in a `BTreeMap` keyed by shard id and probabilities are
//! summed in ascending shard order, so the output never depends on the
//! order members were inserted and `TopK(|members|)` reproduces
//! `UniformAverage` bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::manifest::DataManifest;
use crate::math::{argmax, squared_distance};
use crate::rng;
use crate::sharding::ShardPlan;
use crate::submodel::{ModelError, ShardData, SubModel, TrainSpec};

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error("ensemble has no members")]
    Empty,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no member for shard {0}")]
    UnknownShard(usize),
    #[error("shard {0} already has a member")]
    DuplicateShard(usize),
    #[error("refusing to drop shard {0}: it is the last member")]
    LastMember(usize),
    #[error("top-k needs 1 <= k <= {members}, got {k}")]
    InvalidK { k: usize, members: usize },
    #[error("member for shard {shard_id} was trained on manifest {found}, expected {expected}")]
    ManifestMismatch {
        shard_id: usize,
        expected: Digest,
        found: Digest,
    },
    #[error("cannot evaluate on an empty test set")]
    EmptyTestSet,
    #[error("training shard {shard_id}: {source}")]
    Train {
        shard_id: usize,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("ensemble file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "k", rename_all = "snake_case")]
pub enum Aggregation {
    UniformAverage,
    /// Average over the `k` members whose shard centroid is nearest the input.
    TopK(usize),
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::UniformAverage => f.write_str("uniform"),
            Aggregation::TopK(k) => write!(f, "top{k}"),
        }
    }
}

impl FromStr for Aggregation {
    type Err = String;

    /// `uniform` or `topK` / `top-K` / `top:K`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "uniform" {
            return Ok(Aggregation::UniformAverage);
        }
        let k = s
            .strip_prefix("top")
            .map(|r| r.trim_start_matches(['-', ':']))
            .and_then(|r| r.parse::<usize>().ok())
            .ok_or_else(|| format!("unknown aggregation `{s}` (expected uniform or topK)"))?;
        Ok(Aggregation::TopK(k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    /// Shard ids consulted, ascending.
    pub contributors: Vec<usize>,
}

impl Prediction {
    pub fn label(&self) -> usize {
        argmax(&self.probabilities)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Member evaluations per prediction.
    pub mean_latency_members: f64,
    pub num_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub model: SubModel,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    members: BTreeMap<usize, Member>,
    aggregation: Aggregation,
    dim: usize,
    num_classes: usize,
}

impl EnsembleModel {
    pub fn new(members: Vec<(usize, SubModel, Vec<f64>)>, aggregation: Aggregation) -> Result<Self> {
        let (dim, num_classes) = match members.first() {
            Some((_, m, _)) => (m.dim(), m.num_classes()),
            None => return Err(EnsembleError::Empty),
        };
        let expected = members[0].1.lineage().manifest_hash;
        let mut map = BTreeMap::new();
        for (shard_id, model, centroid) in members {
            for found in [model.dim(), centroid.len()] {
                if found != dim {
                    return Err(EnsembleError::DimensionMismatch { expected: dim, found });
                }
            }
            if model.num_classes() != num_classes {
                return Err(EnsembleError::DimensionMismatch {
                    expected: num_classes,
                    found: model.num_classes(),
                });
            }
            let found = model.lineage().manifest_hash;
            if found != expected {
                return Err(EnsembleError::ManifestMismatch {
                    shard_id,
                    expected,
                    found,
                });
            }
            if map.insert(shard_id, Member { model, centroid }).is_some() {
                return Err(EnsembleError::DuplicateShard(shard_id));
            }
        }
        let e = EnsembleModel {
            members: map,
            aggregation,
            dim,
            num_classes,
        };
        e.check_k(aggregation)?;
        Ok(e)
    }

    fn check_k(&self, aggregation: Aggregation) -> Result<()> {
        match aggregation {
            Aggregation::TopK(k) if k == 0 || k > self.members.len() => Err(EnsembleError::InvalidK {
                k,
                members: self.members.len(),
            }),
            _ => Ok(()),
        }
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn with_aggregation(&self, aggregation: Aggregation) -> Result<Self> {
        self.check_k(aggregation)?;
        Ok(EnsembleModel {
            aggregation,
            ..self.clone()
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn shard_ids(&self) -> Vec<usize> {
        self.members.keys().copied().collect()
    }

    pub fn member(&self, shard_id: usize) -> Option<&Member> {
        self.members.get(&shard_id)
    }

    pub fn members(&self) -> impl Iterator<Item = (usize, &Member)> {
        self.members.iter().map(|(&id, m)| (id, m))
    }

    /// Swaps in a retrained or updated member for an existing shard.
    pub fn replace_member(&mut self, shard_id: usize, model: SubModel, centroid: Vec<f64>) -> Result<()> {
        if model.dim() != self.dim || centroid.len() != self.dim {
            return Err(EnsembleError::DimensionMismatch {
                expected: self.dim,
                found: model.dim(),
            });
        }
        let slot = self
            .members
            .get_mut(&shard_id)
            .ok_or(EnsembleError::UnknownShard(shard_id))?;
        *slot = Member { model, centroid };
        Ok(())
    }

    /// Rebinds every member lineage to a new manifest hash.
    pub fn set_manifest_hash(&mut self, hash: Digest) {
        for m in self.members.values_mut() {
            m.model.lineage_mut().manifest_hash = hash;
        }
    }

    /// Shard ids consulted for `x`, ascending.
    pub fn select(&self, x: &[f64]) -> Vec<usize> {
        match self.aggregation {
            Aggregation::UniformAverage => self.shard_ids(),
            Aggregation::TopK(k) => {
                let mut ranked: Vec<(f64, usize)> = self
                    .members
                    .iter()
                    .map(|(&id, m)| (squared_distance(x, &m.centroid), id))
                    .collect();
                ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut chosen: Vec<usize> = ranked.into_iter().take(k).map(|(_, id)| id).collect();
                chosen.sort_unstable();
                chosen
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        if self.members.is_empty() {
            return Err(EnsembleError::Empty);
        }
        if x.len() != self.dim {
            return Err(EnsembleError::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        let contributors = self.select(x);
        let mut probabilities = vec![0.0; self.num_classes];
        for id in &contributors {
            let p = self.members[id].model.predict_proba(x);
            for (acc, v) in probabilities.iter_mut().zip(p) {
                *acc += v;
            }
        }
        let n = contributors.len() as f64;
        probabilities.iter_mut().for_each(|v| *v /= n);
        Ok(Prediction {
            probabilities,
            contributors,
        })
    }

    /// Removes a member at zero training cost. A `TopK(k)` larger than the
    /// remaining membership is clamped.
    pub fn drop_member(&self, shard_id: usize) -> Result<EnsembleModel> {
        if !self.members.contains_key(&shard_id) {
            return Err(EnsembleError::UnknownShard(shard_id));
        }
        if self.members.len() == 1 {
            return Err(EnsembleError::LastMember(shard_id));
        }
        let mut out = self.clone();
        out.members.remove(&shard_id);
        if let Aggregation::TopK(k) = out.aggregation {
            out.aggregation = Aggregation::TopK(k.min(out.members.len()));
        }
        Ok(out)
    }

    pub fn evaluate(&self, test: &DataManifest) -> Result<Evaluation> {
        if test.is_empty() {
            return Err(EnsembleError::EmptyTestSet);
        }
        let mut correct = 0usize;
        let mut consulted = 0usize;
        for r in test.records() {
            let p = self.predict(&r.features)?;
            consulted += p.contributors.len();
            if p.label() == r.label {
                correct += 1;
            }
        }
        let n = test.len() as f64;
        Ok(Evaluation {
            accuracy: correct as f64 / n,
            mean_latency_members: consulted as f64 / n,
            num_samples: test.len(),
        })
    }

    /// Writes `shard-NNN.json` for every member plus `ensemble.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|source| EnsembleError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut entries = Vec::new();
        for (&shard_id, m) in &self.members {
            let file = member_file_name(shard_id);
            m.model.save(&dir.join(&file))?;
            entries.push(MemberEntry {
                shard_id,
                path: file,
                centroid: m.centroid.clone(),
            });
        }
        let index = EnsembleFile {
            format: ENSEMBLE_FORMAT.to_string(),
            aggregation: self.aggregation,
            dim: self.dim,
            num_classes: self.num_classes,
            members: entries,
        };
        let path = dir.join(ENSEMBLE_FILE);
        let text = serde_json::to_string_pretty(&index).expect("ensemble index serializes") + "\n";
        fs::write(&path, text).map_err(|source| EnsembleError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    /// Loads an ensemble index; member paths are relative to its directory.
    pub fn load(path: &Path) -> Result<EnsembleModel> {
        let text = fs::read_to_string(path).map_err(|source| EnsembleError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let format_err = |reason: String| EnsembleError::Format {
            path: path.to_path_buf(),
            reason,
        };
        let index: EnsembleFile = serde_json::from_str(&text).map_err(|e| format_err(e.to_string()))?;
        if index.format != ENSEMBLE_FORMAT {
            return Err(format_err(format!("unsupported format `{}`", index.format)));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut members = Vec::with_capacity(index.members.len());
        for entry in index.members {
            let model = SubModel::load(&base.join(&entry.path))?;
            members.push((entry.shard_id, model, entry.centroid));
        }
        let e = EnsembleModel::new(members, index.aggregation)?;
        if e.dim != index.dim || e.num_classes != index.num_classes {
            return Err(format_err("header dims disagree with members".into()));
        }
        Ok(e)
    }
}

pub const ENSEMBLE_FORMAT: &str = "disgorge-ensemble/1";
pub const ENSEMBLE_FILE: &str = "ensemble.json";

pub fn member_file_name(shard_id: usize) -> String {
    format!("shard-{shard_id:03}.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    pub shard_id: usize,
    pub path: String,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFile {
    pub format: String,
    pub aggregation: Aggregation,
    pub dim: usize,
    pub num_classes: usize,
    pub members: Vec<MemberEntry>,
}

/// Training seed of shard `shard_id` under base seed `base`.
pub fn member_seed(base: u64, shard_id: usize) -> u64 {
    rng::derive_seed(base, shard_id as u64)
}

/// Trains one member per shard of `plan`; shards train in parallel but each
/// member depends only on its own data and seed.
pub fn build_ensemble(
    manifest: &DataManifest,
    plan: &ShardPlan,
    spec: &TrainSpec,
    base_seed: u64,
    aggregation: Aggregation,
) -> Result<EnsembleModel> {
    let members = plan
        .shards
        .par_iter()
        .map(|shard| {
            let data = ShardData::from_manifest(manifest, &shard.sample_ids, Some(shard.shard_id))?;
            let model = spec
                .train(&data, member_seed(base_seed, shard.shard_id))
                .map_err(|source| EnsembleError::Train {
                    shard_id: shard.shard_id,
                    source,
                })?;
            Ok((shard.shard_id, model, data.centroid()))
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleModel::new(members, aggregation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::SampleRecord;
    use crate::sharding::{plan_shards, Strategy};
    use crate::submodel::{train_ncm, Lineage, LogisticHyper, LogisticModel};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn blob_manifest(n: usize, seed: u64) -> DataManifest {
        let data = crate::submodel::testutil::blobs(n, 3, 3, 3.0, seed);
        let records = (0..n)
            .map(|i| {
                SampleRecord::new(
                    data.sample_ids[i].clone(),
                    format!("src{}", i % 5),
                    data.features[i].clone(),
                    data.labels[i],
                )
            })
            .collect();
        DataManifest::new(records, 3, 3).unwrap()
    }

    /// A logistic model whose output is the constant distribution `p`.
    fn constant(p: &[f64], shard_id: usize) -> SubModel {
        let data = crate::submodel::testutil::blobs(2, 2, 2, 1.0, 0);
        let mut lineage = Lineage::new(&data, 0);
        lineage.shard_id = Some(shard_id);
        SubModel::Logistic(LogisticModel {
            weights: DMatrix::zeros(2, p.len()),
            bias: DVector::from_iterator(p.len(), p.iter().map(|v| v.ln())),
            hyper: LogisticHyper::default(),
            lineage,
        })
    }

    fn ensemble_of(ps: &[&[f64]], agg: Aggregation) -> EnsembleModel {
        let members = ps
            .iter()
            .enumerate()
            .map(|(i, p)| (i, constant(p, i), vec![i as f64, 0.0]))
            .collect();
        EnsembleModel::new(members, agg).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn uniform_average_of_two() {
        let e = ensemble_of(&[&[0.8, 0.2], &[0.6, 0.4]], Aggregation::UniformAverage);
        let p = e.predict(&[0.0, 0.0]).unwrap();
        assert!(close(&p.probabilities, &[0.7, 0.3]));
        assert_eq!(p.contributors, vec![0, 1]);
    }

    #[test]
    fn single_member_passes_through() {
        let m = blob_manifest(30, 1);
        let plan = plan_shards(&m, Strategy::UniformRandom, 1, 0).unwrap();
        let e = build_ensemble(&m, &plan, &TrainSpec::Ncm, 9, Aggregation::UniformAverage).unwrap();
        let single = e.member(0).unwrap().model.clone();
        for r in m.records() {
            assert_eq!(e.predict(&r.features).unwrap().probabilities, single.predict_proba(&r.features));
        }
    }

    #[test]
    fn top_k_selects_nearest_centroids_with_low_id_ties() {
        let e = ensemble_of(&[&[0.9, 0.1], &[0.5, 0.5], &[0.1, 0.9]], Aggregation::TopK(1));
        assert_eq!(e.predict(&[2.2, 0.0]).unwrap().contributors, vec![2]);
        // equidistant from shards 0 and 1
        assert_eq!(e.predict(&[0.5, 0.0]).unwrap().contributors, vec![0]);
        let e2 = e.with_aggregation(Aggregation::TopK(2)).unwrap();
        let p = e2.predict(&[1.6, 0.0]).unwrap();
        assert_eq!(p.contributors, vec![1, 2]);
        assert!(close(&p.probabilities, &[0.3, 0.7]));
    }

    #[test]
    fn top_k_all_equals_uniform_bitwise() {
        let m = blob_manifest(60, 2);
        let plan = plan_shards(&m, Strategy::UniformRandom, 4, 3).unwrap();
        let spec = TrainSpec::Logistic(LogisticHyper {
            epochs: 5,
            ..LogisticHyper::default()
        });
        let e = build_ensemble(&m, &plan, &spec, 1, Aggregation::UniformAverage).unwrap();
        let all = e.with_aggregation(Aggregation::TopK(4)).unwrap();
        for r in m.records() {
            assert_eq!(e.predict(&r.features).unwrap(), all.predict(&r.features).unwrap());
        }
    }

    #[test]
    fn drop_member_matches_rebuild() {
        let m = blob_manifest(60, 4);
        let plan = plan_shards(&m, Strategy::UniformRandom, 3, 1).unwrap();
        let e = build_ensemble(&m, &plan, &TrainSpec::Ncm, 5, Aggregation::UniformAverage).unwrap();
        let dropped = e.drop_member(1).unwrap();
        let rebuilt = EnsembleModel::new(
            [0, 2]
                .iter()
                .map(|&i| {
                    let mem = e.member(i).unwrap();
                    (i, mem.model.clone(), mem.centroid.clone())
                })
                .collect(),
            Aggregation::UniformAverage,
        )
        .unwrap();
        for r in m.records() {
            let p = dropped.predict(&r.features).unwrap();
            assert!(!p.contributors.contains(&1));
            assert_eq!(p, rebuilt.predict(&r.features).unwrap());
        }
        assert!(matches!(e.drop_member(7), Err(EnsembleError::UnknownShard(7))));
        let one = dropped.drop_member(0).unwrap();
        assert!(matches!(one.drop_member(2), Err(EnsembleError::LastMember(2))));
    }

    #[test]
    fn drop_from_three_equal_members() {
        let e = ensemble_of(&[&[0.5, 0.5], &[0.9, 0.1], &[0.7, 0.3]], Aggregation::UniformAverage);
        let p = e.drop_member(0).unwrap().predict(&[0.0, 0.0]).unwrap();
        assert!(close(&p.probabilities, &[0.8, 0.2]));
    }

    #[test]
    fn evaluate_reports_latency_proxy() {
        let m = blob_manifest(80, 6);
        let plan = plan_shards(&m, Strategy::UniformRandom, 8, 0).unwrap();
        let e = build_ensemble(&m, &plan, &TrainSpec::Ncm, 0, Aggregation::UniformAverage).unwrap();
        assert_eq!(e.evaluate(&m).unwrap().mean_latency_members, 8.0);
        let t2 = e.with_aggregation(Aggregation::TopK(2)).unwrap();
        assert_eq!(t2.evaluate(&m).unwrap().mean_latency_members, 2.0);
        let empty = m.remove_samples(&m.ids().map(String::from).collect()).unwrap();
        assert!(matches!(e.evaluate(&empty), Err(EnsembleError::EmptyTestSet)));
    }

    #[test]
    fn replicated_member_keeps_single_model_accuracy() {
        let m = blob_manifest(45, 8);
        let model = SubModel::Ncm(train_ncm(&ShardData::whole(&m), 0).unwrap());
        let single = EnsembleModel::new(vec![(0, model.clone(), vec![0.0; 3])], Aggregation::UniformAverage)
            .unwrap()
            .evaluate(&m)
            .unwrap();
        let many = EnsembleModel::new(
            (0..5).map(|i| (i, model.clone(), vec![0.0; 3])).collect(),
            Aggregation::UniformAverage,
        )
        .unwrap()
        .evaluate(&m)
        .unwrap();
        assert_eq!(single.accuracy, many.accuracy);
    }

    #[test]
    fn rejects_invalid_construction() {
        assert!(matches!(
            EnsembleModel::new(vec![], Aggregation::UniformAverage),
            Err(EnsembleError::Empty)
        ));
        let e = ensemble_of(&[&[0.5, 0.5]], Aggregation::UniformAverage);
        assert!(matches!(
            e.with_aggregation(Aggregation::TopK(2)),
            Err(EnsembleError::InvalidK { .. })
        ));
        assert!(matches!(
            e.predict(&[1.0]),
            Err(EnsembleError::DimensionMismatch { .. })
        ));
        let mut other = constant(&[0.5, 0.5], 1);
        other.lineage_mut().manifest_hash = Digest::of(b"x");
        assert!(matches!(
            EnsembleModel::new(
                vec![(0, constant(&[0.5, 0.5], 0), vec![0.0; 2]), (1, other, vec![0.0; 2])],
                Aggregation::UniformAverage
            ),
            Err(EnsembleError::ManifestMismatch { .. })
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let m = blob_manifest(40, 3);
        let plan = plan_shards(&m, Strategy::SourceGrouped, 3, 0).unwrap();
        let e = build_ensemble(&m, &plan, &TrainSpec::Ridge { lambda: 0.5 }, 2, Aggregation::TopK(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = e.save(dir.path()).unwrap();
        assert_eq!(EnsembleModel::load(&path).unwrap(), e);
    }

    #[test]
    fn aggregation_parsing() {
        assert_eq!("uniform".parse::<Aggregation>().unwrap(), Aggregation::UniformAverage);
        assert_eq!("top3".parse::<Aggregation>().unwrap(), Aggregation::TopK(3));
        assert_eq!("top-2".parse::<Aggregation>().unwrap(), Aggregation::TopK(2));
        assert!("best".parse::<Aggregation>().is_err());
        assert_eq!(Aggregation::TopK(4).to_string().parse::<Aggregation>().unwrap(), Aggregation::TopK(4));
    }

    proptest! {
        #[test]
        fn outputs_on_simplex_and_order_free(
            raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 1..6),
            x in prop::collection::vec(-3.0f64..3.0, 2),
            k in 1usize..6,
        ) {
            let ps: Vec<Vec<f64>> = raw
                .iter()
                .map(|r| {
                    let s: f64 = r.iter().sum();
                    r.iter().map(|v| v / s).collect()
                })
                .collect();
            let agg = Aggregation::TopK(k.min(ps.len()));
            let fwd: Vec<_> = ps.iter().enumerate().map(|(i, p)| (i, constant(p, i), vec![i as f64, -(i as f64)])).collect();
            let mut rev = fwd.clone();
            rev.reverse();
            let a = EnsembleModel::new(fwd, agg).unwrap().predict(&x).unwrap();
            let b = EnsembleModel::new(rev, agg).unwrap().predict(&x).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.probabilities.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

//! Disjoint shard partitions and expected forgetting cost.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::digest::{digest_json, Digest};
use crate::manifest::{sidecar_path, DataManifest};
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum ShardError {
    #[error("num_shards {requested} out of range [1, {max}]")]
    ShardCount { requested: usize, max: usize },
    #[error("source-grouped plan needs at most {sources} shards (one per distinct source), got {requested}")]
    TooFewSources { requested: usize, sources: usize },
    #[error("unknown strategy `{0}` (expected uniform, source or risk)")]
    UnknownStrategy(String),
    #[error("plan file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ShardError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    UniformRandom,
    SourceGrouped,
    RiskWeighted,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::UniformRandom => "uniform",
            Strategy::SourceGrouped => "source",
            Strategy::RiskWeighted => "risk",
        })
    }
}

impl FromStr for Strategy {
    type Err = ShardError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" | "UniformRandom" => Ok(Strategy::UniformRandom),
            "source" | "SourceGrouped" => Ok(Strategy::SourceGrouped),
            "risk" | "RiskWeighted" => Ok(Strategy::RiskWeighted),
            other => Err(ShardError::UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub shard_id: usize,
    /// Member ids in manifest order.
    pub sample_ids: Vec<String>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub shards: Vec<Shard>,
    pub strategy: Strategy,
    pub seed: u64,
    pub manifest_hash: Digest,
}

/// Metadata sidecar for a persisted plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMeta {
    pub strategy: Strategy,
    pub seed: u64,
    pub manifest_hash: Digest,
    pub num_shards: usize,
}

impl ShardPlan {
    pub fn num_shards(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, shard_id: usize) -> Option<&Shard> {
        self.shards.iter().find(|s| s.shard_id == shard_id)
    }

    pub fn shard_ids(&self) -> Vec<usize> {
        self.shards.iter().map(|s| s.shard_id).collect()
    }

    /// Map from sample id to owning shard id.
    pub fn assignment(&self) -> HashMap<&str, usize> {
        self.shards
            .iter()
            .flat_map(|s| s.sample_ids.iter().map(move |id| (id.as_str(), s.shard_id)))
            .collect()
    }

    pub fn shard_of(&self, sample_id: &str) -> Option<usize> {
        self.shards
            .iter()
            .find(|s| s.sample_ids.iter().any(|x| x == sample_id))
            .map(|s| s.shard_id)
    }

    /// Shards touched by `ids`, ascending by shard id.
    pub fn affected_shards(&self, ids: &BTreeSet<String>) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .shards
            .iter()
            .filter(|s| s.sample_ids.iter().any(|x| ids.contains(x)))
            .map(|s| s.shard_id)
            .collect();
        out.sort_unstable();
        out
    }

    /// Plan with `ids` removed from their shards. Shards left empty are
    /// dropped; their ids are returned alongside.
    pub fn without(&self, ids: &BTreeSet<String>, manifest_hash: Digest) -> (ShardPlan, Vec<usize>) {
        let mut emptied = Vec::new();
        let shards = self
            .shards
            .iter()
            .filter_map(|s| {
                let kept: Vec<String> = s
                    .sample_ids
                    .iter()
                    .filter(|x| !ids.contains(*x))
                    .cloned()
                    .collect();
                if kept.is_empty() {
                    emptied.push(s.shard_id);
                    None
                } else {
                    Some(Shard {
                        shard_id: s.shard_id,
                        sample_ids: kept,
                    })
                }
            })
            .collect();
        (
            ShardPlan {
                shards,
                strategy: self.strategy,
                seed: self.seed,
                manifest_hash,
            },
            emptied,
        )
    }

    pub fn digest(&self) -> Digest {
        digest_json(self)
    }

    pub fn meta(&self) -> PlanMeta {
        PlanMeta {
            strategy: self.strategy,
            seed: self.seed,
            manifest_hash: self.manifest_hash,
            num_shards: self.shards.len(),
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("shard_id,sample_id\n");
        for s in &self.shards {
            for id in &s.sample_ids {
                out.push_str(&format!("{},{}\n", s.shard_id, id));
            }
        }
        out
    }

    /// Writes the `shard_id,sample_id` table and its JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ShardError::Io { path, source }
        };
        fs::write(path, self.to_table()).map_err(io(path))?;
        let side = sidecar_path(path);
        let meta = serde_json::to_string_pretty(&self.meta()).expect("meta serializes") + "\n";
        fs::write(&side, meta).map_err(io(&side))
    }

    pub fn load(path: &Path) -> Result<ShardPlan> {
        let fmt_err = |reason: String| ShardError::Format {
            path: path.to_path_buf(),
            reason,
        };
        let side = sidecar_path(path);
        let meta_raw = fs::read_to_string(&side).map_err(|source| ShardError::Io {
            path: side.clone(),
            source,
        })?;
        let meta: PlanMeta = serde_json::from_str(&meta_raw).map_err(|e| fmt_err(e.to_string()))?;
        let table = fs::read_to_string(path).map_err(|source| ShardError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = table.lines();
        if lines.next() != Some("shard_id,sample_id") {
            return Err(fmt_err("missing `shard_id,sample_id` header".into()));
        }
        let mut shards: Vec<Shard> = Vec::new();
        for (i, line) in lines.enumerate() {
            let (sid, id) = line
                .split_once(',')
                .ok_or_else(|| fmt_err(format!("line {}: expected two fields", i + 2)))?;
            let sid: usize = sid
                .parse()
                .map_err(|_| fmt_err(format!("line {}: bad shard id `{sid}`", i + 2)))?;
            match shards.last_mut() {
                Some(s) if s.shard_id == sid => s.sample_ids.push(id.to_string()),
                _ => shards.push(Shard {
                    shard_id: sid,
                    sample_ids: vec![id.to_string()],
                }),
            }
        }
        if shards.len() != meta.num_shards {
            return Err(fmt_err(format!(
                "sidecar lists {} shards, table has {}",
                meta.num_shards,
                shards.len()
            )));
        }
        Ok(ShardPlan {
            shards,
            strategy: meta.strategy,
            seed: meta.seed,
            manifest_hash: meta.manifest_hash,
        })
    }
}

/// Partitions `m` into `num_shards` disjoint, non-empty shards.
pub fn plan_shards(
    m: &DataManifest,
    strategy: Strategy,
    num_shards: usize,
    seed: u64,
) -> Result<ShardPlan> {
    let n = m.len();
    if num_shards == 0 || num_shards > n {
        return Err(ShardError::ShardCount {
            requested: num_shards,
            max: n,
        });
    }
    let groups: Vec<Vec<usize>> = match strategy {
        Strategy::UniformRandom => uniform(n, num_shards, seed),
        Strategy::SourceGrouped => source_grouped(m, num_shards)?,
        Strategy::RiskWeighted => risk_weighted(m, num_shards),
    };
    let shards = groups
        .into_iter()
        .enumerate()
        .map(|(shard_id, mut members)| {
            members.sort_unstable();
            Shard {
                shard_id,
                sample_ids: members
                    .into_iter()
                    .map(|i| m.records()[i].sample_id.clone())
                    .collect(),
            }
        })
        .collect();
    Ok(ShardPlan {
        shards,
        strategy,
        seed,
        manifest_hash: m.manifest_hash(),
    })
}

// Seeded shuffle, then round-robin.
fn uniform(n: usize, num_shards: usize, seed: u64) -> Vec<Vec<usize>> {
    let order = rng::permutation(n, &mut rng::seeded(seed));
    let mut groups = vec![Vec::with_capacity(n / num_shards + 1); num_shards];
    for (pos, idx) in order.into_iter().enumerate() {
        groups[pos % num_shards].push(idx);
    }
    groups
}

// Whole sources, largest first, each into the currently lightest shard
// (ties to the lower shard id).
fn source_grouped(m: &DataManifest, num_shards: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in m.records().iter().enumerate() {
        by_source.entry(r.source_id.as_str()).or_default().push(i);
    }
    if num_shards > by_source.len() {
        return Err(ShardError::TooFewSources {
            requested: num_shards,
            sources: by_source.len(),
        });
    }
    let mut sources: Vec<(&str, Vec<usize>)> = by_source.into_iter().collect();
    // stable: equal sizes stay in source_id order
    sources.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); num_shards];
    for (_, members) in sources {
        let target = (0..num_shards)
            .min_by_key(|&j| (groups[j].len(), j))
            .expect("num_shards >= 1");
        groups[target].extend(members);
    }
    Ok(groups)
}

// Highest-risk samples fill the smallest shard (ceil(N / 2S)); the rest are
// split into contiguous risk-descending blocks whose sizes differ by at most
// one, smaller blocks first.
fn risk_weighted(m: &DataManifest, num_shards: usize) -> Vec<Vec<usize>> {
    let n = m.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        m.records()[b]
            .risk_weight
            .total_cmp(&m.records()[a].risk_weight)
            .then(a.cmp(&b))
    });
    if num_shards == 1 {
        return vec![order];
    }
    let head = n.div_ceil(2 * num_shards);
    let rest = n - head;
    let others = num_shards - 1;
    let mut sizes = vec![head];
    let (base, extra) = (rest / others, rest % others);
    sizes.extend((0..others).map(|j| base + usize::from(j >= others - extra)));
    let mut groups = Vec::with_capacity(num_shards);
    let mut start = 0;
    for size in sizes {
        groups.push(order[start..start + size].to_vec());
        start += size;
    }
    groups
}

/// True iff `plan` is a valid disjoint, covering, non-empty partition of `m`.
pub fn verify_partition(plan: &ShardPlan, m: &DataManifest) -> bool {
    if plan.manifest_hash != m.manifest_hash() || plan.shards.is_empty() {
        return false;
    }
    let mut shard_ids = BTreeSet::new();
    let mut seen = BTreeSet::new();
    for s in &plan.shards {
        if s.is_empty() || !shard_ids.insert(s.shard_id) {
            return false;
        }
        for id in &s.sample_ids {
            if !m.contains(id) || !seen.insert(id.as_str()) {
                return false;
            }
        }
    }
    if seen.len() != m.len() {
        return false;
    }
    if plan.strategy == Strategy::SourceGrouped {
        let mut home: HashMap<&str, usize> = HashMap::new();
        for s in &plan.shards {
            for id in &s.sample_ids {
                let src = m.get(id).map(|r| r.source_id.as_str()).unwrap_or_default();
                if *home.entry(src).or_insert(s.shard_id) != s.shard_id {
                    return false;
                }
            }
        }
    }
    true
}

/// Σ P(sample disgorged) · |its shard| · `cost_per_sample`, with P the
/// risk weights normalized over the manifest (uniform when they sum to 0).
pub fn expected_forgetting_cost(plan: &ShardPlan, m: &DataManifest, cost_per_sample: f64) -> f64 {
    let total: f64 = m.records().iter().map(|r| r.risk_weight).sum();
    let uniform = total <= 0.0;
    let n = m.len() as f64;
    let mut cost = 0.0;
    for s in &plan.shards {
        let size = s.len() as f64;
        for id in &s.sample_ids {
            let p = match m.get(id) {
                Some(_) if uniform => 1.0 / n,
                Some(r) => r.risk_weight / total,
                None => 0.0,
            };
            cost += p * size;
        }
    }
    cost * cost_per_sample
}

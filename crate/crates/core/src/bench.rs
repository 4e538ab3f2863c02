//! Sweep harness for the forgetting-cost / test-error / latency trade-off.
//!
//! Forgetting cost is the expected number of gradient-evals to remove one
//! sample drawn by risk weight, divided by a full retrain:
//!
//! * logistic: retraining a shard of size `n` without the sample costs
//!   `epochs·(n − 1)`, so the normalized cost is `(Σ p_i·n_i − 1)/N`;
//! * ridge: one downdate, `1/N`;
//! * NCM: mean subtraction, `0`.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{build_ensemble, Aggregation};
use crate::manifest::DataManifest;
use crate::sharding::{expected_forgetting_cost, plan_shards, Strategy};
use crate::submodel::{LogisticHyper, ModelKind, TrainSpec};
use crate::synth::train_test_split;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid sweep: {0}")]
    InvalidConfig(String),
    #[error("cell {label} (seed {seed}): {message}")]
    Cell { label: String, seed: u64, message: String },
    #[error("train/test split: {0}")]
    Split(#[from] crate::manifest::ManifestError),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub shard_counts: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub kinds: Vec<ModelKind>,
    /// Replicates; each seeds both the plan and member training.
    pub seeds: Vec<u64>,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub logistic: LogisticHyper,
    pub ridge_lambda: f64,
    pub aggregation: Aggregation,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            shard_counts: vec![1, 2, 4, 8, 16],
            strategies: vec![Strategy::UniformRandom],
            kinds: vec![ModelKind::Ncm, ModelKind::Ridge, ModelKind::Logistic],
            seeds: vec![0, 1, 2, 3, 4],
            test_fraction: 0.25,
            split_seed: 0,
            logistic: LogisticHyper::default(),
            ridge_lambda: 1.0,
            aggregation: Aggregation::UniformAverage,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self, train_size: usize) -> Result<()> {
        let bad = |m: &str| Err(BenchError::InvalidConfig(m.to_string()));
        if self.shard_counts.is_empty() || self.strategies.is_empty() || self.kinds.is_empty() || self.seeds.is_empty() {
            return bad("shard counts, strategies, kinds and seeds must all be non-empty");
        }
        if let Some(s) = self.shard_counts.iter().find(|&&s| s == 0 || s > train_size) {
            return Err(BenchError::InvalidConfig(format!(
                "shard count {s} is invalid for {train_size} training samples"
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test fraction must lie in (0, 1)");
        }
        Ok(())
    }

    fn spec(&self, kind: ModelKind) -> TrainSpec {
        match kind {
            ModelKind::Ncm => TrainSpec::Ncm,
            ModelKind::Ridge => TrainSpec::Ridge {
                lambda: self.ridge_lambda,
            },
            ModelKind::Logistic => TrainSpec::Logistic(self.logistic),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    pub shards: usize,
    pub strategy: Strategy,
    pub kind: ModelKind,
    pub norm_cost: f64,
    pub test_error: f64,
    /// Sample standard deviation of the test error across seeds.
    pub err_std: f64,
    pub latency_members: f64,
    pub on_frontier: bool,
}

impl fmt::Display for ParetoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} cost={:.4} error={:.4}±{:.4} latency={}",
            self.label, self.norm_cost, self.test_error, self.err_std, self.latency_members
        )
    }
}

pub fn cell_label(kind: ModelKind, strategy: Strategy, shards: usize) -> String {
    format!("{kind}-{strategy}-S{shards}")
}

/// Normalized expected cost of forgetting one sample under `plan`.
pub fn normalized_forget_cost(kind: ModelKind, plan: &crate::sharding::ShardPlan, m: &DataManifest) -> f64 {
    let n = m.len() as f64;
    match kind {
        ModelKind::Ncm => 0.0,
        ModelKind::Ridge => 1.0 / n,
        ModelKind::Logistic => (expected_forgetting_cost(plan, m, 1.0) - 1.0) / n,
    }
}

struct CellRun {
    norm_cost: f64,
    test_error: f64,
    latency: f64,
}

fn run_cell(
    train: &DataManifest,
    test: &DataManifest,
    cfg: &SweepConfig,
    kind: ModelKind,
    strategy: Strategy,
    shards: usize,
    seed: u64,
) -> Result<CellRun> {
    let fail = |message: String| BenchError::Cell {
        label: cell_label(kind, strategy, shards),
        seed,
        message,
    };
    let plan = plan_shards(train, strategy, shards, seed).map_err(|e| fail(e.to_string()))?;
    let agg = match cfg.aggregation {
        Aggregation::TopK(k) => Aggregation::TopK(k.min(plan.num_shards())),
        a => a,
    };
    let ensemble = build_ensemble(train, &plan, &cfg.spec(kind), seed, agg).map_err(|e| fail(e.to_string()))?;
    let eval = ensemble.evaluate(test).map_err(|e| fail(e.to_string()))?;
    Ok(CellRun {
        norm_cost: normalized_forget_cost(kind, &plan, train),
        test_error: 1.0 - eval.accuracy,
        latency: eval.mean_latency_members,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Runs every (kind, strategy, S) cell over all seeds and marks the frontier.
/// Output order is kind, strategy, S as listed in `cfg`, whatever order the
/// parallel cells finish in.
pub fn run_sweep(manifest: &DataManifest, cfg: &SweepConfig) -> Result<Vec<ParetoPoint>> {
    let (train, test) = train_test_split(manifest, cfg.test_fraction, cfg.split_seed)?;
    cfg.validate(train.len())?;
    let mut cells = Vec::new();
    for &kind in &cfg.kinds {
        for &strategy in &cfg.strategies {
            for &s in &cfg.shard_counts {
                cells.push((kind, strategy, s));
            }
        }
    }
    let mut points = cells
        .par_iter()
        .map(|&(kind, strategy, shards)| {
            let runs = cfg
                .seeds
                .iter()
                .map(|&seed| run_cell(&train, &test, cfg, kind, strategy, shards, seed))
                .collect::<Result<Vec<_>>>()?;
            let errors: Vec<f64> = runs.iter().map(|r| r.test_error).collect();
            Ok(ParetoPoint {
                label: cell_label(kind, strategy, shards),
                shards,
                strategy,
                kind,
                norm_cost: mean(&runs.iter().map(|r| r.norm_cost).collect::<Vec<_>>()),
                test_error: mean(&errors),
                err_std: sample_std(&errors),
                latency_members: mean(&runs.iter().map(|r| r.latency).collect::<Vec<_>>()),
                on_frontier: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    mark_frontier(&mut points);
    Ok(points)
}

fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> bool {
    a.norm_cost <= b.norm_cost
        && a.test_error <= b.test_error
        && (a.norm_cost < b.norm_cost || a.test_error < b.test_error)
}

/// Sets `on_frontier` on every point not strictly dominated in (cost, error).
pub fn mark_frontier(points: &mut [ParetoPoint]) {
    // sort by cost, then error: a point is dominated iff some earlier point
    // has error ≤ its own and differs from it in at least one coordinate
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&points[i], &points[j]);
        a.norm_cost
            .total_cmp(&b.norm_cost)
            .then(a.test_error.total_cmp(&b.test_error))
    });
    let mut flags = vec![false; points.len()];
    let mut best: Option<usize> = None;
    for &i in &order {
        let dominated = best.is_some_and(|b| dominates(&points[b], &points[i]));
        flags[i] = !dominated;
        if best.is_none_or(|b| points[i].test_error < points[b].test_error) {
            best = Some(i);
        }
    }
    for (p, f) in points.iter_mut().zip(flags) {
        p.on_frontier = f;
    }
}

/// Frontier points ordered by cost, then label.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut marked = points.to_vec();
    mark_frontier(&mut marked);
    let mut front: Vec<ParetoPoint> = marked.into_iter().filter(|p| p.on_frontier).collect();
    front.sort_by(|a, b| a.norm_cost.total_cmp(&b.norm_cost).then_with(|| a.label.cmp(&b.label)));
    front
}

pub const CSV_HEADER: &str = "label,S,strategy,kind,norm_cost,test_error,err_std,latency_members,on_frontier";

pub fn to_csv(points: &[ParetoPoint]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.label, p.shards, p.strategy, p.kind, p.norm_cost, p.test_error, p.err_std, p.latency_members, p.on_frontier
        ));
    }
    out
}

/// Two whitespace-separated columns (cost, error) of the frontier.
pub fn frontier_plot_data(points: &[ParetoPoint]) -> String {
    let mut out = String::from("# norm_cost test_error\n");
    for p in pareto_frontier(points) {
        out.push_str(&format!("{} {}\n", p.norm_cost, p.test_error));
    }
    out
}

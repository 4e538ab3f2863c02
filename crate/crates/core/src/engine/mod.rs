//! Disgorgement engine: resolves a request's scope, routes it to the removal
//! mechanism, and emits a certificate plus an audit entry.
//!
//! Execution works on a copy of the state and returns the successor; the
//! caller commits it. [`Engine`] bundles a state with its audit log and is
//! the single writer.

mod audit;
mod certificate;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::digest::{digest_json, Digest, Hasher};
use crate::dp::{group_epsilon, PrivacyAccount};
use crate::ensemble::{build_ensemble, Aggregation, EnsembleError, EnsembleModel};
use crate::manifest::{DataManifest, ManifestError};
use crate::sharding::ShardPlan;
use crate::submodel::{
    influence_remove, ncm_remove_sample, ridge_remove_sample, ModelError, ModelKind, RemovalMethod, ShardData,
    SubModel, TrainSpec,
};

pub use audit::{AuditEntry, AuditError, AuditLog, AuditRecord};
pub use certificate::{
    verify_certificate, Certificate, CertificateKind, DpEvidence, Evidence, InfluenceEvidence, ReasonCode,
    RetrainEvidence, ShardResidual, SurvivorEvidence, UpdateEvidence, Verification,
};

/// Relative tolerance recorded on instant-removal certificates.
pub const INSTANT_TOLERANCE: f64 = 1e-6;
/// Significance level for the test-power figure on DP certificates.
pub const ATTESTATION_ALPHA: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("request id `{0}` was already executed")]
    DuplicateRequest(String),
    #[error("sample `{0}` is not in the manifest")]
    UnknownSample(String),
    #[error("source `{0}` owns no samples")]
    UnknownSource(String),
    #[error("shard {0} is not in the plan")]
    UnknownShard(usize),
    #[error("request scope resolves to no samples")]
    EmptyScope,
    #[error("mode {mode} cannot serve shard {shard_id} ({kind} model)")]
    IncompatibleMode {
        mode: RemovalMethod,
        kind: ModelKind,
        shard_id: usize,
    },
    #[error(
        "scope is not shard-aligned: shard {shard_id} keeps {kept} other sample(s); \
         use exact-retrain, or re-plan with the source-grouped strategy"
    )]
    NotShardAligned { shard_id: usize, kept: usize },
    #[error("shard {0} has no privacy account; dp-attestation needs a DP-trained model")]
    NoPrivacyAccount(usize),
    #[error("request would remove every shard of the ensemble")]
    EmptiesEnsemble,
    #[error("inconsistent state: {0}")]
    InconsistentState(String),
    #[error("replay diverged at entry {seq}: expected state {expected}, got {found}")]
    ReplayDivergence { seq: u64, expected: Digest, found: Digest },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Samples(BTreeSet<String>),
    Source(String),
    Shard(usize),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Samples(ids) => {
                let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
                write!(f, "sample:{}", ids.join(","))
            }
            Scope::Source(s) => write!(f, "source:{s}"),
            Scope::Shard(j) => write!(f, "shard:{j}"),
        }
    }
}

impl FromStr for Scope {
    type Err = String;

    /// `sample:ID[,ID…]`, `source:SOURCE` or `shard:N`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (tag, rest) = s
            .split_once(':')
            .ok_or_else(|| format!("scope `{s}` must look like sample:ID[,ID], source:NAME or shard:N"))?;
        match tag {
            "sample" | "samples" => {
                let ids: BTreeSet<String> = rest
                    .split(',')
                    .map(str::trim)
                    .filter(|x| !x.is_empty())
                    .map(String::from)
                    .collect();
                if ids.is_empty() {
                    return Err("sample scope lists no ids".into());
                }
                Ok(Scope::Samples(ids))
            }
            "source" if !rest.is_empty() => Ok(Scope::Source(rest.to_string())),
            "shard" => rest
                .parse()
                .map(Scope::Shard)
                .map_err(|_| format!("shard scope needs an integer, got `{rest}`")),
            _ => Err(format!("unknown scope `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisgorgementRequest {
    pub request_id: String,
    pub scope: Scope,
    pub mode: RemovalMethod,
    /// Caller-supplied logical time; never read from the clock.
    pub timestamp: u64,
}

impl DisgorgementRequest {
    pub fn new(request_id: impl Into<String>, scope: Scope, mode: RemovalMethod, timestamp: u64) -> Self {
        DisgorgementRequest {
            request_id: request_id.into(),
            scope,
            mode,
            timestamp,
        }
    }

    pub fn samples<I, S>(request_id: &str, ids: I, mode: RemovalMethod) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(request_id, Scope::Samples(ids.into_iter().map(Into::into).collect()), mode, 0)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }
}

/// A shard whose incremental removal was abandoned for a full retrain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Escalation {
    pub shard_id: usize,
    pub from: RemovalMethod,
    pub reason: String,
}

/// Manifest, plan and ensemble, kept mutually consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub manifest: DataManifest,
    pub plan: ShardPlan,
    pub ensemble: EnsembleModel,
}

impl SystemState {
    pub fn new(manifest: DataManifest, plan: ShardPlan, ensemble: EnsembleModel) -> Result<Self> {
        let s = SystemState {
            manifest,
            plan,
            ensemble,
        };
        s.check_consistency()?;
        Ok(s)
    }

    /// Plans nothing; trains one member per shard of `plan`.
    pub fn build(
        manifest: DataManifest,
        plan: ShardPlan,
        spec: &TrainSpec,
        base_seed: u64,
        aggregation: Aggregation,
    ) -> Result<Self> {
        let ensemble = build_ensemble(&manifest, &plan, spec, base_seed, aggregation)?;
        Self::new(manifest, plan, ensemble)
    }

    pub fn check_consistency(&self) -> Result<()> {
        let bad = |m: String| Err(EngineError::InconsistentState(m));
        let hash = self.manifest.manifest_hash();
        if self.plan.manifest_hash != hash {
            return bad("plan was built for a different manifest".into());
        }
        if self.plan.shard_ids() != self.ensemble.shard_ids() {
            return bad(format!(
                "plan shards {:?} but ensemble members {:?}",
                self.plan.shard_ids(),
                self.ensemble.shard_ids()
            ));
        }
        for (j, member) in self.ensemble.members() {
            let lineage = member.model.lineage();
            if lineage.manifest_hash != hash {
                return bad(format!("member {j} is bound to another manifest"));
            }
            let shard = self.plan.shard(j).expect("ids compared above");
            if lineage.sample_ids != shard.sample_ids {
                return bad(format!("member {j} lineage differs from its shard"));
            }
        }
        Ok(())
    }

    /// 256-bit digest over manifest, plan and every member's lineage and parameters.
    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new();
        h.update(b"state\x1f");
        h.update(self.manifest.manifest_hash().0);
        h.update(self.plan.digest().0);
        h.update(self.ensemble.aggregation().to_string());
        for (j, m) in self.ensemble.members() {
            h.update((j as u64).to_le_bytes());
            h.update(m.model.lineage().digest().0);
            h.update(m.model.param_digest().0);
            for v in &m.centroid {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn resolve(&self, scope: &Scope) -> Result<BTreeSet<String>> {
        let ids = match scope {
            Scope::Samples(ids) => {
                if let Some(missing) = ids.iter().find(|id| !self.manifest.contains(id)) {
                    return Err(EngineError::UnknownSample(missing.clone()));
                }
                ids.clone()
            }
            Scope::Source(s) => {
                let ids = self.manifest.query_by_source(s);
                if ids.is_empty() {
                    return Err(EngineError::UnknownSource(s.clone()));
                }
                ids
            }
            Scope::Shard(j) => self
                .plan
                .shard(*j)
                .ok_or(EngineError::UnknownShard(*j))?
                .sample_ids
                .iter()
                .cloned()
                .collect(),
        };
        if ids.is_empty() {
            return Err(EngineError::EmptyScope);
        }
        Ok(ids)
    }

    /// Shards whose member lineage still references any of `ids`.
    pub fn lineage_violations(&self, ids: &BTreeSet<String>) -> Vec<usize> {
        self.ensemble
            .members()
            .filter(|(_, m)| m.model.lineage().intersects(ids))
            .map(|(j, _)| j)
            .collect()
    }

    pub(crate) fn shard_data(&self, shard_id: usize) -> Result<ShardData> {
        let shard = self.plan.shard(shard_id).ok_or(EngineError::UnknownShard(shard_id))?;
        Ok(ShardData::from_manifest(&self.manifest, &shard.sample_ids, Some(shard_id))?)
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub state: SystemState,
    pub certificate: Certificate,
    pub escalations: Vec<Escalation>,
}

#[derive(Default)]
struct Work {
    cost: u64,
    retrained: Vec<RetrainEvidence>,
    updated: Vec<UpdateEvidence>,
    residuals: Vec<ShardResidual>,
    escalations: Vec<Escalation>,
}

pub(crate) fn samples_digest(ids: &[String]) -> Digest {
    digest_json(&ids)
}

fn check_mode(state: &SystemState, ids: &BTreeSet<String>, affected: &[usize], mode: RemovalMethod) -> Result<()> {
    for &j in affected {
        let model = &state.ensemble.member(j).expect("plan and ensemble agree").model;
        let kind = model.kind();
        let incompatible = EngineError::IncompatibleMode { mode, kind, shard_id: j };
        match mode {
            RemovalMethod::ExactRetrain => {}
            RemovalMethod::Instant if kind == ModelKind::Logistic => return Err(incompatible),
            RemovalMethod::Influence if kind != ModelKind::Logistic => return Err(incompatible),
            RemovalMethod::DpAttestation if model.lineage().privacy.is_none() => {
                return Err(EngineError::NoPrivacyAccount(j))
            }
            RemovalMethod::ShardDrop => {
                let shard = state.plan.shard(j).expect("affected shard exists");
                let kept = shard.sample_ids.iter().filter(|s| !ids.contains(*s)).count();
                if kept > 0 {
                    return Err(EngineError::NotShardAligned { shard_id: j, kept });
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn retrain(ensemble: &mut EnsembleModel, next: &SystemState, shard_id: usize, work: &mut Work) -> Result<()> {
    let old = &ensemble.member(shard_id).ok_or(EngineError::UnknownShard(shard_id))?.model;
    let spec = old.train_spec();
    let seed = old.lineage().seed;
    let data = next.shard_data(shard_id)?;
    let model = spec.train(&data, seed)?;
    work.cost += model.lineage().gradient_evals;
    work.retrained.push(RetrainEvidence {
        shard_id,
        seed,
        samples_digest: samples_digest(&data.sample_ids),
        param_digest: model.param_digest(),
    });
    ensemble.replace_member(shard_id, model, data.centroid())?;
    Ok(())
}

fn escalate(
    ensemble: &mut EnsembleModel,
    next: &SystemState,
    shard_id: usize,
    from: RemovalMethod,
    err: &ModelError,
    work: &mut Work,
) -> Result<()> {
    work.escalations.push(Escalation {
        shard_id,
        from,
        reason: err.to_string(),
    });
    retrain(ensemble, next, shard_id, work)
}

/// Executes `request` against `state` and returns the successor state.
/// `state` is never modified.
pub fn execute(state: &SystemState, request: &DisgorgementRequest) -> Result<Outcome> {
    let mode = request.mode;
    let ids = state.resolve(&request.scope)?;
    let affected = state.plan.affected_shards(&ids);
    check_mode(state, &ids, &affected, mode)?;

    let manifest = state.manifest.remove_samples(&ids)?;
    let (plan, emptied) = state.plan.without(&ids, manifest.manifest_hash());
    if emptied.len() == state.ensemble.len() {
        return Err(EngineError::EmptiesEnsemble);
    }
    let mut ensemble = state.ensemble.clone();
    for &j in &emptied {
        ensemble = ensemble.drop_member(j)?;
    }
    ensemble.set_manifest_hash(manifest.manifest_hash());
    // `next` carries the post-removal manifest and plan; its ensemble is
    // rebuilt below and only used for shard lookups in the meantime.
    let next = SystemState {
        manifest,
        plan,
        ensemble: ensemble.clone(),
    };
    let live: Vec<usize> = affected.iter().copied().filter(|j| !emptied.contains(j)).collect();
    let mut work = Work::default();
    let mut dp_account: Option<PrivacyAccount> = None;

    for &j in &live {
        let removing: Vec<&String> = state
            .plan
            .shard(j)
            .expect("affected shard exists")
            .sample_ids
            .iter()
            .filter(|s| ids.contains(*s))
            .collect();
        let mut model = ensemble.member(j).expect("live member").model.clone();
        let before = model.lineage().gradient_evals;
        match mode {
            RemovalMethod::ExactRetrain => {
                retrain(&mut ensemble, &next, j, &mut work)?;
                continue;
            }
            RemovalMethod::ShardDrop => unreachable!("aligned shards are emptied"),
            RemovalMethod::Instant => {
                let mut failed = None;
                for id in removing {
                    let rec = state.manifest.get(id).expect("resolved id");
                    let step = match &model {
                        SubModel::Ncm(m) => ncm_remove_sample(m, rec).map(SubModel::from),
                        SubModel::Ridge(m) => ridge_remove_sample(m, rec).map(SubModel::from),
                        SubModel::Logistic(_) => unreachable!("checked by check_mode"),
                    };
                    match step {
                        Ok(m) => model = m,
                        Err(e) if e.requires_retrain() => {
                            failed = Some(e);
                            break;
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                if let Some(e) = failed {
                    escalate(&mut ensemble, &next, j, mode, &e, &mut work)?;
                    continue;
                }
                work.updated.push(UpdateEvidence {
                    shard_id: j,
                    param_digest: model.param_digest(),
                    tolerance: INSTANT_TOLERANCE,
                });
            }
            RemovalMethod::Influence => {
                let SubModel::Logistic(mut m) = model.clone() else {
                    unreachable!("checked by check_mode")
                };
                let mut data = state.shard_data(j)?;
                let mut residual = 0.0;
                let mut failed = None;
                for id in removing {
                    let rec = data.record(data.position(id).expect("id in shard"));
                    match influence_remove(&m, &rec, &data) {
                        Ok((next_m, r)) => {
                            m = next_m;
                            residual = r;
                            data = data.without(id)?;
                        }
                        Err(e) if e.requires_retrain() => {
                            failed = Some(e);
                            break;
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                if let Some(e) = failed {
                    escalate(&mut ensemble, &next, j, mode, &e, &mut work)?;
                    continue;
                }
                work.residuals.push(ShardResidual { shard_id: j, residual });
                model = SubModel::Logistic(m);
            }
            RemovalMethod::DpAttestation => {
                for id in removing {
                    model.lineage_mut().record_removal(id, RemovalMethod::DpAttestation)?;
                }
                let acct = model.lineage().privacy.expect("checked by check_mode");
                if dp_account.is_none_or(|a| acct.epsilon > a.epsilon) {
                    dp_account = Some(acct);
                }
            }
        }
        work.cost += model.lineage().gradient_evals - before;
        let centroid = next.shard_data(j)?.centroid();
        ensemble.replace_member(j, model, centroid)?;
    }

    let state_out = SystemState {
        ensemble,
        ..next
    };
    state_out.check_consistency()?;
    let violations = state_out.lineage_violations(&ids);
    if !violations.is_empty() {
        return Err(EngineError::InconsistentState(format!(
            "lineage of shards {violations:?} still references disgorged samples"
        )));
    }

    let kind = match mode {
        RemovalMethod::Influence | RemovalMethod::DpAttestation => CertificateKind::Probabilistic,
        _ => CertificateKind::Deterministic,
    };
    let influence = (mode == RemovalMethod::Influence).then(|| InfluenceEvidence {
        residual_bound: work.residuals.iter().map(|r| r.residual).fold(0.0, f64::max),
        residuals: work.residuals.clone(),
    });
    let dp = match dp_account {
        Some(acct) => Some(dp_evidence(&acct, ids.len())),
        None if mode == RemovalMethod::DpAttestation => {
            // every affected shard was emptied and dropped
            let acct = affected
                .iter()
                .filter_map(|&j| state.ensemble.member(j)?.model.lineage().privacy)
                .max_by(|a, b| a.epsilon.total_cmp(&b.epsilon))
                .expect("checked by check_mode");
            Some(dp_evidence(&acct, ids.len()))
        }
        None => None,
    };
    let evidence = Evidence {
        survivors: state_out
            .ensemble
            .members()
            .map(|(j, m)| SurvivorEvidence {
                shard_id: j,
                lineage_digest: m.model.lineage().digest(),
            })
            .collect(),
        retrained: work.retrained,
        updated: work.updated,
        dropped: emptied,
        influence,
        dp,
    };
    let certificate = Certificate {
        request_id: request.request_id.clone(),
        kind,
        mode,
        disgorged: ids.into_iter().collect(),
        evidence,
        cost: work.cost,
        state_digest: state_out.digest(),
    };
    Ok(Outcome {
        state: state_out,
        certificate,
        escalations: work.escalations,
    })
}

fn dp_evidence(acct: &PrivacyAccount, group_size: usize) -> DpEvidence {
    let group = group_epsilon(acct.epsilon, acct.delta, group_size);
    DpEvidence {
        epsilon: acct.epsilon,
        delta: acct.delta,
        group_size,
        group,
        vacuous: group.is_vacuous(),
        alpha: ATTESTATION_ALPHA,
        test_power: group
            .test_power_bound(ATTESTATION_ALPHA)
            .expect("alpha is a valid constant"),
        config: acct.config,
    }
}

/// A committed state plus its audit trail. Requests run one at a time.
#[derive(Debug, Clone)]
pub struct Engine {
    state: SystemState,
    log: AuditLog,
}

impl Engine {
    pub fn new(state: SystemState) -> Self {
        let log = AuditLog::genesis(state.digest());
        Engine { state, log }
    }

    /// Reattaches a log to the state it describes.
    pub fn resume(state: SystemState, log: AuditLog) -> Result<Self> {
        log.validate()?;
        let head = log.head().record.state_digest;
        let found = state.digest();
        if head != found {
            return Err(EngineError::ReplayDivergence {
                seq: log.head().record.seq,
                expected: head,
                found,
            });
        }
        Ok(Engine { state, log })
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn log(&self) -> &AuditLog {
        &self.log
    }

    pub fn into_parts(self) -> (SystemState, AuditLog) {
        (self.state, self.log)
    }

    pub fn submit(&mut self, request: &DisgorgementRequest) -> Result<Certificate> {
        if self.log.find_request(&request.request_id).is_some() {
            return Err(EngineError::DuplicateRequest(request.request_id.clone()));
        }
        let outcome = execute(&self.state, request)?;
        self.log.append(
            request.clone(),
            outcome.certificate.digest(),
            outcome.certificate.cost,
            outcome.escalations,
            outcome.certificate.state_digest,
        );
        self.state = outcome.state;
        Ok(outcome.certificate)
    }

    pub fn verify(&self, cert: &Certificate) -> Verification {
        verify_certificate(cert, &self.state)
    }
}

/// Re-executes every request of `log` from `baseline`, checking each state
/// and certificate digest against the recorded one. Returns the state
/// digests in order (genesis first) and the final state.
pub fn replay(baseline: &SystemState, log: &AuditLog) -> Result<(Vec<Digest>, SystemState)> {
    log.validate()?;
    let genesis = &log.entries()[0];
    let found = baseline.digest();
    if genesis.record.state_digest != found {
        return Err(EngineError::ReplayDivergence {
            seq: 0,
            expected: genesis.record.state_digest,
            found,
        });
    }
    let mut digests = vec![found];
    let mut state = baseline.clone();
    for entry in &log.entries()[1..] {
        let request = entry
            .record
            .request
            .as_ref()
            .ok_or_else(|| EngineError::InconsistentState(format!("entry {} has no request", entry.record.seq)))?;
        let outcome = execute(&state, request)?;
        let found = outcome.state.digest();
        if found != entry.record.state_digest || Some(outcome.certificate.digest()) != entry.record.certificate {
            return Err(EngineError::ReplayDivergence {
                seq: entry.record.seq,
                expected: entry.record.state_digest,
                found,
            });
        }
        digests.push(found);
        state = outcome.state;
    }
    Ok((digests, state))
}


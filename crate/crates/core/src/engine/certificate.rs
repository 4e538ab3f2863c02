use std::fmt;

use serde::{Deserialize, Serialize};

use super::{samples_digest, SystemState};
use crate::digest::{digest_json, Digest};
use crate::dp::{account_epsilon, group_epsilon, DpConfig, GroupGuarantee};
use crate::math::relative_max_diff;
use crate::submodel::{RemovalMethod, SubModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    /// Structural: verified by recomputing lineages and retrains.
    Deterministic,
    /// Quantified: verified by recomputing the stated bound.
    Probabilistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivorEvidence {
    pub shard_id: usize,
    pub lineage_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainEvidence {
    pub shard_id: usize,
    pub seed: u64,
    /// Digest of the ordered sample ids the member was retrained on.
    pub samples_digest: Digest,
    pub param_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvidence {
    pub shard_id: usize,
    pub param_digest: Digest,
    /// Maximum relative deviation from a from-scratch retrain.
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardResidual {
    pub shard_id: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEvidence {
    /// Max residual gradient norm over the updated shards.
    pub residual_bound: f64,
    pub residuals: Vec<ShardResidual>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpEvidence {
    pub epsilon: f64,
    pub delta: f64,
    pub group_size: usize,
    pub group: GroupGuarantee,
    pub vacuous: bool,
    pub alpha: f64,
    pub test_power: f64,
    pub config: DpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    /// Every member left after the request, with its lineage digest.
    pub survivors: Vec<SurvivorEvidence>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retrained: Vec<RetrainEvidence>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub updated: Vec<UpdateEvidence>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub influence: Option<InfluenceEvidence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpEvidence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub request_id: String,
    pub kind: CertificateKind,
    pub mode: RemovalMethod,
    /// Sorted.
    pub disgorged: Vec<String>,
    pub evidence: Evidence,
    /// Gradient-evals consumed.
    pub cost: u64,
    /// Digest of the state this certificate was issued for.
    pub state_digest: Digest,
}

impl Certificate {
    pub fn digest(&self) -> Digest {
        digest_json(self)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("certificate serializes")
    }

    pub fn is_vacuous(&self) -> bool {
        self.evidence.dp.as_ref().is_some_and(|d| d.vacuous)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReasonCode {
    LineageViolation,
    InvalidEvidence,
    EvidenceMismatch,
    RetrainMismatch,
    ToleranceExceeded,
    StateMismatch,
}

impl fmt::Display for ReasonCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReasonCode::LineageViolation => "LINEAGE_VIOLATION",
            ReasonCode::InvalidEvidence => "INVALID_EVIDENCE",
            ReasonCode::EvidenceMismatch => "EVIDENCE_MISMATCH",
            ReasonCode::RetrainMismatch => "RETRAIN_MISMATCH",
            ReasonCode::ToleranceExceeded => "TOLERANCE_EXCEEDED",
            ReasonCode::StateMismatch => "STATE_MISMATCH",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verification {
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<ReasonCode>,
    pub detail: String,
}

impl Verification {
    fn pass() -> Self {
        Verification {
            ok: true,
            reason: None,
            detail: "verified".into(),
        }
    }

    fn fail(reason: ReasonCode, detail: impl Into<String>) -> Self {
        Verification {
            ok: false,
            reason: Some(reason),
            detail: detail.into(),
        }
    }
}

type Check = std::result::Result<(), Verification>;

fn close(recorded: f64, recomputed: f64) -> bool {
    (recorded - recomputed).abs() <= 1e-9 * recomputed.abs().max(1.0)
}

/// Checks `cert` against `state`, the state it was issued for.
///
/// Order: lineage safety, evidence sanity, recomputation of the evidence,
/// then the survivor list and state digest.
pub fn verify_certificate(cert: &Certificate, state: &SystemState) -> Verification {
    let checks: [&dyn Fn() -> Check; 7] = [
        &|| check_lineage(cert, state),
        &|| check_sanity(cert),
        &|| check_dp(cert, state),
        &|| check_influence(cert, state),
        &|| check_retrained(cert, state),
        &|| check_updated(cert, state),
        &|| check_survivors(cert, state),
    ];
    for check in checks {
        if let Err(v) = check() {
            return v;
        }
    }
    Verification::pass()
}

fn check_lineage(cert: &Certificate, state: &SystemState) -> Check {
    let ids = cert.disgorged.iter().cloned().collect();
    let violations = state.lineage_violations(&ids);
    if let Some(j) = violations.first() {
        return Err(Verification::fail(
            ReasonCode::LineageViolation,
            format!("shard {j} lineage references a disgorged sample"),
        ));
    }
    if let Some(id) = cert.disgorged.iter().find(|id| state.manifest.contains(id)) {
        return Err(Verification::fail(
            ReasonCode::LineageViolation,
            format!("disgorged sample `{id}` is still in the manifest"),
        ));
    }
    for &j in &cert.evidence.dropped {
        if state.ensemble.member(j).is_some() {
            return Err(Verification::fail(
                ReasonCode::LineageViolation,
                format!("dropped shard {j} is still a member"),
            ));
        }
    }
    Ok(())
}

fn check_sanity(cert: &Certificate) -> Check {
    let invalid = |what: &str| Err(Verification::fail(ReasonCode::InvalidEvidence, what.to_string()));
    let ok = |v: f64| v.is_finite() && v >= 0.0;
    match cert.kind {
        CertificateKind::Probabilistic => {
            if cert.evidence.influence.is_none() && cert.evidence.dp.is_none() {
                return invalid("probabilistic certificate carries no bound");
            }
        }
        CertificateKind::Deterministic => {
            if cert.evidence.influence.is_some() || cert.evidence.dp.is_some() {
                return invalid("deterministic certificate carries a probabilistic bound");
            }
        }
    }
    if let Some(inf) = &cert.evidence.influence {
        if !ok(inf.residual_bound) || !inf.residuals.iter().all(|r| ok(r.residual)) {
            return invalid("residual bound must be finite and non-negative");
        }
    }
    if let Some(dp) = &cert.evidence.dp {
        if ![dp.epsilon, dp.delta, dp.alpha, dp.test_power].into_iter().all(ok) {
            return invalid("privacy evidence must be finite and non-negative");
        }
    }
    if !cert.evidence.updated.iter().all(|u| ok(u.tolerance)) {
        return invalid("tolerance must be finite and non-negative");
    }
    Ok(())
}

fn check_dp(cert: &Certificate, state: &SystemState) -> Check {
    let Some(dp) = &cert.evidence.dp else {
        return Ok(());
    };
    let mismatch = |what: &str| Err(Verification::fail(ReasonCode::EvidenceMismatch, what.to_string()));
    let Ok(acct) = account_epsilon(&dp.config) else {
        return mismatch("recorded DP config is invalid");
    };
    if !close(dp.epsilon, acct.epsilon) || !close(dp.delta, acct.delta) {
        return mismatch("recorded (epsilon, delta) do not follow from the DP config");
    }
    if dp.group_size != cert.disgorged.len() {
        return mismatch("group size differs from the disgorged cohort");
    }
    let group = group_epsilon(acct.epsilon, acct.delta, dp.group_size);
    let same_group = match (group, dp.group) {
        (GroupGuarantee::Vacuous, GroupGuarantee::Vacuous) => true,
        (
            GroupGuarantee::Bounded { epsilon: a, delta: b },
            GroupGuarantee::Bounded { epsilon: c, delta: d },
        ) => close(c, a) && close(d, b),
        _ => false,
    };
    if !same_group || dp.vacuous != group.is_vacuous() {
        return mismatch("group guarantee does not recompute");
    }
    match group.test_power_bound(dp.alpha) {
        Ok(p) if close(dp.test_power, p) => {}
        _ => return mismatch("test-power bound does not recompute"),
    }
    let backed = state
        .ensemble
        .members()
        .any(|(_, m)| m.model.lineage().privacy.is_some_and(|a| a.config == dp.config))
        || !cert.evidence.dropped.is_empty();
    if !backed {
        return mismatch("no surviving member was trained under the recorded DP config");
    }
    Ok(())
}

fn check_influence(cert: &Certificate, state: &SystemState) -> Check {
    let Some(inf) = &cert.evidence.influence else {
        return Ok(());
    };
    let mismatch = |what: String| Err(Verification::fail(ReasonCode::EvidenceMismatch, what));
    let max = inf.residuals.iter().map(|r| r.residual).fold(0.0, f64::max);
    if !close(inf.residual_bound, max) {
        return mismatch("residual bound is not the max shard residual".into());
    }
    for r in &inf.residuals {
        let (Some(member), Ok(data)) = (state.ensemble.member(r.shard_id), state.shard_data(r.shard_id)) else {
            return mismatch(format!("shard {} is missing", r.shard_id));
        };
        let SubModel::Logistic(m) = &member.model else {
            return mismatch(format!("shard {} is not a logistic model", r.shard_id));
        };
        let recomputed = m.gradient_norm(&data);
        if !close(r.residual, recomputed) {
            return mismatch(format!(
                "shard {} residual {} recomputes to {recomputed}",
                r.shard_id, r.residual
            ));
        }
    }
    Ok(())
}

fn check_retrained(cert: &Certificate, state: &SystemState) -> Check {
    for r in &cert.evidence.retrained {
        let fail = |what: String| Err(Verification::fail(ReasonCode::RetrainMismatch, what));
        let (Some(member), Ok(data)) = (state.ensemble.member(r.shard_id), state.shard_data(r.shard_id)) else {
            return fail(format!("retrained shard {} is missing", r.shard_id));
        };
        if samples_digest(&data.sample_ids) != r.samples_digest {
            return fail(format!("shard {} sample set differs from the retrain record", r.shard_id));
        }
        if member.model.param_digest() != r.param_digest {
            return fail(format!("shard {} parameters differ from the retrain record", r.shard_id));
        }
        let fresh = match member.model.train_spec().train(&data, r.seed) {
            Ok(m) => m,
            Err(e) => return fail(format!("shard {} retrain failed: {e}", r.shard_id)),
        };
        if fresh.param_digest() != r.param_digest {
            return fail(format!("shard {} retrain with seed {} does not reproduce", r.shard_id, r.seed));
        }
    }
    Ok(())
}

fn check_updated(cert: &Certificate, state: &SystemState) -> Check {
    for u in &cert.evidence.updated {
        let (Some(member), Ok(data)) = (state.ensemble.member(u.shard_id), state.shard_data(u.shard_id)) else {
            return Err(Verification::fail(
                ReasonCode::EvidenceMismatch,
                format!("updated shard {} is missing", u.shard_id),
            ));
        };
        if member.model.param_digest() != u.param_digest {
            return Err(Verification::fail(
                ReasonCode::EvidenceMismatch,
                format!("shard {} parameters differ from the update record", u.shard_id),
            ));
        }
        let fresh = member
            .model
            .train_spec()
            .train(&data, member.model.lineage().seed)
            .map_err(|e| Verification::fail(ReasonCode::ToleranceExceeded, e.to_string()))?;
        let dev = relative_max_diff(&member.model.param_values(), &fresh.param_values());
        if !(dev <= u.tolerance) {
            return Err(Verification::fail(
                ReasonCode::ToleranceExceeded,
                format!("shard {} deviates {dev:e} from retrain (tolerance {:e})", u.shard_id, u.tolerance),
            ));
        }
    }
    Ok(())
}

fn check_survivors(cert: &Certificate, state: &SystemState) -> Check {
    let current: Vec<SurvivorEvidence> = state
        .ensemble
        .members()
        .map(|(j, m)| SurvivorEvidence {
            shard_id: j,
            lineage_digest: m.model.lineage().digest(),
        })
        .collect();
    if current != cert.evidence.survivors {
        return Err(Verification::fail(
            ReasonCode::StateMismatch,
            "surviving members or their lineages differ from the certificate",
        ));
    }
    if state.digest() != cert.state_digest {
        return Err(Verification::fail(
            ReasonCode::StateMismatch,
            "state digest differs from the certificate",
        ));
    }
    Ok(())
}

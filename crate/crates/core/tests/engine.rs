use std::collections::BTreeSet;

use disgorge::dp::{sigma_for_epsilon, DpConfig, DpHyper};
use disgorge::engine::{
    execute, replay, verify_certificate, CertificateKind, DisgorgementRequest, Engine, EngineError, ReasonCode,
    Scope, SystemState,
};
use disgorge::ensemble::Aggregation;
use disgorge::manifest::{DataManifest, SampleRecord};
use disgorge::sharding::{plan_shards, Strategy};
use disgorge::submodel::{LogisticHyper, RemovalMethod, SubModel, TrainSpec};
use disgorge::synth::{gaussian_blobs, BlobSpec};

fn blobs(n: usize, seed: u64) -> DataManifest {
    gaussian_blobs(&BlobSpec {
        num_samples: n,
        dim: 4,
        num_classes: 3,
        separation: 2.0,
        num_sources: 6,
        seed,
        ..BlobSpec::default()
    })
    .unwrap()
}

fn logistic(epochs: usize) -> TrainSpec {
    TrainSpec::Logistic(LogisticHyper {
        learning_rate: 0.1,
        epochs,
        l2: 1e-2,
        batch_size: 8,
    })
}

fn state(m: DataManifest, strategy: Strategy, s: usize, spec: &TrainSpec) -> SystemState {
    let plan = plan_shards(&m, strategy, s, 7).unwrap();
    SystemState::build(m, plan, spec, 99, Aggregation::UniformAverage).unwrap()
}

fn req(id: &str, scope: Scope, mode: RemovalMethod) -> DisgorgementRequest {
    DisgorgementRequest::new(id, scope, mode, 0)
}

fn one(id: &str) -> Scope {
    Scope::Samples(BTreeSet::from([id.to_string()]))
}

/// Ensemble rebuilt from nothing on the post-removal manifest.
fn from_scratch(before: &SystemState, ids: &BTreeSet<String>, spec: &TrainSpec) -> SystemState {
    let m = before.manifest.remove_samples(ids).unwrap();
    let (plan, _) = before.plan.without(ids, m.manifest_hash());
    SystemState::build(m, plan, spec, 99, Aggregation::UniformAverage).unwrap()
}

fn assert_same_predictions(a: &SystemState, b: &SystemState, probe: &DataManifest) {
    for r in probe.records() {
        assert_eq!(
            a.ensemble.predict(&r.features).unwrap(),
            b.ensemble.predict(&r.features).unwrap()
        );
    }
}

#[test]
fn exact_retrain_cost_is_epochs_times_remaining() {
    let s0 = state(blobs(80, 1), Strategy::UniformRandom, 2, &logistic(5));
    let victim = s0.plan.shard(0).unwrap().sample_ids[3].clone();
    assert_eq!(s0.plan.shard(0).unwrap().len(), 40);
    let out = execute(&s0, &req("r1", one(&victim), RemovalMethod::ExactRetrain)).unwrap();
    assert_eq!(out.certificate.cost, 5 * 39);
    assert_eq!(out.certificate.kind, CertificateKind::Deterministic);
    assert!(verify_certificate(&out.certificate, &out.state).ok);
}

#[test]
fn exact_retrain_matches_from_scratch_build() {
    let spec = logistic(4);
    let s0 = state(blobs(90, 2), Strategy::UniformRandom, 3, &spec);
    let ids: BTreeSet<String> = ["s5", "s17", "s40", "s41"].map(String::from).into();
    let out = execute(&s0, &req("r", Scope::Samples(ids.clone()), RemovalMethod::ExactRetrain)).unwrap();
    let oracle = from_scratch(&s0, &ids, &spec);
    assert_eq!(out.state.digest(), oracle.digest());
    assert_same_predictions(&out.state, &oracle, &s0.manifest);
}

#[test]
fn shard_drop_is_free_and_verifiable() {
    let s0 = state(blobs(60, 3), Strategy::UniformRandom, 4, &TrainSpec::Ncm);
    let out = execute(&s0, &req("drop", Scope::Shard(2), RemovalMethod::ShardDrop)).unwrap();
    assert_eq!(out.certificate.cost, 0);
    assert_eq!(out.certificate.evidence.dropped, vec![2]);
    assert!(out.state.ensemble.member(2).is_none());
    let v = verify_certificate(&out.certificate, &out.state);
    assert!(v.ok, "{v:?}");

    let mut tampered = out.state.clone();
    let mut model = tampered.ensemble.member(0).unwrap().model.clone();
    model.lineage_mut().sample_ids.push(out.certificate.disgorged[0].clone());
    let centroid = tampered.ensemble.member(0).unwrap().centroid.clone();
    tampered.ensemble.replace_member(0, model, centroid).unwrap();
    let v = verify_certificate(&out.certificate, &tampered);
    assert!(!v.ok);
    assert_eq!(v.reason, Some(ReasonCode::LineageViolation));

    let oracle = from_scratch(&s0, &out.certificate.disgorged.iter().cloned().collect(), &TrainSpec::Ncm);
    assert_same_predictions(&out.state, &oracle, &s0.manifest);
}

#[test]
fn source_drop_needs_shard_alignment() {
    let m = blobs(60, 4);
    let uniform = state(m.clone(), Strategy::UniformRandom, 3, &TrainSpec::Ncm);
    let err = execute(&uniform, &req("x", Scope::Source("src1".into()), RemovalMethod::ShardDrop)).unwrap_err();
    assert!(matches!(err, EngineError::NotShardAligned { .. }), "{err}");
    assert!(err.to_string().contains("exact-retrain"));

    let grouped = state(m, Strategy::SourceGrouped, 6, &TrainSpec::Ncm);
    let out = execute(&grouped, &req("y", Scope::Source("src1".into()), RemovalMethod::ShardDrop)).unwrap();
    assert_eq!(out.certificate.cost, 0);
    assert!(verify_certificate(&out.certificate, &out.state).ok);
    assert!(out.state.manifest.query_by_source("src1").is_empty());
}

#[test]
fn instant_ncm_and_ridge() {
    let ncm = state(blobs(60, 5), Strategy::UniformRandom, 3, &TrainSpec::Ncm);
    let out = execute(&ncm, &req("n", one("s9"), RemovalMethod::Instant)).unwrap();
    assert_eq!(out.certificate.cost, 0);
    assert_eq!(out.certificate.evidence.updated[0].tolerance, 1e-6);
    assert!(verify_certificate(&out.certificate, &out.state).ok);

    let ridge = state(blobs(60, 5), Strategy::UniformRandom, 3, &TrainSpec::Ridge { lambda: 1.0 });
    let ids = Scope::Samples(["s1", "s2", "s3"].map(String::from).into());
    let out = execute(&ridge, &req("r", ids, RemovalMethod::Instant)).unwrap();
    assert_eq!(out.certificate.cost, 3);
    assert_eq!(out.certificate.kind, CertificateKind::Deterministic);
    assert!(verify_certificate(&out.certificate, &out.state).ok);
}

#[test]
fn modes_are_checked_against_model_kind() {
    let lg = state(blobs(40, 6), Strategy::UniformRandom, 2, &logistic(2));
    assert!(matches!(
        execute(&lg, &req("a", one("s0"), RemovalMethod::Instant)),
        Err(EngineError::IncompatibleMode { .. })
    ));
    assert!(matches!(
        execute(&lg, &req("b", one("s0"), RemovalMethod::DpAttestation)),
        Err(EngineError::NoPrivacyAccount(_))
    ));
    let ncm = state(blobs(40, 6), Strategy::UniformRandom, 2, &TrainSpec::Ncm);
    assert!(matches!(
        execute(&ncm, &req("c", one("s0"), RemovalMethod::Influence)),
        Err(EngineError::IncompatibleMode { .. })
    ));
    assert!(matches!(
        execute(&ncm, &req("d", one("nope"), RemovalMethod::ExactRetrain)),
        Err(EngineError::UnknownSample(_))
    ));
    assert!(matches!(
        execute(&ncm, &req("e", Scope::Source("nobody".into()), RemovalMethod::ExactRetrain)),
        Err(EngineError::UnknownSource(_))
    ));
    assert!(matches!(
        execute(&ncm, &req("f", Scope::Shard(9), RemovalMethod::ShardDrop)),
        Err(EngineError::UnknownShard(9))
    ));
}

#[test]
fn influence_certificate_recomputes() {
    let spec = TrainSpec::Logistic(LogisticHyper {
        learning_rate: 0.5,
        epochs: 300,
        l2: 1e-2,
        batch_size: 64,
    });
    let s0 = state(blobs(60, 7), Strategy::UniformRandom, 2, &spec);
    let out = execute(&s0, &req("i", one("s4"), RemovalMethod::Influence)).unwrap();
    assert_eq!(out.certificate.kind, CertificateKind::Probabilistic);
    let shard_size = s0.plan.shard(s0.plan.shard_of("s4").unwrap()).unwrap().len() as u64;
    assert_eq!(out.certificate.cost, 2 * shard_size);
    assert!(verify_certificate(&out.certificate, &out.state).ok);

    let mut forged = out.certificate.clone();
    forged.evidence.influence.as_mut().unwrap().residual_bound *= 0.5;
    forged.evidence.influence.as_mut().unwrap().residuals[0].residual *= 0.5;
    let v = verify_certificate(&forged, &out.state);
    assert_eq!(v.reason, Some(ReasonCode::EvidenceMismatch));

    let mut negative = out.certificate.clone();
    negative.evidence.influence.as_mut().unwrap().residual_bound = -1.0;
    assert_eq!(verify_certificate(&negative, &out.state).reason, Some(ReasonCode::InvalidEvidence));
}

#[test]
fn dp_attestation_for_large_group_is_vacuous() {
    let m = blobs(60, 8);
    let config = DpConfig {
        clip_norm: 1.0,
        noise_multiplier: sigma_for_epsilon(1.0, 1e-6, 10),
        steps: 10,
        full_batch: true,
        delta: 1e-6,
        seed: 4,
    };
    let spec = TrainSpec::DpLogistic {
        hyper: DpHyper::default(),
        config,
    };
    let s0 = state(m, Strategy::UniformRandom, 1, &spec);
    let ids: BTreeSet<String> = (0..20).map(|i| format!("s{i}")).collect();
    let out = execute(&s0, &req("dp", Scope::Samples(ids), RemovalMethod::DpAttestation)).unwrap();
    let dp = out.certificate.evidence.dp.clone().unwrap();
    assert!((dp.epsilon - 1.0).abs() < 1e-9);
    assert_eq!(dp.group_size, 20);
    assert!(dp.vacuous && out.certificate.is_vacuous());
    assert_eq!(dp.test_power, 1.0);
    assert_eq!(out.certificate.cost, 0);
    // parameters untouched
    assert_eq!(
        out.state.ensemble.member(0).unwrap().model.param_digest(),
        s0.ensemble.member(0).unwrap().model.param_digest()
    );
    assert!(verify_certificate(&out.certificate, &out.state).ok);

    let mut forged = out.certificate.clone();
    forged.evidence.dp.as_mut().unwrap().epsilon = 0.5;
    assert_eq!(verify_certificate(&forged, &out.state).reason, Some(ReasonCode::EvidenceMismatch));

    let small = execute(&s0, &req("dp1", one("s30"), RemovalMethod::DpAttestation)).unwrap();
    assert!(!small.certificate.is_vacuous());
}

#[test]
fn degenerate_downdate_escalates_to_retrain() {
    // shard of one member: the only sample with a non-zero second feature
    // spans a direction held only by the tiny ridge prior
    let mut records: Vec<SampleRecord> = (0..10)
        .map(|i| SampleRecord::new(format!("a{i}"), "x", vec![1.0 + i as f64, 0.0], i % 2))
        .collect();
    records.push(SampleRecord::new("lone", "x", vec![0.0, 1.0], 1));
    let m = DataManifest::new(records, 2, 2).unwrap();
    let spec = TrainSpec::Ridge { lambda: 1e-15 };
    let s0 = state(m, Strategy::UniformRandom, 1, &spec);
    let out = execute(&s0, &req("z", one("lone"), RemovalMethod::Instant)).unwrap();
    assert_eq!(out.escalations.len(), 1);
    assert_eq!(out.escalations[0].from, RemovalMethod::Instant);
    assert_eq!(out.certificate.evidence.retrained.len(), 1);
    assert!(verify_certificate(&out.certificate, &out.state).ok);
    let oracle = from_scratch(&s0, &BTreeSet::from(["lone".to_string()]), &spec);
    assert_same_predictions(&out.state, &oracle, &s0.manifest);
}

#[test]
fn engine_log_replays_and_rejects_duplicates() {
    let s0 = state(blobs(72, 9), Strategy::SourceGrouped, 4, &TrainSpec::Ridge { lambda: 0.5 });
    let mut engine = Engine::new(s0.clone());
    let requests = [
        req("a", one("s3"), RemovalMethod::Instant),
        req("b", one("s10"), RemovalMethod::ExactRetrain),
        req("c", Scope::Source("src2".into()), RemovalMethod::ExactRetrain),
    ];
    let mut certs = Vec::new();
    for r in &requests {
        certs.push(engine.submit(r).unwrap());
    }
    assert!(engine.verify(certs.last().unwrap()).ok);
    assert!(matches!(engine.submit(&requests[0]), Err(EngineError::DuplicateRequest(_))));
    assert_eq!(engine.log().entries().len(), 4);

    let (digests, last) = replay(&s0, engine.log()).unwrap();
    assert_eq!(digests, engine.log().state_digests());
    assert_eq!(last.digest(), engine.state().digest());

    let other = state(blobs(72, 10), Strategy::SourceGrouped, 4, &TrainSpec::Ridge { lambda: 0.5 });
    assert!(matches!(
        replay(&other, engine.log()),
        Err(EngineError::ReplayDivergence { seq: 0, .. })
    ));
}

#[test]
fn no_surviving_lineage_references_disgorged_ids() {
    let spec = logistic(2);
    let mut engine = Engine::new(state(blobs(96, 11), Strategy::UniformRandom, 6, &spec));
    let mut gone = BTreeSet::new();
    for step in 0..8 {
        let ids: Vec<String> = engine.state().manifest.ids().skip(step * 5).step_by(7).take(2).map(String::from).collect();
        let mode = if step % 2 == 0 {
            RemovalMethod::ExactRetrain
        } else {
            RemovalMethod::Influence
        };
        engine
            .submit(&req(&format!("q{step}"), Scope::Samples(ids.iter().cloned().collect()), mode))
            .unwrap();
        gone.extend(ids);
        assert!(engine.state().lineage_violations(&gone).is_empty());
        engine.state().check_consistency().unwrap();
    }
}

#[test]
fn scope_strings_round_trip() {
    for s in ["sample:s1,s2", "source:artistA", "shard:3"] {
        assert_eq!(s.parse::<Scope>().unwrap().to_string(), s);
    }
    assert!("sample:".parse::<Scope>().is_err());
    assert!("shard:x".parse::<Scope>().is_err());
    assert!("everything".parse::<Scope>().is_err());
}

#[test]
fn surviving_members_stay_untouched_by_instant() {
    let s0 = state(blobs(60, 12), Strategy::UniformRandom, 3, &TrainSpec::Ncm);
    let j = s0.plan.shard_of("s0").unwrap();
    let out = execute(&s0, &req("n", one("s0"), RemovalMethod::Instant)).unwrap();
    for (k, member) in out.state.ensemble.members() {
        let before: &SubModel = &s0.ensemble.member(k).unwrap().model;
        if k != j {
            assert_eq!(member.model.param_digest(), before.param_digest());
        }
    }
}

//! Group samples by source so that forgetting a source means dropping whole
//! shards: no gradient is evaluated and the certificate is structural.

use disgorge::engine::{execute, verify_certificate, DisgorgementRequest, Scope, SystemState};
use disgorge::ensemble::Aggregation;
use disgorge::sharding::{plan_shards, Strategy};
use disgorge::submodel::{LogisticHyper, RemovalMethod, TrainSpec};
use disgorge::synth::{gaussian_blobs, BlobSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = gaussian_blobs(&BlobSpec::default())?;
    let plan = plan_shards(&data, Strategy::SourceGrouped, 20, 0)?;
    let spec = TrainSpec::Logistic(LogisticHyper::default());
    let state = SystemState::build(data, plan, &spec, 0, Aggregation::UniformAverage)?;
    let request = DisgorgementRequest::new("drop-src4", Scope::Source("src4".into()), RemovalMethod::ShardDrop, 1);
    let out = execute(&state, &request)?;
    let cert = &out.certificate;
    println!(
        "dropped shards {:?} ({} samples) at cost {}; {} members remain",
        cert.evidence.dropped,
        cert.disgorged.len(),
        cert.cost,
        out.state.ensemble.len()
    );
    println!("certificate verifies: {}", verify_certificate(cert, &out.state).ok);
    Ok(())
}

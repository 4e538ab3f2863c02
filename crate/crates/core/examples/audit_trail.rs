//! Every request lands in a hash-chained audit log; replaying the log from
//! the baseline reproduces each state digest, and edits are detected.

use disgorge::engine::{replay, AuditLog, DisgorgementRequest, Engine, Scope, SystemState};
use disgorge::ensemble::Aggregation;
use disgorge::sharding::{plan_shards, Strategy};
use disgorge::submodel::{RemovalMethod, TrainSpec};
use disgorge::synth::{gaussian_blobs, BlobSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = gaussian_blobs(&BlobSpec { num_samples: 300, ..BlobSpec::default() })?;
    let plan = plan_shards(&data, Strategy::SourceGrouped, 20, 0)?;
    let baseline = SystemState::build(data, plan, &TrainSpec::Ncm, 0, Aggregation::UniformAverage)?;
    let mut engine = Engine::new(baseline.clone());
    engine.submit(&DisgorgementRequest::samples("a", ["s1"], RemovalMethod::Instant))?;
    engine.submit(&DisgorgementRequest::samples("b", ["s2", "s3"], RemovalMethod::ExactRetrain))?;
    engine.submit(&DisgorgementRequest::new("c", Scope::Source("src5".into()), RemovalMethod::ShardDrop, 3))?;
    let log = engine.log();
    print!("{}", log.to_ndjson());

    let (digests, _) = replay(&baseline, log)?;
    println!("replay reproduces all {} state digests: {}", digests.len(), digests == log.state_digests());

    let mut bytes = log.to_ndjson().into_bytes();
    bytes[200] ^= 1;
    match AuditLog::parse(&bytes) {
        Err(e) => println!("tampered log rejected: {e}"),
        Ok(_) => println!("tampered log accepted?"),
    }
    Ok(())
}

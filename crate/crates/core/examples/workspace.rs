//! The on-disk workspace behind the command-line tool: ingest, shard, train,
//! disgorge, then verify a certificate against replayed history.

use disgorge::engine::{DisgorgementRequest, SystemState};
use disgorge::ensemble::Aggregation;
use disgorge::sharding::{plan_shards, Strategy};
use disgorge::submodel::{RemovalMethod, TrainSpec};
use disgorge::synth::{gaussian_blobs, BlobSpec};
use disgorge::workspace::Workspace;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("disgorge-example-workspace");
    let _ = std::fs::remove_dir_all(&dir);
    let mut ws = Workspace::init(&dir)?;
    let _lock = ws.lock()?;

    let data = gaussian_blobs(&BlobSpec { num_samples: 200, ..BlobSpec::default() })?;
    ws.ingest(&data, false)?;
    ws.save_plan(&plan_shards(&data, Strategy::UniformRandom, 4, 42)?, false)?;
    let (m, plan) = ws.manifest_and_plan()?;
    let spec = TrainSpec::Ridge { lambda: 1.0 };
    ws.commit_trained(&SystemState::build(m, plan, &spec, 0, Aggregation::UniformAverage)?, &spec, false)?;

    ws.disgorge(&DisgorgementRequest::samples("r1", ["s11"], RemovalMethod::Instant))?;
    ws.disgorge(&DisgorgementRequest::samples("r2", ["s12"], RemovalMethod::ExactRetrain))?;
    let check = ws.verify_request("r1")?;
    println!("r1 verified against its own state: {} ({})", check.verification.ok, check.verification.detail);
    println!("audit: {}", ws.verify_audit()?.verification.detail);
    println!("workspace at {}", dir.display());
    Ok(())
}

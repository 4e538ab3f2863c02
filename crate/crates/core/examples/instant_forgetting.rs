//! Remove samples from nearest-class-mean and ridge models algebraically,
//! without touching any other training data.

use disgorge::engine::{DisgorgementRequest, Engine, SystemState};
use disgorge::ensemble::Aggregation;
use disgorge::sharding::{plan_shards, Strategy};
use disgorge::submodel::{RemovalMethod, TrainSpec};
use disgorge::synth::{gaussian_blobs, BlobSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = gaussian_blobs(&BlobSpec::default())?;
    let plan = plan_shards(&data, Strategy::UniformRandom, 4, 1)?;
    for spec in [TrainSpec::Ncm, TrainSpec::Ridge { lambda: 1.0 }] {
        let state = SystemState::build(data.clone(), plan.clone(), &spec, 0, Aggregation::UniformAverage)?;
        let mut engine = Engine::new(state);
        for (i, id) in ["s3", "s14", "s15"].into_iter().enumerate() {
            let cert = engine.submit(&DisgorgementRequest::samples(&format!("r{i}"), [id], RemovalMethod::Instant))?;
            println!("{:?}: removed {id}, cost {} gradient-evals", spec.kind(), cert.cost);
        }
        let head = engine.log().head();
        println!("{:?}: {} audit entries, state {}", spec.kind(), head.record.seq + 1, head.record.state_digest);
    }
    Ok(())
}

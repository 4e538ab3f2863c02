//! One Newton step removes a sample from a converged logistic model; the
//! residual gradient norm bounds how far it is from an exact retrain.

use disgorge::submodel::{influence_remove, train_logistic_sgd, LogisticHyper, ShardData};
use disgorge::synth::{gaussian_blobs, BlobSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = BlobSpec { num_samples: 50, dim: 4, num_classes: 2, anisotropy: 1.0, ..BlobSpec::default() };
    let data = ShardData::whole(&gaussian_blobs(&spec)?);
    let hyper = |epochs| LogisticHyper { learning_rate: 0.5, epochs, l2: 1e-2, batch_size: 50 };
    let target = data.record(7);
    for epochs in [1, 50, 4000] {
        let model = train_logistic_sgd(&data, &hyper(epochs), 0, None)?;
        let (_, residual) = influence_remove(&model, &target, &data)?;
        println!("{epochs:>5} epochs: residual gradient norm after removal {residual:.2e}");
    }
    Ok(())
}

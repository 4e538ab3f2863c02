//! Differentially private full-batch training, its privacy account, and what
//! happens to the guarantee when a whole group must be forgotten.

use disgorge::dp::{dp_train, group_epsilon, sigma_for_epsilon, DpConfig, DpHyper};
use disgorge::synth::{gaussian_blobs, BlobSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = gaussian_blobs(&BlobSpec { num_samples: 400, ..BlobSpec::default() })?;
    let steps = 50;
    let sigma = sigma_for_epsilon(1.0, 1e-6, steps);
    let config = DpConfig { noise_multiplier: sigma, steps, delta: 1e-6, seed: 3, ..DpConfig::default() };
    let (model, account) = dp_train(&data, &DpHyper::default(), &config)?;
    let correct = data
        .records()
        .iter()
        .filter(|r| disgorge::math::argmax(&model.predict_proba(&r.features)) == r.label)
        .count();
    println!("sigma {sigma:.3}: epsilon {:.3}, delta {:e}, train accuracy {:.3}", account.epsilon, account.delta, correct as f64 / data.len() as f64);
    println!("membership test power at alpha 0.05 is at most {:.3}", account.test_power_bound(0.05)?);
    for k in [1, 2, 5, 10, 20] {
        println!("group of {k:>2}: {:?}", group_epsilon(account.epsilon, account.delta, k));
    }
    Ok(())
}

//! Screen synthetic candidates against a protected dataset and reject any
//! that come within epsilon of a protected sample.

use disgorge::filter::{filter_candidates, Candidate, DistanceSpec, PNorm};
use disgorge::synth::{gaussian_blobs, BlobSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let protected = gaussian_blobs(&BlobSpec { num_samples: 300, ..BlobSpec::default() })?;
    let fresh = gaussian_blobs(&BlobSpec { num_samples: 5, seed: 9, ..BlobSpec::default() })?;
    let mut candidates: Vec<Candidate> = fresh
        .records()
        .iter()
        .map(|r| Candidate::new(format!("new-{}", r.sample_id), r.features.clone()))
        .collect();
    let leaked = protected.records()[10].features.iter().map(|v| v + 1e-3).collect();
    candidates.push(Candidate::new("leaked", leaked));
    for spec in [DistanceSpec::geometric(PNorm::Finite(2.0), 0.5), DistanceSpec::perceptual(0, 0.05)] {
        let report = filter_candidates(&candidates, &protected, &spec)?;
        println!("{:?}\n{}", spec.kind, report.to_csv());
    }
    Ok(())
}

//! Sweep shard counts and model kinds, trading forgetting cost against test
//! error, and print the sweep table with its Pareto frontier.

use disgorge::bench::{pareto_frontier, run_sweep, to_csv, SweepConfig};
use disgorge::synth::{gaussian_blobs, BlobSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = gaussian_blobs(&BlobSpec::default())?;
    let cfg = SweepConfig { seeds: vec![0, 1, 2], ..SweepConfig::default() };
    let points = run_sweep(&data, &cfg)?;
    print!("{}", to_csv(&points));
    println!("\nfrontier:");
    for p in pareto_frontier(&points) {
        println!("  {p}");
    }
    Ok(())
}

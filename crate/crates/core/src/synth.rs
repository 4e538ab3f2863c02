//! Seeded Gaussian-blob benchmark data.

use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::manifest::{DataManifest, Result, SampleRecord};
use crate::rng;

pub const ANISOTROPY: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub num_samples: usize,
    pub dim: usize,
    pub num_classes: usize,
    /// Scale of the class centers; larger is easier.
    pub separation: f64,
    pub num_sources: usize,
    /// Ratio of the largest to the smallest per-feature noise std; the stds
    /// are spaced geometrically around 1. At 1 the noise is isotropic.
    pub anisotropy: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            num_samples: 800,
            dim: 8,
            num_classes: 4,
            separation: 1.0,
            num_sources: 20,
            anisotropy: ANISOTROPY,
            seed: 0,
        }
    }
}

/// `K` class centers drawn as `separation · N(0, I)`, then sample `i` has
/// label `i mod K` and features `center + D·N(0, I)` with `D` the diagonal of
/// [`noise_scales`]. Sample ids are `s{i}`;
/// sources `src{j}` are assigned uniformly at random.
pub fn gaussian_blobs(spec: &BlobSpec) -> Result<DataManifest> {
    let mut r = rng::seeded(spec.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut r) };
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.dim).map(|_| spec.separation * normal()).collect())
        .collect();
    let scales = noise_scales(spec.dim, spec.anisotropy);
    let mut features = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let c = &centers[i % spec.num_classes];
        features.push(c.iter().zip(&scales).map(|(m, s)| m + s * normal()).collect::<Vec<f64>>());
    }
    let mut src_rng = rng::seeded(rng::derive_seed(spec.seed, 1));
    let records = features
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            let source = src_rng.random_range(0..spec.num_sources.max(1));
            SampleRecord::new(format!("s{i}"), format!("src{source}"), x, i % spec.num_classes)
        })
        .collect();
    DataManifest::new(records, spec.dim, spec.num_classes)
}

/// Per-feature noise stds: geometric from `1/√a` to `√a` for `a = anisotropy`.
pub fn noise_scales(dim: usize, anisotropy: f64) -> Vec<f64> {
    let a = anisotropy.max(1.0);
    (0..dim)
        .map(|j| {
            let t = if dim > 1 { j as f64 / (dim - 1) as f64 } else { 0.5 };
            a.powf(t - 0.5)
        })
        .collect()
}

/// Seeded split into `(train, test)`; each part keeps manifest order.
pub fn train_test_split(m: &DataManifest, test_fraction: f64, seed: u64) -> Result<(DataManifest, DataManifest)> {
    let n_test = ((m.len() as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
    let perm = rng::permutation(m.len(), &mut rng::seeded(seed));
    let test_ids: std::collections::BTreeSet<String> = perm[..n_test]
        .iter()
        .map(|&i| m.records()[i].sample_id.clone())
        .collect();
    let train_ids: std::collections::BTreeSet<String> =
        m.ids().filter(|id| !test_ids.contains(*id)).map(String::from).collect();
    Ok((m.remove_samples(&test_ids)?, m.remove_samples(&train_ids)?))
}

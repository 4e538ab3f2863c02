use super::{Lineage, ModelError, RemovalMethod, Result, ShardData};
use crate::manifest::SampleRecord;
use crate::math::{softmax, squared_distance, KahanSum};

/// Nearest-class-mean classifier over pre-embedded features.
///
/// Forgetting a sample subtracts it from its class mean; no data is
/// revisited and no gradient is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct NcmModel {
    /// K rows of d; an all-zero row when the class count is 0.
    pub class_means: Vec<Vec<f64>>,
    pub class_counts: Vec<u64>,
    pub lineage: Lineage,
}

impl NcmModel {
    pub fn dim(&self) -> usize {
        self.class_means.first().map_or(0, Vec::len)
    }

    pub fn is_active(&self, class: usize) -> bool {
        self.class_counts[class] > 0
    }

    /// Negative squared distances to active class means; `-inf` for inactive classes.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.class_means
            .iter()
            .enumerate()
            .map(|(c, mean)| {
                if self.is_active(c) {
                    -squared_distance(x, mean)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.scores(x))
    }
}

pub fn train_ncm(data: &ShardData, seed: u64) -> Result<NcmModel> {
    if data.is_empty() {
        return Err(ModelError::EmptyShard);
    }
    let (d, k) = (data.dim, data.num_classes);
    let mut sums = vec![vec![KahanSum::default(); d]; k];
    let mut counts = vec![0u64; k];
    for (x, &y) in data.features.iter().zip(&data.labels) {
        counts[y] += 1;
        for (acc, v) in sums[y].iter_mut().zip(x) {
            acc.add(*v);
        }
    }
    let class_means = sums
        .iter()
        .zip(&counts)
        .map(|(row, &n)| {
            if n == 0 {
                vec![0.0; d]
            } else {
                row.iter().map(|s| s.value() / n as f64).collect()
            }
        })
        .collect();
    let mut lineage = Lineage::new(data, seed);
    lineage.gradient_evals += data.len() as u64;
    Ok(NcmModel {
        class_means,
        class_counts: counts,
        lineage,
    })
}

/// `mean' = (n·mean − x)/(n − 1)`; the last sample of a class leaves an
/// inactive zero row. Costs zero gradient-evals.
pub fn ncm_remove_sample(model: &NcmModel, sample: &SampleRecord) -> Result<NcmModel> {
    if !model.lineage.contains(&sample.sample_id) {
        return Err(ModelError::NotInLineage(sample.sample_id.clone()));
    }
    if sample.features.len() != model.dim() {
        return Err(ModelError::DimensionMismatch {
            expected: model.dim(),
            found: sample.features.len(),
        });
    }
    let c = sample.label;
    let n = *model
        .class_counts
        .get(c)
        .filter(|&&n| n > 0)
        .ok_or(ModelError::ClassUnderflow { class: c })?;
    let mut out = model.clone();
    if n == 1 {
        out.class_means[c] = vec![0.0; model.dim()];
    } else {
        let nf = n as f64;
        for (m, x) in out.class_means[c].iter_mut().zip(&sample.features) {
            *m = (nf * *m - x) / (nf - 1.0);
        }
    }
    out.class_counts[c] = n - 1;
    out.lineage.record_removal(&sample.sample_id, RemovalMethod::Instant)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::blobs;
    use super::*;
    use crate::math::relative_max_diff;

    fn two_points() -> ShardData {
        let mut d = blobs(2, 2, 1, 0.0, 0);
        d.features = vec![vec![1.0, 0.0], vec![3.0, 0.0]];
        d
    }

    #[test]
    fn class_mean_of_two_points() {
        let m = train_ncm(&two_points(), 0).unwrap();
        assert_eq!(m.class_means[0], vec![2.0, 0.0]);
        assert_eq!(m.class_counts, vec![2]);
        assert_eq!(m.lineage.gradient_evals, 2);
    }

    #[test]
    fn one_sample_per_class_means_are_samples() {
        let data = blobs(3, 4, 3, 2.0, 9);
        let m = train_ncm(&data, 0).unwrap();
        for (c, x) in data.features.iter().enumerate() {
            assert_eq!(&m.class_means[c], x);
        }
    }

    #[test]
    fn matches_two_pass_oracle() {
        let data = blobs(100, 5, 3, 3.0, 17);
        let m = train_ncm(&data, 0).unwrap();
        for c in 0..3 {
            // independent two-pass: mean, then correct with mean residual
            let rows: Vec<&Vec<f64>> = data
                .features
                .iter()
                .zip(&data.labels)
                .filter(|(_, &y)| y == c)
                .map(|(x, _)| x)
                .collect();
            let n = rows.len() as f64;
            for j in 0..5 {
                let first: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                let resid: f64 = rows.iter().map(|r| r[j] - first).sum::<f64>() / n;
                let oracle = first + resid;
                assert!((m.class_means[c][j] - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
            }
        }
    }

    #[test]
    fn remove_one_of_two() {
        let data = two_points();
        let m = train_ncm(&data, 0).unwrap();
        let out = ncm_remove_sample(&m, &data.record(1)).unwrap();
        assert_eq!(out.class_means[0], vec![1.0, 0.0]);
        assert_eq!(out.class_counts[0], 1);
        assert_eq!(out.lineage.gradient_evals, m.lineage.gradient_evals);
    }

    #[test]
    fn removing_last_of_class_deactivates() {
        let data = blobs(3, 2, 3, 1.0, 2);
        let m = train_ncm(&data, 0).unwrap();
        let out = ncm_remove_sample(&m, &data.record(1)).unwrap();
        assert!(!out.is_active(1));
        assert_eq!(out.class_means[1], vec![0.0, 0.0]);
        let p = out.predict_proba(&data.features[1]);
        assert_eq!(p[1], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn remove_errors() {
        let data = two_points();
        let m = train_ncm(&data, 0).unwrap();
        let mut stranger = data.record(0);
        stranger.sample_id = "other".into();
        assert!(matches!(
            ncm_remove_sample(&m, &stranger),
            Err(ModelError::NotInLineage(_))
        ));
        let mut wrong_class = data.record(0);
        wrong_class.label = 5;
        assert!(matches!(
            ncm_remove_sample(&m, &wrong_class),
            Err(ModelError::ClassUnderflow { class: 5 })
        ));
        assert!(matches!(
            train_ncm(&data.without("s000").unwrap().without("s001").unwrap(), 0),
            Err(ModelError::EmptyShard)
        ));
    }

    #[test]
    fn removal_matches_retrain() {
        let data = blobs(50, 4, 3, 2.0, 5);
        let m = train_ncm(&data, 1).unwrap();
        for i in [0, 17, 49] {
            let out = ncm_remove_sample(&m, &data.record(i)).unwrap();
            let fresh = train_ncm(&data.without(&data.sample_ids[i]).unwrap(), 1).unwrap();
            for c in 0..3 {
                assert!(relative_max_diff(&out.class_means[c], &fresh.class_means[c]) < 1e-9);
            }
            assert_eq!(out.class_counts, fresh.class_counts);
        }
    }
}

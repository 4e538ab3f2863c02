use nalgebra::{DMatrix, DVector};

use super::{Lineage, ModelError, RemovalMethod, Result, ShardData};
use crate::manifest::SampleRecord;
use crate::math::softmax;

/// Least-squares classifier on one-hot targets, `W = (XᵀX + λI)⁻¹ XᵀY`.
///
/// The inverse Gram matrix is maintained directly so that adding or
/// removing one sample is a rank-one Sherman-Morrison update, exact up to
/// rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    /// d × K
    pub weights: DMatrix<f64>,
    /// d × d, `(XᵀX + λI)⁻¹`
    pub inverse_gram: DMatrix<f64>,
    /// d × K, running `XᵀY`
    pub xty: DMatrix<f64>,
    pub lambda: f64,
    pub lineage: Lineage,
}

impl RidgeModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(x);
        (self.weights.transpose() * x).iter().copied().collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.scores(x))
    }

    fn refresh_weights(&mut self) -> Result<()> {
        let a = &self.inverse_gram;
        // keep the inverse exactly symmetric
        self.inverse_gram = (a + a.transpose()) * 0.5;
        self.weights = &self.inverse_gram * &self.xty;
        if self.weights.iter().chain(self.inverse_gram.iter()).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(ModelError::NonFinite("updating the ridge inverse"))
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.weights.nrows() {
            return Err(ModelError::DimensionMismatch {
                expected: self.weights.nrows(),
                found: x.len(),
            });
        }
        Ok(())
    }

    // A⁻¹ ← A⁻¹ − (A⁻¹x)(A⁻¹x)ᵀ / (1 + xᵀA⁻¹x)
    fn rank_one_add(&mut self, x: &[f64], label: usize) -> Result<()> {
        let xv = DVector::from_column_slice(x);
        let u = &self.inverse_gram * &xv;
        let denom = 1.0 + xv.dot(&u);
        if !denom.is_finite() {
            return Err(ModelError::NonFinite("adding a sample to the ridge inverse"));
        }
        self.inverse_gram -= &u * u.transpose() / denom;
        let mut col = self.xty.column_mut(label);
        col += &xv;
        Ok(())
    }
}

pub fn train_ridge(data: &ShardData, lambda: f64, seed: u64) -> Result<RidgeModel> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(ModelError::InvalidHyper(format!("ridge lambda must be > 0, got {lambda}")));
    }
    if data.is_empty() {
        return Err(ModelError::EmptyShard);
    }
    let (d, k) = (data.dim, data.num_classes);
    let mut model = RidgeModel {
        weights: DMatrix::zeros(d, k),
        inverse_gram: DMatrix::identity(d, d) / lambda,
        xty: DMatrix::zeros(d, k),
        lambda,
        lineage: Lineage::new(data, seed),
    };
    for (x, &y) in data.features.iter().zip(&data.labels) {
        model.rank_one_add(x, y)?;
    }
    model.lineage.gradient_evals += data.len() as u64;
    model.refresh_weights()?;
    Ok(model)
}

/// Adds one sample (rank-one update). Costs one gradient-eval.
pub fn ridge_add_sample(model: &RidgeModel, sample: &SampleRecord) -> Result<RidgeModel> {
    model.check_dim(&sample.features)?;
    if model.lineage.contains(&sample.sample_id) {
        return Err(ModelError::AlreadyInLineage(sample.sample_id.clone()));
    }
    let mut out = model.clone();
    out.rank_one_add(&sample.features, sample.label)?;
    out.refresh_weights()?;
    out.lineage.sample_ids.push(sample.sample_id.clone());
    out.lineage.gradient_evals += 1;
    Ok(out)
}

/// Removes one sample by Sherman-Morrison downdate,
/// `A⁻¹ ← A⁻¹ + (A⁻¹x)(A⁻¹x)ᵀ / (1 − xᵀA⁻¹x)`. Costs one gradient-eval.
pub fn ridge_remove_sample(model: &RidgeModel, sample: &SampleRecord) -> Result<RidgeModel> {
    model.check_dim(&sample.features)?;
    if !model.lineage.contains(&sample.sample_id) {
        return Err(ModelError::NotInLineage(sample.sample_id.clone()));
    }
    let xv = DVector::from_column_slice(&sample.features);
    let u = &model.inverse_gram * &xv;
    let denominator = 1.0 - xv.dot(&u);
    if !(denominator.abs() >= 1e-12) {
        return Err(ModelError::DegenerateDowndate { denominator });
    }
    let mut out = model.clone();
    out.inverse_gram += &u * u.transpose() / denominator;
    let mut col = out.xty.column_mut(sample.label);
    col -= &xv;
    out.refresh_weights()?;
    out.lineage.record_removal(&sample.sample_id, RemovalMethod::Instant)?;
    out.lineage.gradient_evals += 1;
    Ok(out)
}

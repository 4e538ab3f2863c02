//! Multinomial logistic regression with λ-regularized cross-entropy.
//!
//! The objective over a shard of `n` samples is the mean of per-sample
//! regularized losses `ℓ̃ᵢ(θ) = CE(softmax(Wᵀxᵢ + b), yᵢ) + (λ/2)‖θ‖²`,
//! where θ stacks every weight and bias (biases are regularized too, which
//! keeps the Hessian positive definite despite softmax's shift invariance).
//!
//! Parameter layout: class `k` owns the slice `θ[k(d+1) .. (k+1)(d+1)]`,
//! weights first, bias last.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Lineage, ModelError, RemovalMethod, Result, ShardData};
use crate::manifest::SampleRecord;
use crate::math::{norm2, softmax};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    /// λ, the L2 penalty
    pub l2: f64,
    pub batch_size: usize,
}

impl Default for LogisticHyper {
    fn default() -> Self {
        LogisticHyper {
            learning_rate: 0.1,
            epochs: 20,
            l2: 1e-3,
            batch_size: 16,
        }
    }
}

impl LogisticHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidHyper(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.l2 > 0.0 && self.l2.is_finite()) {
            return Err(ModelError::InvalidHyper(format!(
                "l2 penalty must be > 0, got {}",
                self.l2
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidHyper("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    /// d × K
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub hyper: LogisticHyper,
    pub lineage: Lineage,
}

impl LogisticModel {
    pub fn zeros(dim: usize, num_classes: usize, hyper: LogisticHyper, lineage: Lineage) -> Self {
        LogisticModel {
            weights: DMatrix::zeros(dim, num_classes),
            bias: DVector::zeros(num_classes),
            hyper,
            lineage,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    /// Pre-softmax scores `Wᵀx + b`.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        logits(&self.params(), self.dim(), self.num_classes(), x)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn params(&self) -> Vec<f64> {
        let (d, k) = (self.dim(), self.num_classes());
        let mut theta = Vec::with_capacity((d + 1) * k);
        for c in 0..k {
            theta.extend(self.weights.column(c).iter());
            theta.push(self.bias[c]);
        }
        theta
    }

    pub fn set_params(&mut self, theta: &[f64]) {
        let (d, k) = (self.dim(), self.num_classes());
        for c in 0..k {
            let block = &theta[c * (d + 1)..(c + 1) * (d + 1)];
            self.weights.column_mut(c).copy_from_slice(&block[..d]);
            self.bias[c] = block[d];
        }
    }

    /// Mean regularized loss and its gradient over `data`.
    pub fn objective(&self, data: &ShardData) -> (f64, Vec<f64>) {
        objective(&self.params(), data, self.hyper.l2)
    }

    /// `‖∇L(θ)‖₂` over `data`.
    pub fn gradient_norm(&self, data: &ShardData) -> f64 {
        norm2(&self.objective(data).1)
    }

    /// Exact Hessian of the mean regularized loss over `data`.
    pub fn hessian(&self, data: &ShardData) -> DMatrix<f64> {
        hessian(&self.params(), data, self.hyper.l2)
    }
}

pub(crate) fn logits(theta: &[f64], d: usize, k: usize, x: &[f64]) -> Vec<f64> {
    (0..k)
        .map(|c| {
            let block = &theta[c * (d + 1)..(c + 1) * (d + 1)];
            block[..d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + block[d]
        })
        .collect()
}

/// Adds `scale · ∇CE(x, y; θ)` into `grad` and returns the unscaled loss.
pub(crate) fn accumulate_ce_gradient(
    theta: &[f64],
    d: usize,
    k: usize,
    x: &[f64],
    y: usize,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let z = logits(theta, d, k, x);
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for c in 0..k {
        let p = (z[c] - lse).exp();
        let r = (p - if c == y { 1.0 } else { 0.0 }) * scale;
        let block = &mut grad[c * (d + 1)..(c + 1) * (d + 1)];
        for (g, v) in block[..d].iter_mut().zip(x) {
            *g += r * v;
        }
        block[d] += r;
    }
    lse - z[y]
}

pub(crate) fn objective(theta: &[f64], data: &ShardData, l2: f64) -> (f64, Vec<f64>) {
    let (d, k, n) = (data.dim, data.num_classes, data.len());
    let mut grad = vec![0.0; theta.len()];
    let mut loss = 0.0;
    if n > 0 {
        let scale = 1.0 / n as f64;
        for (x, &y) in data.features.iter().zip(&data.labels) {
            loss += accumulate_ce_gradient(theta, d, k, x, y, scale, &mut grad) * scale;
        }
    }
    for (g, t) in grad.iter_mut().zip(theta) {
        *g += l2 * t;
    }
    loss += 0.5 * l2 * theta.iter().map(|t| t * t).sum::<f64>();
    (loss, grad)
}

pub(crate) fn hessian(theta: &[f64], data: &ShardData, l2: f64) -> DMatrix<f64> {
    let (d, k, n) = (data.dim, data.num_classes, data.len());
    let width = d + 1;
    let dim = width * k;
    let mut h = DMatrix::identity(dim, dim) * l2;
    if n == 0 {
        return h;
    }
    let scale = 1.0 / n as f64;
    let mut xt = vec![1.0; width];
    for x in &data.features {
        xt[..d].copy_from_slice(x);
        let p = softmax(&logits(theta, d, k, x));
        for a in 0..k {
            for b in 0..k {
                let c = (if a == b { p[a] } else { 0.0 } - p[a] * p[b]) * scale;
                if c == 0.0 {
                    continue;
                }
                for i in 0..width {
                    let ci = c * xt[i];
                    for j in 0..width {
                        h[(a * width + i, b * width + j)] += ci * xt[j];
                    }
                }
            }
        }
    }
    h
}

/// Mini-batch SGD from zero (or from `core`'s parameters), reshuffling each
/// epoch with a generator seeded by `seed`. Costs `epochs · |shard|`
/// gradient-evals.
pub fn train_logistic_sgd(
    data: &ShardData,
    hyper: &LogisticHyper,
    seed: u64,
    core: Option<&LogisticModel>,
) -> Result<LogisticModel> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyShard);
    }
    let (d, k, n) = (data.dim, data.num_classes, data.len());
    let mut model = LogisticModel::zeros(d, k, *hyper, Lineage::new(data, seed));
    if let Some(core) = core {
        if (core.dim(), core.num_classes()) != (d, k) {
            return Err(ModelError::DimensionMismatch {
                expected: (d + 1) * k,
                found: (core.dim() + 1) * core.num_classes(),
            });
        }
        model.weights.copy_from(&core.weights);
        model.bias.copy_from(&core.bias);
    }
    let mut theta = model.params();
    let mut grad = vec![0.0; theta.len()];
    let mut r = rng::seeded(seed);
    for epoch in 0..hyper.epochs {
        let order = rng::permutation(n, &mut r);
        for batch in order.chunks(hyper.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &i in batch {
                loss += accumulate_ce_gradient(
                    &theta,
                    d,
                    k,
                    &data.features[i],
                    data.labels[i],
                    scale,
                    &mut grad,
                ) * scale;
            }
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t -= hyper.learning_rate * (g + hyper.l2 * *t);
            }
            if !loss.is_finite() || theta.iter().any(|t| !t.is_finite()) {
                return Err(ModelError::Divergence { epoch, loss });
            }
        }
    }
    model.set_params(&theta);
    model.lineage.gradient_evals += (hyper.epochs * n) as u64;
    Ok(model)
}

/// Removes `sample` with one Newton step on the remaining-data objective:
///
/// `θ' = θ + H⁻¹ ∇ℓ̃(sample; θ) / (n − 1)`
///
/// with `H` the regularized Hessian on `data ∖ {sample}`. Returns the new
/// model and `‖∇L_{data∖sample}(θ')‖₂`, the residual gradient norm that
/// quantifies how far the result is from the retrained optimum.
///
/// `data` is the shard the model currently covers (including `sample`).
/// Costs `2·|data|` gradient-evals: one Hessian build plus one residual pass.
pub fn influence_remove(
    model: &LogisticModel,
    sample: &SampleRecord,
    data: &ShardData,
) -> Result<(LogisticModel, f64)> {
    model.hyper.validate()?;
    if !model.lineage.contains(&sample.sample_id) {
        return Err(ModelError::NotInLineage(sample.sample_id.clone()));
    }
    if sample.features.len() != model.dim() {
        return Err(ModelError::DimensionMismatch {
            expected: model.dim(),
            found: sample.features.len(),
        });
    }
    let n = data.len();
    let remaining = data.without(&sample.sample_id)?;
    if remaining.is_empty() {
        return Err(ModelError::EmptyShard);
    }
    let (d, k) = (model.dim(), model.num_classes());
    let theta = model.params();
    let l2 = model.hyper.l2;

    let mut g_sample = vec![0.0; theta.len()];
    accumulate_ce_gradient(&theta, d, k, &sample.features, sample.label, 1.0, &mut g_sample);
    for (g, t) in g_sample.iter_mut().zip(&theta) {
        *g += l2 * t;
    }
    let h = hessian(&theta, &remaining, l2);
    let chol = h.cholesky().ok_or(ModelError::HessianSolve)?;
    let step = chol.solve(&DVector::from_vec(g_sample)) / (n - 1) as f64;
    if step.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::HessianSolve);
    }
    let updated: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();

    let mut out = model.clone();
    out.set_params(&updated);
    let residual = norm2(&objective(&updated, &remaining, l2).1);
    out.lineage.record_removal(&sample.sample_id, RemovalMethod::Influence)?;
    out.lineage.gradient_evals += 2 * n as u64;
    Ok((out, residual))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::blobs;
    use super::*;
    use crate::math::argmax;

    fn accuracy(m: &LogisticModel, data: &ShardData) -> f64 {
        let hits = data
            .features
            .iter()
            .zip(&data.labels)
            .filter(|(x, &y)| argmax(&m.predict_proba(x)) == y)
            .count();
        hits as f64 / data.len() as f64
    }

    fn full_batch(n: usize, epochs: usize, l2: f64) -> LogisticHyper {
        LogisticHyper {
            learning_rate: 0.5,
            epochs,
            l2,
            batch_size: n,
        }
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let mut data = blobs(20, 2, 2, 0.0, 0);
        for (i, x) in data.features.iter_mut().enumerate() {
            let c = data.labels[i] as f64;
            *x = vec![4.0 * c - 2.0 + 0.1 * (i as f64 % 3.0), 0.2 * (i as f64 % 5.0) - 0.4];
        }
        let hyper = LogisticHyper {
            learning_rate: 0.1,
            epochs: 200,
            l2: 1e-4,
            batch_size: 4,
        };
        let m = train_logistic_sgd(&data, &hyper, 3, None).unwrap();
        assert_eq!(accuracy(&m, &data), 1.0);
        assert_eq!(m.lineage.gradient_evals, 200 * 20);
    }

    #[test]
    fn zero_epochs_gives_uniform_predictions() {
        let data = blobs(10, 3, 4, 1.0, 0);
        let hyper = LogisticHyper { epochs: 0, ..LogisticHyper::default() };
        let m = train_logistic_sgd(&data, &hyper, 0, None).unwrap();
        assert!(m.params().iter().all(|t| *t == 0.0));
        assert_eq!(m.predict_proba(&data.features[0]), vec![0.25; 4]);
    }

    #[test]
    fn seeded_training_is_bit_identical() {
        let data = blobs(40, 3, 3, 1.5, 2);
        let hyper = LogisticHyper::default();
        let a = train_logistic_sgd(&data, &hyper, 11, None).unwrap();
        let b = train_logistic_sgd(&data, &hyper, 11, None).unwrap();
        assert_eq!(a, b);
        let c = train_logistic_sgd(&data, &hyper, 12, None).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn core_initialization_and_dimension_check() {
        let data = blobs(30, 2, 2, 2.0, 4);
        let zero = LogisticHyper { epochs: 0, ..LogisticHyper::default() };
        let core = train_logistic_sgd(&data, &LogisticHyper::default(), 1, None).unwrap();
        let init = train_logistic_sgd(&data, &zero, 1, Some(&core)).unwrap();
        assert_eq!(init.params(), core.params());
        let wide = blobs(30, 3, 2, 2.0, 4);
        assert!(matches!(
            train_logistic_sgd(&wide, &zero, 1, Some(&core)),
            Err(ModelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn divergence_is_named() {
        let data = blobs(10, 2, 2, 5.0, 0);
        let hyper = LogisticHyper {
            learning_rate: 1e10,
            epochs: 100,
            l2: 1.0,
            batch_size: 10,
        };
        assert!(matches!(
            train_logistic_sgd(&data, &hyper, 0, None),
            Err(ModelError::Divergence { .. })
        ));
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let data = blobs(12, 2, 2, 1.0, 8);
        let mut m = train_logistic_sgd(&data, &LogisticHyper::default(), 0, None).unwrap();
        m.hyper.l2 = 0.05;
        let h = m.hessian(&data);
        let theta = m.params();
        let eps = 1e-5;
        for j in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[j] += eps;
            minus[j] -= eps;
            let gp = objective(&plus, &data, 0.05).1;
            let gm = objective(&minus, &data, 0.05).1;
            for i in 0..theta.len() {
                let fd = (gp[i] - gm[i]) / (2.0 * eps);
                let rel = (fd - h[(i, j)]).abs() / h[(i, j)].abs().max(1e-3);
                assert!(rel < 1e-4, "H[{i},{j}] = {} vs fd {fd}", h[(i, j)]);
            }
        }
    }

    #[test]
    fn identical_samples_need_no_step() {
        let mut data = blobs(20, 2, 2, 0.0, 0);
        for (x, y) in data.features.iter_mut().zip(data.labels.iter_mut()) {
            *x = vec![1.0, -0.5];
            *y = 1;
        }
        let hyper = full_batch(20, 3000, 0.05);
        let m = train_logistic_sgd(&data, &hyper, 0, None).unwrap();
        let (out, residual) = influence_remove(&m, &data.record(4), &data).unwrap();
        let shift = out
            .params()
            .iter()
            .zip(m.params())
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(shift < 1e-8, "shift {shift}");
        assert!(residual < 1e-8, "residual {residual}");
    }

    #[test]
    fn influence_tracks_converged_retrain() {
        let data = blobs(50, 2, 2, 1.0, 21);
        let hyper = full_batch(50, 4000, 1e-2);
        let m = train_logistic_sgd(&data, &hyper, 0, None).unwrap();
        assert!(m.gradient_norm(&data) < 1e-8);
        let target = data.record(7);
        let (out, residual) = influence_remove(&m, &target, &data).unwrap();
        let rest = data.without(&target.sample_id).unwrap();
        let retrained = train_logistic_sgd(&rest, &full_batch(49, 4000, 1e-2), 0, None).unwrap();
        let gap = out
            .params()
            .iter()
            .zip(retrained.params())
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(gap < 1e-2, "gap {gap}");
        assert!(residual < 1e-3, "residual {residual}");
        assert_eq!(out.lineage.gradient_evals, m.lineage.gradient_evals + 100);
        assert!(!out.lineage.contains(&target.sample_id));

        let underfit = train_logistic_sgd(&data, &full_batch(50, 1, 1e-2), 0, None).unwrap();
        let (_, loose) = influence_remove(&underfit, &target, &data).unwrap();
        assert!(loose > 10.0 * residual, "underfit {loose} vs converged {residual}");
    }

    #[test]
    fn influence_errors() {
        let data = blobs(2, 2, 2, 1.0, 0);
        let m = train_logistic_sgd(&data, &LogisticHyper::default(), 0, None).unwrap();
        let mut stranger = data.record(0);
        stranger.sample_id = "x".into();
        assert!(matches!(
            influence_remove(&m, &stranger, &data),
            Err(ModelError::NotInLineage(_))
        ));
        let one = data.without("s001").unwrap();
        let m1 = train_logistic_sgd(&one, &LogisticHyper::default(), 0, None).unwrap();
        assert!(matches!(
            influence_remove(&m1, &one.record(0), &one),
            Err(ModelError::EmptyShard)
        ));
    }
}

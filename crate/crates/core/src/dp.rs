//! Differentially private training and privacy accounting.
//!
//! Training is full-batch gradient descent with per-sample clipping to norm
//! `C` and Gaussian noise of per-coordinate std `σ·C/N` on the mean
//! gradient. Each step is a Gaussian mechanism with sensitivity `C/N`, i.e.
//! `ρ = 1/(2σ²)`-zCDP; `T` steps compose to `ρ = T/(2σ²)`, converted to
//! `(ε, δ)` with `ε = ρ + 2·sqrt(ρ·ln(1/δ))`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::manifest::DataManifest;
use crate::math::norm2;
use crate::rng;
use crate::submodel::{accumulate_ce_gradient, Lineage, LogisticHyper, LogisticModel, ModelError, ShardData};

#[derive(Debug, thiserror::Error)]
pub enum DpError {
    #[error("invalid DP configuration: {0}")]
    InvalidConfig(String),
    #[error("significance level must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DpError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Per-sample gradient clip norm `C`.
    pub clip_norm: f64,
    /// `σ`; noise std on the mean gradient is `σ·C/N`.
    pub noise_multiplier: f64,
    pub steps: usize,
    /// Always true at desk scale; subsampled batches are not supported.
    pub full_batch: bool,
    pub delta: f64,
    pub seed: u64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            steps: 100,
            full_batch: true,
            delta: 1e-5,
            seed: 0,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DpError::InvalidConfig(msg));
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad(format!("clip norm must be > 0, got {}", self.clip_norm));
        }
        if !(self.noise_multiplier > 0.0 && self.noise_multiplier.is_finite()) {
            return bad(format!(
                "noise multiplier must be > 0, got {}",
                self.noise_multiplier
            ));
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if !self.full_batch {
            return bad("only full-batch training is supported".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        Ok(())
    }
}

/// `(ε, δ)` state of a DP training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyAccount {
    pub epsilon: f64,
    pub delta: f64,
    /// zCDP budget.
    pub rho: f64,
    pub steps_consumed: usize,
    pub config: DpConfig,
}

impl PrivacyAccount {
    pub fn test_power_bound(&self, alpha: f64) -> Result<f64> {
        test_power_bound(self.epsilon, self.delta, alpha)
    }
}

/// `ε = ρ + 2·sqrt(ρ·ln(1/δ))`.
pub fn zcdp_to_dp(rho: f64, delta: f64) -> f64 {
    rho + 2.0 * (rho * (1.0 / delta).ln()).sqrt()
}

/// Noise multiplier `σ` at which `steps` full-batch steps spend exactly
/// `epsilon` at `delta`.
pub fn sigma_for_epsilon(epsilon: f64, delta: f64, steps: usize) -> f64 {
    // ε = ρ + 2√(ρL) is a quadratic in √ρ
    let l = (1.0 / delta).ln();
    let root = -l.sqrt() + (l + epsilon).sqrt();
    let rho = root * root;
    (steps as f64 / (2.0 * rho)).sqrt()
}

/// Account for `config.steps` full-batch Gaussian steps.
///
/// Independent of `C` and `N`: sensitivity and noise scale cancel.
pub fn account_epsilon(config: &DpConfig) -> Result<PrivacyAccount> {
    config.validate()?;
    let sigma = config.noise_multiplier;
    let rho = config.steps as f64 / (2.0 * sigma * sigma);
    Ok(PrivacyAccount {
        epsilon: zcdp_to_dp(rho, config.delta),
        delta: config.delta,
        rho,
        steps_consumed: config.steps,
        config: *config,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GroupGuarantee {
    Bounded { epsilon: f64, delta: f64 },
    /// `δ_k ≥ 1`: the conversion promises nothing.
    Vacuous,
}

impl GroupGuarantee {
    pub fn is_vacuous(&self) -> bool {
        matches!(self, GroupGuarantee::Vacuous)
    }

    /// Test-power bound at `alpha`; 1.0 when vacuous.
    pub fn test_power_bound(&self, alpha: f64) -> Result<f64> {
        match *self {
            GroupGuarantee::Bounded { epsilon, delta } => test_power_bound(epsilon, delta, alpha),
            GroupGuarantee::Vacuous => {
                check_alpha(alpha)?;
                Ok(1.0)
            }
        }
    }
}

/// Group privacy for a cohort of `k` samples: `ε_k = kε`,
/// `δ_k = k·e^{(k−1)ε}·δ`, vacuous once `δ_k ≥ 1`.
pub fn group_epsilon(epsilon: f64, delta: f64, group_size: usize) -> GroupGuarantee {
    let k = group_size.max(1) as f64;
    if group_size <= 1 {
        return GroupGuarantee::Bounded { epsilon, delta };
    }
    let delta_k = k * ((k - 1.0) * epsilon).exp() * delta;
    if !(delta_k < 1.0) {
        return GroupGuarantee::Vacuous;
    }
    GroupGuarantee::Bounded {
        epsilon: k * epsilon,
        delta: delta_k,
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(DpError::InvalidAlpha(alpha))
    }
}

/// Upper bound on the power of any level-`alpha` membership test:
/// `min(1, e^ε·α + δ)`.
pub fn test_power_bound(epsilon: f64, delta: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok((epsilon.exp() * alpha + delta).min(1.0))
}

/// Rescales `grad` in place so that `‖grad‖₂ ≤ clip_norm`.
pub fn clip_gradient(grad: &mut [f64], clip_norm: f64) {
    let norm = norm2(grad);
    if norm > clip_norm {
        let s = clip_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Step size and L2 penalty for DP training (λ ≥ 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpHyper {
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for DpHyper {
    fn default() -> Self {
        DpHyper {
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

/// DP-trains a monolithic logistic model on every record of `manifest`.
pub fn dp_train(
    manifest: &DataManifest,
    hyper: &DpHyper,
    config: &DpConfig,
) -> Result<(LogisticModel, PrivacyAccount)> {
    dp_train_on(&ShardData::whole(manifest), hyper, config)
}

/// DP-trains on an explicit training set (e.g. the single shard of a
/// monolithic plan).
pub fn dp_train_on(
    data: &ShardData,
    hyper: &DpHyper,
    config: &DpConfig,
) -> Result<(LogisticModel, PrivacyAccount)> {
    config.validate()?;
    if !(hyper.l2 >= 0.0 && hyper.l2.is_finite()) {
        return Err(DpError::InvalidConfig(format!("l2 must be >= 0, got {}", hyper.l2)));
    }
    if !(hyper.learning_rate > 0.0 && hyper.learning_rate.is_finite()) {
        return Err(DpError::InvalidConfig(format!(
            "learning rate must be > 0, got {}",
            hyper.learning_rate
        )));
    }
    if data.is_empty() {
        return Err(ModelError::EmptyShard.into());
    }
    let (d, k, n) = (data.dim, data.num_classes, data.len());
    let account = account_epsilon(config)?;
    let model_hyper = LogisticHyper {
        learning_rate: hyper.learning_rate,
        epochs: config.steps,
        l2: hyper.l2,
        batch_size: n,
    };
    let mut model = LogisticModel::zeros(d, k, model_hyper, Lineage::new(data, config.seed));
    let mut theta = model.params();
    let p = theta.len();
    let noise_std = config.noise_multiplier * config.clip_norm / n as f64;
    let mut r = rng::seeded(config.seed);
    let mut per_sample = vec![0.0; p];
    let mut mean = vec![0.0; p];
    for step in 0..config.steps {
        mean.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (x, &y) in data.features.iter().zip(&data.labels) {
            per_sample.iter_mut().for_each(|g| *g = 0.0);
            loss += accumulate_ce_gradient(&theta, d, k, x, y, 1.0, &mut per_sample);
            clip_gradient(&mut per_sample, config.clip_norm);
            for (m, g) in mean.iter_mut().zip(&per_sample) {
                *m += g;
            }
        }
        for (t, m) in theta.iter_mut().zip(&mean) {
            let z: f64 = StandardNormal.sample(&mut r);
            let g = m / n as f64 + noise_std * z + hyper.l2 * *t;
            *t -= hyper.learning_rate * g;
        }
        if !loss.is_finite() || theta.iter().any(|t| !t.is_finite()) {
            return Err(ModelError::Divergence { epoch: step, loss }.into());
        }
    }
    model.set_params(&theta);
    model.lineage.gradient_evals += (config.steps * n) as u64;
    model.lineage.privacy = Some(account);
    Ok((model, account))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::SampleRecord;
    use crate::submodel::objective;
    use proptest::prelude::*;

    fn cfg(steps: usize, sigma: f64, delta: f64) -> DpConfig {
        DpConfig {
            steps,
            noise_multiplier: sigma,
            delta,
            ..DpConfig::default()
        }
    }

    fn toy_manifest(n: usize) -> DataManifest {
        let records = (0..n)
            .map(|i| {
                let c = i % 2;
                let x = vec![
                    (c as f64) * 2.0 - 1.0 + 0.3 * ((i * 7 % 11) as f64 / 11.0 - 0.5),
                    0.5 * ((i * 5 % 13) as f64 / 13.0 - 0.5),
                ];
                SampleRecord::new(format!("s{i}"), "src", x, c)
            })
            .collect();
        DataManifest::new(records, 2, 2).unwrap()
    }

    #[test]
    fn single_step_epsilon() {
        let acct = account_epsilon(&cfg(1, 1.0, 1e-5)).unwrap();
        assert_eq!(acct.rho, 0.5);
        // 0.5 + 2·sqrt(0.5·ln 1e5)
        let expected = 0.5 + 2.0 * (0.5f64 * 100000f64.ln()).sqrt();
        assert!((acct.epsilon - expected).abs() < 1e-12);
        assert!((acct.epsilon - 5.298).abs() < 1e-3);
    }

    #[test]
    fn epsilon_monotone_on_grid() {
        let steps = [1, 2, 5, 10, 50];
        let sigmas = [0.5, 1.0, 2.0, 4.0, 8.0];
        for &t in &steps {
            for w in sigmas.windows(2) {
                let lo = account_epsilon(&cfg(t, w[0], 1e-5)).unwrap().epsilon;
                let hi = account_epsilon(&cfg(t, w[1], 1e-5)).unwrap().epsilon;
                assert!(hi < lo);
            }
        }
        for &s in &sigmas {
            for w in steps.windows(2) {
                let a = account_epsilon(&cfg(w[0], s, 1e-5)).unwrap();
                let b = account_epsilon(&cfg(w[1], s, 1e-5)).unwrap();
                assert!(b.epsilon > a.epsilon);
            }
        }
        let doubled = account_epsilon(&cfg(2, 1.0, 1e-5)).unwrap();
        assert_eq!(doubled.rho, 1.0);
        let wide = account_epsilon(&cfg(1, 2.0, 1e-5)).unwrap();
        assert_eq!(wide.rho, 0.125);
        let clipped = account_epsilon(&DpConfig { clip_norm: 50.0, ..cfg(3, 1.5, 1e-6) }).unwrap();
        assert_eq!(clipped.epsilon, account_epsilon(&cfg(3, 1.5, 1e-6)).unwrap().epsilon);
    }

    #[test]
    fn sigma_calibration_inverts_accountant() {
        for (eps, delta, t) in [(1.0, 1e-6, 1), (0.5, 1e-5, 30), (8.0, 1e-3, 4)] {
            let sigma = sigma_for_epsilon(eps, delta, t);
            let acct = account_epsilon(&cfg(t, sigma, delta)).unwrap();
            assert!((acct.epsilon - eps).abs() < 1e-9, "{} vs {eps}", acct.epsilon);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(account_epsilon(&cfg(0, 1.0, 1e-5)).is_err());
        assert!(account_epsilon(&cfg(1, 0.0, 1e-5)).is_err());
        assert!(account_epsilon(&cfg(1, 1.0, 1.0)).is_err());
        assert!(account_epsilon(&DpConfig { clip_norm: -1.0, ..cfg(1, 1.0, 1e-5) }).is_err());
    }

    #[test]
    fn group_conversion_examples() {
        assert_eq!(
            group_epsilon(0.7, 1e-6, 1),
            GroupGuarantee::Bounded { epsilon: 0.7, delta: 1e-6 }
        );
        match group_epsilon(0.1, 1e-6, 3) {
            GroupGuarantee::Bounded { epsilon, delta } => {
                assert!((epsilon - 0.3).abs() < 1e-15);
                assert!((delta - 3.0 * 0.2f64.exp() * 1e-6).abs() < 1e-18);
                assert!((delta - 3.664e-6).abs() < 1e-9);
            }
            GroupGuarantee::Vacuous => panic!("should be bounded"),
        }
        // 20·e^19·1e-6 ≈ 3.57e3
        assert!(group_epsilon(1.0, 1e-6, 20).is_vacuous());
        assert!(group_epsilon(1.0, 1e-6, 1_000_000).is_vacuous());
    }

    #[test]
    fn power_bound_examples() {
        assert_eq!(test_power_bound(0.0, 0.0, 0.05).unwrap(), 0.05);
        assert!((test_power_bound(2f64.ln(), 0.0, 0.05).unwrap() - 0.10).abs() < 1e-15);
        assert_eq!(test_power_bound(10.0, 0.0, 0.05).unwrap(), 1.0);
        assert!(test_power_bound(1.0, 0.0, 0.0).is_err());
        assert_eq!(GroupGuarantee::Vacuous.test_power_bound(0.05).unwrap(), 1.0);
    }

    #[test]
    fn tiny_noise_tracks_non_private_descent() {
        let m = toy_manifest(40);
        let hyper = DpHyper { learning_rate: 0.5, l2: 1e-2 };
        let config = DpConfig {
            clip_norm: 5.0,
            noise_multiplier: 0.01,
            steps: 200,
            full_batch: true,
            delta: 1e-5,
            seed: 3,
        };
        let (model, acct) = dp_train(&m, &hyper, &config).unwrap();
        assert_eq!(acct.steps_consumed, 200);
        // oracle: plain full-batch gradient descent on the same objective
        let data = ShardData::whole(&m);
        let mut theta = vec![0.0; 6];
        for _ in 0..200 {
            let g = objective(&theta, &data, 1e-2).1;
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t -= 0.5 * gi;
            }
        }
        let gap = model
            .params()
            .iter()
            .zip(&theta)
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(gap < 0.1, "gap {gap}");
        assert_eq!(model.lineage.privacy, Some(acct));
        assert_eq!(model.lineage.gradient_evals, 200 * 40);
    }

    #[test]
    fn seeded_noise_is_reproducible_and_present() {
        let m = toy_manifest(30);
        let hyper = DpHyper::default();
        let config = DpConfig { steps: 20, ..DpConfig::default() };
        let (a, _) = dp_train(&m, &hyper, &config).unwrap();
        let (b, _) = dp_train(&m, &hyper, &config).unwrap();
        assert_eq!(a, b);
        let (c, _) = dp_train(&m, &hyper, &DpConfig { seed: 1, ..config }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    proptest! {
        #[test]
        fn clipping_bounds_norm(g in prop::collection::vec(-1e3f64..1e3, 1..20), c in 1e-3f64..10.0) {
            let mut g = g;
            clip_gradient(&mut g, c);
            prop_assert!(norm2(&g) <= c * (1.0 + 1e-12));
        }

        #[test]
        fn group_of_one_is_identity(eps in 0.0f64..5.0, delta in 1e-9f64..0.5) {
            prop_assert_eq!(group_epsilon(eps, delta, 1), GroupGuarantee::Bounded { epsilon: eps, delta });
        }
    }
}

//! End-to-end policy learning: split the data, fit the reward model on one
//! half, freeze the optimization instance on the other, initialize from the
//! LP relaxation, and run the progressive integer programming loop.
//!
//! The DR and IPW baselines ride the same machinery: DR disables the clipping
//! blocks (every keep indicator fixed to one), IPW additionally zeroes the
//! reward model.

use crate::data::{DataError, Dataset, LinearPolicy, RewardModel};
use crate::estimators::{self, DiagnosticBounds, EstimatorError};
use crate::hscop::{EstimatorMode, HscopError, HscopProblem};
use crate::mip::{self, BranchAndBound, MipError, SolverBackend};
use crate::pip::{self, PipConfig, PipError, PipTrace};
use crate::threshold::ThresholdError;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("split fraction must lie in (0, 1) (got {0})")]
    InvalidSplitFraction(f64),
    #[error("dataset too small to split (n = {0})")]
    TooSmallToSplit(usize),
    #[error("policy learning requires the full propensity model")]
    PropensityModelRequired,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Hscop(#[from] HscopError),
    #[error(transparent)]
    Mip(#[from] MipError),
    #[error(transparent)]
    Pip(#[from] PipError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
}

/// Which learner to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnMethod {
    Ocdrl,
    Drl,
    Ipwl,
}

impl LearnMethod {
    pub fn estimator_mode(self) -> EstimatorMode {
        match self {
            LearnMethod::Ocdrl => EstimatorMode::Ocdr,
            LearnMethod::Drl => EstimatorMode::Dr,
            LearnMethod::Ipwl => EstimatorMode::Ipw,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ocdrl" => Some(LearnMethod::Ocdrl),
            "drl" => Some(LearnMethod::Drl),
            "ipwl" => Some(LearnMethod::Ipwl),
            _ => None,
        }
    }
}

impl std::fmt::Display for LearnMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LearnMethod::Ocdrl => "ocdrl",
            LearnMethod::Drl => "drl",
            LearnMethod::Ipwl => "ipwl",
        };
        f.write_str(s)
    }
}

/// Reward-model choice for the plug-in fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RewardModelKind {
    /// Per-arm least squares with a small ridge penalty; arms without samples
    /// fall back to the global mean reward.
    RidgeLinear { ridge: f64 },
    /// Constant global mean.
    GlobalMean,
}

impl Default for RewardModelKind {
    fn default() -> Self {
        RewardModelKind::RidgeLinear { ridge: 1e-6 }
    }
}

/// Everything a learning run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub method: LearnMethod,
    pub split_fraction: f64,
    pub reward_model: RewardModelKind,
    pub pip: PipConfig,
    pub lambda: f64,
    /// `None` applies the instance default rule.
    pub epsilon: Option<f64>,
    pub beta_box: f64,
    pub seed: u64,
    /// Fixed base scores; zeros when absent.
    pub base_scores: Option<Vec<f64>>,
}

impl LearnerSpec {
    pub fn new(method: LearnMethod, seed: u64) -> Self {
        LearnerSpec {
            method,
            split_fraction: 0.5,
            reward_model: RewardModelKind::default(),
            pip: PipConfig::default(),
            lambda: 0.0,
            epsilon: None,
            beta_box: 10.0,
            seed,
            base_scores: None,
        }
    }
}

/// Output of a learning run.
#[derive(Debug)]
pub struct LearnedPolicy {
    pub method: LearnMethod,
    pub policy: LinearPolicy,
    /// Training objective achieved (regularized, on the optimization half).
    pub objective: f64,
    /// Closed-form threshold recomputed post hoc on the optimization half.
    pub tau: Option<f64>,
    pub diagnostics: DiagnosticBounds,
    pub trace: PipTrace,
}

/// JSON form of a learned policy; the trace is stored separately and linked
/// by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnedPolicyReport {
    pub method: LearnMethod,
    pub coefficients: Vec<Vec<f64>>,
    pub base_scores: Vec<f64>,
    pub objective: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub diagnostics: DiagnosticBounds,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_ref: Option<String>,
}

impl LearnedPolicy {
    pub fn to_report(&self, trace_ref: Option<String>) -> LearnedPolicyReport {
        LearnedPolicyReport {
            method: self.method,
            coefficients: self.policy.coefficients.clone(),
            base_scores: self.policy.base_scores.clone(),
            objective: self.objective,
            tau: self.tau,
            diagnostics: self.diagnostics,
            trace_ref,
        }
    }
}

/// Disjoint, exhaustive, seeded shuffle split. The first part holds
/// `floor(n * fraction)` rows, clamped so neither side is empty.
pub fn split_dataset(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), LearnError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(LearnError::InvalidSplitFraction(fraction));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(LearnError::TooSmallToSplit(n));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n1 = ((n as f64 * fraction).floor() as usize).clamp(1, n - 1);
    let mut first: Vec<usize> = order[..n1].to_vec();
    let mut second: Vec<usize> = order[n1..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok((dataset.subset(&first)?, dataset.subset(&second)?))
}

/// Per-arm plug-in fit of the expected reward, clamped to `[0, M]`.
pub fn fit_reward_model(dataset: &Dataset, kind: RewardModelKind) -> RewardModel {
    let bound = dataset.reward_bound();
    let global_mean = dataset.samples().iter().map(|s| s.reward).sum::<f64>()
        / dataset.len() as f64;
    match kind {
        RewardModelKind::GlobalMean => RewardModel::constant(global_mean, bound),
        RewardModelKind::RidgeLinear { ridge } => {
            let p = dataset.dim();
            let j_count = dataset.num_treatments();
            let mut coefficients = Vec::with_capacity(j_count);
            let mut intercepts = Vec::with_capacity(j_count);
            for arm in 1..=j_count {
                let rows: Vec<_> = dataset
                    .samples()
                    .iter()
                    .filter(|s| s.treatment == arm)
                    .collect();
                if rows.is_empty() {
                    coefficients.push(vec![0.0; p]);
                    intercepts.push(global_mean);
                    continue;
                }
                // Normal equations with ridge on the (1, x) design.
                let d = p + 1;
                let mut xtx = DMatrix::<f64>::zeros(d, d);
                let mut xty = DVector::<f64>::zeros(d);
                for s in &rows {
                    let mut z = Vec::with_capacity(d);
                    z.push(1.0);
                    z.extend_from_slice(&s.covariates);
                    for a in 0..d {
                        for b in 0..d {
                            xtx[(a, b)] += z[a] * z[b];
                        }
                        xty[a] += z[a] * s.reward;
                    }
                }
                for a in 0..d {
                    xtx[(a, a)] += ridge;
                }
                let theta = xtx
                    .clone()
                    .cholesky()
                    .map(|c| c.solve(&xty))
                    .unwrap_or_else(|| {
                        xtx.lu().solve(&xty).unwrap_or_else(|| DVector::zeros(d))
                    });
                intercepts.push(theta[0]);
                coefficients.push((1..d).map(|a| theta[a]).collect());
            }
            RewardModel::linear(coefficients, intercepts, bound)
        }
    }
}

/// Learns a policy per the configured method. The optimization instance is
/// built on the second half of the split; the reward model on the first.
pub fn learn_policy(dataset: &Dataset, spec: &LearnerSpec) -> Result<LearnedPolicy, LearnError> {
    if !dataset.has_propensity_model() {
        return Err(LearnError::PropensityModelRequired);
    }
    let (d1, d2) = split_dataset(dataset, spec.split_fraction, spec.seed)?;
    let model = match spec.method {
        LearnMethod::Ipwl => RewardModel::zero(dataset.reward_bound()),
        _ => fit_reward_model(&d1, spec.reward_model),
    };
    let problem = Arc::new(HscopProblem::build(
        &d2,
        &model,
        spec.method.estimator_mode(),
        spec.base_scores.clone(),
        spec.epsilon,
    )?);
    let mut pip_config = spec.pip.clone();
    pip_config.beta_box = spec.beta_box;
    pip_config.lambda = spec.lambda;

    // Initial point: beta component of the full program's LP relaxation.
    let full = mip::build_full_mip(&problem, spec.beta_box, spec.lambda)?;
    let backend = BranchAndBound::default();
    let relaxation = backend.solve_relaxation(&full)?;
    let beta0 = if relaxation.has_incumbent() {
        full.extract_beta(&relaxation.values)
    } else {
        vec![vec![0.0; problem.dim()]; problem.num_treatments()]
    };

    let (beta, trace) = pip::run_pip(&problem, &pip_config, &beta0)?;
    let policy = problem.policy_from_beta(&beta)?;
    let objective = trace
        .records
        .iter()
        .map(|r| r.objective)
        .fold(trace.initial_objective, f64::max);

    let (tau, diag_tau) = match spec.method {
        LearnMethod::Ocdrl => {
            let (_, tau, _) = estimators::ocdr_value(&d2, &policy, &model)?;
            (Some(tau), tau)
        }
        _ => {
            let ips = crate::data::counterfactual_ips(&d2, &policy)?;
            let max_c = ips.iter().cloned().fold(0.0, f64::max);
            (None, max_c)
        }
    };
    let diagnostics = estimators::diagnostic_bounds(&d2, &policy, diag_tau)?;
    Ok(LearnedPolicy {
        method: spec.method,
        policy,
        objective,
        tau,
        diagnostics,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use rand::{Rng, SeedableRng};

    fn random_dataset(n: usize, j_count: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        let mut model = Vec::new();
        for _ in 0..n {
            let covariates: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut probs: Vec<f64> = (0..j_count).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|q| *q /= total);
            let treatment = 1 + rng.random_range(0..j_count);
            samples.push(Sample {
                covariates,
                treatment,
                reward: rng.random_range(0.0..1.0),
                propensity: probs[treatment - 1],
            });
            model.push(probs);
        }
        Dataset::new(samples, j_count, 1.0, 0.01, Some(model)).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = random_dataset(10, 2, 2, 1);
        let (a, b) = split_dataset(&ds, 0.5, 7).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let (a2, b2) = split_dataset(&ds, 0.5, 7).unwrap();
        assert_eq!(a.samples(), a2.samples());
        assert_eq!(b.samples(), b2.samples());
        // Floor with a min-1 guard.
        let (a, b) = split_dataset(&ds, 0.99, 7).unwrap();
        assert_eq!((a.len(), b.len()), (9, 1));
        assert!(split_dataset(&ds, 0.0, 7).is_err());
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let ds = random_dataset(13, 2, 1, 2);
        let (a, b) = split_dataset(&ds, 0.4, 3).unwrap();
        assert_eq!(a.len() + b.len(), 13);
        // Rewards are random doubles: multiset union must match.
        let mut all: Vec<u64> = a
            .samples()
            .iter()
            .chain(b.samples())
            .map(|s| s.reward.to_bits())
            .collect();
        let mut orig: Vec<u64> = ds.samples().iter().map(|s| s.reward.to_bits()).collect();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
    }

    #[test]
    fn ridge_fit_recovers_exact_linear_rewards() {
        // Single-arm data with exact linear rewards, no noise.
        let mut samples = Vec::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..40 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..1.0)).collect();
            let y = 0.2 + 0.3 * x[0] + 0.1 * x[1];
            samples.push(Sample {
                covariates: x,
                treatment: 1,
                reward: y,
                propensity: 1.0,
            });
        }
        let ds = Dataset::new(samples, 1, 1.0, 0.5, None).unwrap();
        let model = fit_reward_model(&ds, RewardModelKind::default());
        for s in ds.samples() {
            assert!((model.predict(&s.covariates, 1) - s.reward).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_arm_falls_back_to_global_mean() {
        let ds = random_dataset(10, 2, 2, 5);
        // Rebuild with every treatment forced to arm 1.
        let samples: Vec<Sample> = ds
            .samples()
            .iter()
            .map(|s| Sample {
                treatment: 1,
                propensity: 0.5,
                ..s.clone()
            })
            .collect();
        let ds = Dataset::new(samples, 2, 1.0, 0.05, None).unwrap();
        let mean =
            ds.samples().iter().map(|s| s.reward).sum::<f64>() / ds.len() as f64;
        let model = fit_reward_model(&ds, RewardModelKind::default());
        assert!((model.predict(&[0.3, 0.4], 2) - mean.clamp(0.0, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn learn_requires_propensity_model() {
        let ds = random_dataset(8, 2, 2, 6);
        let samples = ds.samples().to_vec();
        let no_model = Dataset::new(samples, 2, 1.0, 0.01, None).unwrap();
        let spec = LearnerSpec::new(LearnMethod::Ocdrl, 1);
        assert!(matches!(
            learn_policy(&no_model, &spec),
            Err(LearnError::PropensityModelRequired)
        ));
    }

    #[test]
    fn single_training_sample_with_positive_residual_keeps_logged_arm() {
        // Split leaves one optimization-half sample; its logged arm has a
        // large positive residual, so the learned policy must match it.
        let mut samples = Vec::new();
        for i in 0..2 {
            samples.push(Sample {
                covariates: vec![0.5 + 0.1 * i as f64],
                treatment: 1,
                reward: 0.95,
                propensity: 0.4,
            });
        }
        let model_rows = vec![vec![0.4, 0.6]; 2];
        let ds = Dataset::new(samples, 2, 1.0, 0.05, Some(model_rows)).unwrap();
        let mut spec = LearnerSpec::new(LearnMethod::Ocdrl, 3);
        spec.reward_model = RewardModelKind::GlobalMean;
        spec.beta_box = 5.0;
        spec.pip.beta_box = 5.0;
        let learned = learn_policy(&ds, &spec).unwrap();
        let (_, d2) = split_dataset(&ds, 0.5, 3).unwrap();
        let s = &d2.samples()[0];
        assert_eq!(learned.policy.assign(&s.covariates), s.treatment);
    }

    #[test]
    fn exact_reward_model_reduces_to_dm_maximization() {
        // mu == Y exactly on the whole dataset: the objective is the DM sum,
        // maximized pointwise; with lambda = 0 the learned policy picks the
        // best mu arm on every optimization-half row.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut samples = Vec::new();
        let mut model_rows = Vec::new();
        for _ in 0..40 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(0.1..1.0)).collect();
            let arm = 1 + rng.random_range(0..2usize);
            let y = (0.2 + 0.5 * x[0]).min(1.0);
            samples.push(Sample {
                covariates: x,
                treatment: arm,
                reward: y,
                propensity: 0.5,
            });
            model_rows.push(vec![0.5, 0.5]);
        }
        let ds = Dataset::new(samples, 2, 1.0, 0.05, Some(model_rows)).unwrap();
        let mut spec = LearnerSpec::new(LearnMethod::Ocdrl, 9);
        spec.beta_box = 5.0;
        // The fitted ridge model on d1 reproduces mu(x) = 0.2 + 0.5 x1 for
        // both arms (rewards do not depend on the arm), so residuals on d2
        // vanish and the objective is pure DM.
        let learned = learn_policy(&ds, &spec).unwrap();
        let (_, d2) = split_dataset(&ds, 0.5, 9).unwrap();
        let model = fit_reward_model(&split_dataset(&ds, 0.5, 9).unwrap().0, spec.reward_model);
        let dm_max: f64 = d2
            .samples()
            .iter()
            .map(|s| {
                (1..=2)
                    .map(|j| model.predict(&s.covariates, j))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum();
        assert!(
            learned.objective >= dm_max - 1e-5,
            "objective {} below pointwise DM max {dm_max}",
            learned.objective
        );
    }

    #[test]
    fn estimator_specialization_identities() {
        let ds = random_dataset(10, 3, 2, 40);
        let model = fit_reward_model(&ds, RewardModelKind::default());
        let ocdr =
            HscopProblem::build(&ds, &model, EstimatorMode::Ocdr, None, None).unwrap();
        let dr = HscopProblem::build(&ds, &model, EstimatorMode::Dr, None, None).unwrap();
        // DR build = OCDR build with the clipping machinery forced off.
        assert_eq!(dr.m_star(), ds.len() + 1);
        assert_eq!(ocdr.mu(), dr.mu());
        assert_eq!(ocdr.resid_pos(), dr.resid_pos());
        // IPW build additionally zeroes the reward model.
        let zero = RewardModel::zero(1.0);
        let ipw = HscopProblem::build(&ds, &zero, EstimatorMode::Ipw, None, None).unwrap();
        assert!(ipw.mu().iter().flatten().all(|&m| m == 0.0));
        assert!(ipw
            .resid_pos()
            .iter()
            .zip(ipw.rewards())
            .all(|(&r, &y)| r == y));
        assert!(ipw.resid_neg().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn objective_at_least_lp_relaxation_start() {
        let ds = random_dataset(12, 2, 2, 41);
        let mut spec = LearnerSpec::new(LearnMethod::Ocdrl, 42);
        spec.beta_box = 5.0;
        let learned = learn_policy(&ds, &spec).unwrap();
        assert!(learned.objective >= learned.trace.initial_objective - 1e-9);
        assert!(learned.trace.is_monotone());
        assert!(learned.tau.is_some());
    }

    #[test]
    fn same_seed_reproduces_identical_report() {
        let ds = random_dataset(10, 2, 2, 50);
        let mut spec = LearnerSpec::new(LearnMethod::Drl, 51);
        spec.beta_box = 5.0;
        let a = learn_policy(&ds, &spec).unwrap();
        let b = learn_policy(&ds, &spec).unwrap();
        let ja = serde_json::to_string(&a.to_report(None)).unwrap();
        let jb = serde_json::to_string(&b.to_report(None)).unwrap();
        assert_eq!(ja, jb);
        assert!(a.tau.is_none(), "DR reports no clipping threshold");
    }
}

//! Policy-value estimators (DM, IPW, DR, CDR, OCDR), the empirical MSE
//! objective over the clipping-threshold grid, and the suboptimality-bound
//! diagnostics.
//!
//! IPW is deliberately not a separate code path: it is CDR with a zero reward
//! model and the threshold pinned at `1/eta`. One evaluation engine, fewer
//! divergent bugs.

use crate::data::{counterfactual_ips, DataError, Dataset, LinearPolicy, RewardModel};
use crate::threshold::{
    self, perturb_for_uniqueness, problem3_objective, SortedIpsView, SuffixSums, ThresholdError,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("clipping threshold must be nonnegative (got {0})")]
    NegativeTau(f64),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Dm,
    Ipw,
    Dr,
    Cdr,
    Ocdr,
}

/// Per-sample scores; the value estimate is their mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreVector {
    pub kind: EstimatorKind,
    /// Clipping threshold used, when the estimator has one.
    pub tau: Option<f64>,
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn value(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

/// The empirical MSE objective tabulated at every candidate threshold
/// `{C_(0)=0, C_(1), ..., C_(N)}` (perturbed, ascending).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MseObjective {
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
}

impl MseObjective {
    /// Grid candidate with the smallest objective value.
    pub fn argmin(&self) -> (f64, f64) {
        let mut best = 0;
        for i in 1..self.values.len() {
            if self.values[i] < self.values[best] {
                best = i;
            }
        }
        (self.taus[best], self.values[best])
    }
}

/// The three computable suboptimality-bound quantities for a policy at a
/// clipping threshold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DiagnosticBounds {
    pub b_hat: f64,
    pub b_tilde: f64,
    pub delta: f64,
}

impl DiagnosticBounds {
    /// Largest of the three square roots.
    pub fn a_value(&self) -> f64 {
        self.b_hat
            .sqrt()
            .max(self.b_tilde.sqrt())
            .max(self.delta.sqrt())
    }
}

/// JSON-serializable estimator report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub estimator: EstimatorKind,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_sample_scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticBounds>,
}

/// Direct-method value: mean of the reward model at the assigned arms.
pub fn dm_value(dataset: &Dataset, policy: &LinearPolicy, model: &RewardModel) -> f64 {
    let sum: f64 = dataset
        .samples()
        .iter()
        .map(|s| model.predict(&s.covariates, policy.assign(&s.covariates)))
        .sum();
    sum / dataset.len() as f64
}

/// Clipped doubly robust scores from raw parts. `mu_g[s]` is the reward-model
/// prediction at the arm the policy assigns to sample `s`.
pub fn cdr_scores_from_parts(
    ips: &[f64],
    matched: &[bool],
    mu_g: &[f64],
    rewards: &[f64],
    tau: f64,
    kind: EstimatorKind,
) -> ScoreVector {
    let scores = ips
        .iter()
        .zip(matched)
        .zip(mu_g.iter().zip(rewards))
        .map(|((&c, &m), (&mu, &y))| {
            if m && c <= tau {
                mu + c * (y - mu)
            } else {
                mu
            }
        })
        .collect();
    ScoreVector {
        kind,
        tau: Some(tau),
        scores,
    }
}

fn policy_parts(
    dataset: &Dataset,
    policy: &LinearPolicy,
    model: &RewardModel,
) -> Result<(Vec<f64>, Vec<bool>, Vec<f64>, Vec<f64>), EstimatorError> {
    let ips = counterfactual_ips(dataset, policy)?;
    let mut matched = Vec::with_capacity(dataset.len());
    let mut mu_g = Vec::with_capacity(dataset.len());
    let mut rewards = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        let arm = policy.assign(&s.covariates);
        matched.push(arm == s.treatment);
        mu_g.push(model.predict(&s.covariates, arm));
        rewards.push(s.reward);
    }
    Ok((ips, matched, mu_g, rewards))
}

/// Clipped doubly robust scores at threshold `tau`. With `tau = 0` this is the
/// DM score vector; with `tau >= max_s C_s` it is the DR score vector.
pub fn cdr_scores(
    dataset: &Dataset,
    policy: &LinearPolicy,
    model: &RewardModel,
    tau: f64,
) -> Result<ScoreVector, EstimatorError> {
    if tau < 0.0 {
        return Err(EstimatorError::NegativeTau(tau));
    }
    let (ips, matched, mu_g, rewards) = policy_parts(dataset, policy, model)?;
    Ok(cdr_scores_from_parts(
        &ips,
        &matched,
        &mu_g,
        &rewards,
        tau,
        EstimatorKind::Cdr,
    ))
}

/// DR scores: CDR with clipping disabled.
pub fn dr_scores(
    dataset: &Dataset,
    policy: &LinearPolicy,
    model: &RewardModel,
) -> Result<ScoreVector, EstimatorError> {
    let (ips, matched, mu_g, rewards) = policy_parts(dataset, policy, model)?;
    let tau = ips.iter().cloned().fold(0.0, f64::max);
    let mut v = cdr_scores_from_parts(&ips, &matched, &mu_g, &rewards, tau, EstimatorKind::Dr);
    v.tau = None;
    Ok(v)
}

/// IPW scores: CDR with a zero reward model and `tau = 1/eta`.
pub fn ipw_scores(dataset: &Dataset, policy: &LinearPolicy) -> Result<ScoreVector, EstimatorError> {
    let zero = RewardModel::zero(dataset.reward_bound());
    let (ips, matched, mu_g, rewards) = policy_parts(dataset, policy, &zero)?;
    let tau = 1.0 / dataset.overlap_floor();
    let mut v = cdr_scores_from_parts(&ips, &matched, &mu_g, &rewards, tau, EstimatorKind::Ipw);
    v.tau = None;
    Ok(v)
}

/// OCDR from raw parts: perturbs the IPS, computes the closed-form optimal
/// threshold, and evaluates the clipped scores at it. Returns
/// `(value, tau^, scores)`.
pub fn ocdr_from_parts(
    ips: &[f64],
    matched: &[bool],
    mu_g: &[f64],
    rewards: &[f64],
) -> Result<(f64, f64, ScoreVector), EstimatorError> {
    let perturbed = perturb_for_uniqueness(ips)?;
    ocdr_from_perturbed_parts(&perturbed, matched, mu_g, rewards)
}

/// OCDR for inputs whose IPS vector has already been perturbed (the
/// Heaviside-composite problem carries a frozen perturbed vector and must not
/// jitter it a second time).
pub fn ocdr_from_perturbed_parts(
    perturbed: &[f64],
    matched: &[bool],
    mu_g: &[f64],
    rewards: &[f64],
) -> Result<(f64, f64, ScoreVector), EstimatorError> {
    let view = SortedIpsView::build(perturbed, matched)?;
    let sums = SuffixSums::from_view(&view);
    let tau = threshold::optimal_threshold(&view, &sums)?;
    let scores = cdr_scores_from_parts(perturbed, matched, mu_g, rewards, tau, EstimatorKind::Ocdr);
    log_weight_histogram(perturbed);
    Ok((scores.value(), tau, scores))
}

/// Optimized clipped doubly robust estimate: the closed-form MSE-optimal
/// threshold for this policy, then CDR at that threshold.
pub fn ocdr_value(
    dataset: &Dataset,
    policy: &LinearPolicy,
    model: &RewardModel,
) -> Result<(f64, f64, ScoreVector), EstimatorError> {
    let (ips, matched, mu_g, rewards) = policy_parts(dataset, policy, model)?;
    ocdr_from_parts(&ips, &matched, &mu_g, &rewards)
}

/// Tabulates the MSE objective at every candidate threshold (perturbed grid).
pub fn mse_objective(
    dataset: &Dataset,
    policy: &LinearPolicy,
) -> Result<MseObjective, EstimatorError> {
    let ips = counterfactual_ips(dataset, policy)?;
    let matched: Vec<bool> = dataset
        .samples()
        .iter()
        .map(|s| policy.assign(&s.covariates) == s.treatment)
        .collect();
    let perturbed = perturb_for_uniqueness(&ips)?;
    mse_objective_from_parts(&perturbed, &matched)
}

/// Grid tabulation from already-perturbed parts.
pub fn mse_objective_from_parts(
    perturbed_ips: &[f64],
    matched: &[bool],
) -> Result<MseObjective, EstimatorError> {
    let mut taus: Vec<f64> = perturbed_ips.to_vec();
    taus.sort_by(f64::total_cmp);
    taus.insert(0, 0.0);
    let values = taus
        .iter()
        .map(|&t| problem3_objective(perturbed_ips, matched, t))
        .collect();
    Ok(MseObjective { taus, values })
}

/// The three bound quantities at threshold `tau`, straight from their
/// defining formulas (no suffix-sum machinery).
pub fn diagnostic_bounds(
    dataset: &Dataset,
    policy: &LinearPolicy,
    tau: f64,
) -> Result<DiagnosticBounds, EstimatorError> {
    let ips = counterfactual_ips(dataset, policy)?;
    let matched: Vec<bool> = dataset
        .samples()
        .iter()
        .map(|s| policy.assign(&s.covariates) == s.treatment)
        .collect();
    Ok(diagnostic_bounds_from_parts(
        &ips,
        &matched,
        tau,
        dataset.reward_bound(),
        dataset.len(),
    ))
}

pub fn diagnostic_bounds_from_parts(
    ips: &[f64],
    matched: &[bool],
    tau: f64,
    reward_bound: f64,
    n: usize,
) -> DiagnosticBounds {
    let nf = n as f64;
    let m2 = reward_bound * reward_bound;
    let clipped = ips.iter().filter(|&&c| c > tau).count() as f64;
    let hat_sum: f64 = ips
        .iter()
        .zip(matched)
        .filter(|(&c, &m)| m && c <= tau)
        .map(|(&c, _)| c * c)
        .sum();
    let tilde_sum: f64 = ips.iter().filter(|&&c| c <= tau).sum();
    DiagnosticBounds {
        b_hat: m2 / (nf * nf) * (clipped * clipped + hat_sum),
        b_tilde: m2 / (nf * nf) * (clipped * clipped + tilde_sum),
        delta: m2 * (tau / nf).powf(1.5),
    }
}

/// Coarse histogram of the inverse propensity weights, logged at debug level.
/// This is the only exposure of the variance-bracket diagnostic: the bracket
/// constants themselves are not computable from data.
fn log_weight_histogram(ips: &[f64]) {
    if !log::log_enabled!(log::Level::Debug) {
        return;
    }
    let mut buckets = std::collections::BTreeMap::new();
    for &c in ips {
        let exp = c.log2().floor() as i32;
        *buckets.entry(exp).or_insert(0usize) += 1;
    }
    for (exp, count) in buckets {
        log::debug!(
            "ips weight histogram: [{}, {}): {count}",
            2f64.powi(exp),
            2f64.powi(exp + 1)
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    /// Dataset where every policy is measurable: uniform full propensities.
    fn toy_dataset(rewards: &[f64], treatments: &[usize], j: usize) -> Dataset {
        let n = rewards.len();
        let samples: Vec<Sample> = (0..n)
            .map(|i| Sample {
                covariates: vec![i as f64 / n as f64, 1.0 - i as f64 / n as f64],
                treatment: treatments[i],
                reward: rewards[i],
                propensity: 1.0 / j as f64,
            })
            .collect();
        let model = vec![vec![1.0 / j as f64; j]; n];
        Dataset::new(samples, j, 1.0, 0.05, Some(model)).unwrap()
    }

    /// Two samples, both matched under arm-1, with chosen IPS values (2, 4).
    fn two_sample_fixture() -> (Dataset, LinearPolicy, RewardModel) {
        let samples = vec![
            Sample {
                covariates: vec![0.1],
                treatment: 1,
                reward: 1.0,
                propensity: 0.5,
            },
            Sample {
                covariates: vec![0.9],
                treatment: 1,
                reward: 0.0,
                propensity: 0.25,
            },
        ];
        let model = Some(vec![vec![0.5, 0.5], vec![0.25, 0.75]]);
        let ds = Dataset::new(samples, 2, 1.0, 0.05, model).unwrap();
        let policy = LinearPolicy::constant(1, 2, 1);
        let mu = RewardModel::constant(0.5, 1.0);
        (ds, policy, mu)
    }

    #[test]
    fn dm_constant_model() {
        let ds = toy_dataset(&[0.3, 0.7, 0.2], &[1, 2, 1], 2);
        let mu = RewardModel::constant(0.5, 1.0);
        for arm in 1..=2 {
            let p = LinearPolicy::constant(arm, 2, 2);
            assert_eq!(dm_value(&ds, &p, &mu), 0.5);
        }
    }

    #[test]
    fn dm_two_point_mean() {
        let ds = toy_dataset(&[0.0, 0.0], &[1, 1], 2);
        let mu = RewardModel::from_fn(|x, _| if x[0] < 0.25 { 0.2 } else { 0.8 }, 1.0, "step");
        let p = LinearPolicy::constant(1, 2, 2);
        assert!((dm_value(&ds, &p, &mu) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cdr_hand_example() {
        let (ds, policy, mu) = two_sample_fixture();
        let v = cdr_scores(&ds, &policy, &mu, 2.0).unwrap();
        assert_eq!(v.scores, vec![1.5, 0.5]);
        assert!((v.value() - 1.0).abs() < 1e-12);

        let dm = cdr_scores(&ds, &policy, &mu, 0.0).unwrap();
        assert_eq!(dm.scores, vec![0.5, 0.5]);

        let dr = cdr_scores(&ds, &policy, &mu, 4.0).unwrap();
        assert_eq!(dr.scores, vec![1.5, -1.5]);
    }

    #[test]
    fn cdr_rejects_negative_tau() {
        let (ds, policy, mu) = two_sample_fixture();
        assert!(matches!(
            cdr_scores(&ds, &policy, &mu, -1.0),
            Err(EstimatorError::NegativeTau(_))
        ));
    }

    #[test]
    fn interpolation_identity_exact() {
        let (ds, policy, mu) = two_sample_fixture();
        let ips = counterfactual_ips(&ds, &policy).unwrap();
        let max_c = ips.iter().cloned().fold(0.0, f64::max);
        let dm_scores: Vec<f64> = ds
            .samples()
            .iter()
            .map(|s| mu.predict(&s.covariates, policy.assign(&s.covariates)))
            .collect();
        assert_eq!(cdr_scores(&ds, &policy, &mu, 0.0).unwrap().scores, dm_scores);
        assert_eq!(
            cdr_scores(&ds, &policy, &mu, max_c).unwrap().scores,
            dr_scores(&ds, &policy, &mu).unwrap().scores
        );
    }

    #[test]
    fn ocdr_two_sample_instance() {
        // IPS (1.1, 3.7), both matched: tau^ = 1.1, second correction zeroed.
        let mu_g = [0.5, 0.5];
        let y = [1.0, 0.0];
        let (value, tau, scores) =
            ocdr_from_parts(&[1.1, 3.7], &[true, true], &mu_g, &y).unwrap();
        assert!((tau - 1.1).abs() < 1e-6);
        assert!((scores.scores[0] - (0.5 + 1.1 * 0.5)).abs() < 1e-6);
        assert!((scores.scores[1] - 0.5).abs() < 1e-12);
        assert!((value - (scores.scores[0] + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ocdr_no_matches_is_dm() {
        let mu_g = [0.3, 0.6];
        let y = [1.0, 0.0];
        let (value, tau, _) = ocdr_from_parts(&[1.5, 2.5], &[false, false], &mu_g, &y).unwrap();
        assert!((tau - 2.5).abs() < 1e-6);
        assert!((value - 0.45).abs() < 1e-12);
    }

    #[test]
    fn ocdr_single_sample_clips_everything() {
        // 2 C^2 = 1.62 >= 1 so m* = 1; objective prefers tau = 0 (1 < 1.62).
        let (value, tau, _) = ocdr_from_parts(&[0.9_f64], &[true], &[0.5], &[1.0]).unwrap();
        assert_eq!(tau, 0.0);
        assert_eq!(value, 0.5);
    }

    #[test]
    fn mse_objective_two_sample_grid() {
        let obj = mse_objective_from_parts(&[1.1, 3.7], &[true, true]).unwrap();
        assert_eq!(obj.taus.len(), 3);
        assert!((obj.values[0] - 1.0).abs() < 1e-9);
        assert!((obj.values[1] - 0.855).abs() < 1e-9);
        assert!((obj.values[2] - 7.45).abs() < 1e-9);
        let (tau, _) = obj.argmin();
        assert!((tau - 1.1).abs() < 1e-9);
    }

    #[test]
    fn mse_objective_endpoints() {
        let obj = mse_objective_from_parts(&[1.3, 2.6, 5.0], &[true, false, true]).unwrap();
        // tau = 0: bias term 1, variance 0.
        assert!((obj.values[0] - 1.0).abs() < 1e-9);
        // tau = C_(N): bias term 0.
        let last = *obj.values.last().unwrap();
        let expected = 2.0 / 9.0 * (1.3f64.powi(2) + 5.0f64.powi(2));
        assert!((last - expected).abs() < 1e-6);
    }

    #[test]
    fn diagnostics_formulas() {
        let ips = [1.1, 3.7];
        let matched = [true, true];
        // tau >= max C, all matched: B_hat = (M^2/N^2) sum C^2.
        let d = diagnostic_bounds_from_parts(&ips, &matched, 4.0, 1.0, 2);
        assert!((d.b_hat - (1.21 + 13.69) / 4.0).abs() < 1e-12);
        // tau = 0: B_hat = B_tilde = M^2, Delta = 0.
        let d0 = diagnostic_bounds_from_parts(&ips, &matched, 0.0, 1.0, 2);
        assert_eq!(d0.b_hat, 1.0);
        assert_eq!(d0.b_tilde, 1.0);
        assert_eq!(d0.delta, 0.0);
        // tau = 1.1, M = 1: B_hat = (1/4)(1 + 1.21).
        let d1 = diagnostic_bounds_from_parts(&ips, &matched, 1.1, 1.0, 2);
        assert!((d1.b_hat - 0.5525).abs() < 1e-12);
    }

    #[test]
    fn b_hat_matches_problem3_objective_scaling() {
        // B_hat / M^2 = bias^2 term + half the variance term of the MSE
        // objective; the two sides come from independent code paths.
        let ips = [1.4, 2.9, 7.7, 1.05];
        let matched = [true, false, true, true];
        for tau in [0.0, 1.05, 1.4, 2.9, 7.7, 10.0] {
            let d = diagnostic_bounds_from_parts(&ips, &matched, tau, 1.0, ips.len());
            let obj = problem3_objective(&ips, &matched, tau);
            let n = ips.len() as f64;
            let bias = (ips.iter().filter(|&&c| c > tau).count() as f64 / n).powi(2);
            let variance = obj - bias;
            assert!((d.b_hat - (bias + 0.5 * variance)).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_argmin_matches_threshold_module() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(1..=200);
            let ips: Vec<f64> = (0..n).map(|_| 1.0 / rng.random_range(0.02..=1.0)).collect();
            let matched: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            let perturbed = perturb_for_uniqueness(&ips).unwrap();
            let view = SortedIpsView::build(&perturbed, &matched).unwrap();
            let sums = SuffixSums::from_view(&view);
            let tau = threshold::optimal_threshold(&view, &sums).unwrap();
            let obj = mse_objective_from_parts(&perturbed, &matched).unwrap();
            let at_tau = problem3_objective(&perturbed, &matched, tau);
            for (i, &v) in obj.values.iter().enumerate() {
                assert!(
                    at_tau <= v + 1e-15,
                    "tau-hat must minimize the grid (candidate {i})"
                );
            }
        }
    }

    #[test]
    fn ocdr_permutation_invariance() {
        let ips = [2.0, 5.0, 1.2, 3.3];
        let matched = [true, false, true, true];
        let mu_g = [0.4, 0.1, 0.9, 0.3];
        let y = [1.0, 0.0, 0.2, 0.8];
        let (v1, ..) = ocdr_from_parts(&ips, &matched, &mu_g, &y).unwrap();
        let perm = [2usize, 0, 3, 1];
        let pick = |arr: &[f64]| -> Vec<f64> { perm.iter().map(|&i| arr[i]).collect() };
        let pickb = |arr: &[bool]| -> Vec<bool> { perm.iter().map(|&i| arr[i]).collect() };
        let (v2, ..) =
            ocdr_from_parts(&pick(&ips), &pickb(&matched), &pick(&mu_g), &pick(&y)).unwrap();
        // Identical up to the index-scaled perturbation jitter.
        assert!((v1 - v2).abs() < 1e-7, "{v1} vs {v2}");
    }
}

//! Closed-form computation of the MSE-optimal clipping threshold.
//!
//! Pipeline: perturb the inverse propensity scores so that no small subset of
//! `{2 C_s^2}` sums to an integer (which makes the minimizer unique), sort
//! ascending with `C_(0) = 0` prepended, accumulate the suffix sums `Phi_m` in
//! one reverse pass, prune candidates below the index `m*`, and return the
//! grid value whose suffix sum is the strict minimum. [`oracle_threshold`]
//! brute-forces the original piecewise-constant objective over the full grid
//! and is the independent check for the closed form.

use crate::data::{counterfactual_ips, DataError, Dataset, LinearPolicy};
use thiserror::Error;

/// Base relative jitter for the uniqueness perturbation.
const PERTURB_EPS: f64 = 1e-9;
/// Distance-to-integer below which a subset sum counts as integer.
const INTEGER_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ThresholdError {
    #[error("uniqueness still violated after 3 perturbation rounds")]
    PerturbationFailed,
    #[error("non-unique minimum among suffix sums (uniqueness assumption violated)")]
    NonUniqueMinimum,
    #[error("tie among brute-force minimizers: tau = {tau_a} and tau = {tau_b}")]
    TieAmongMinimizers { tau_a: f64, tau_b: f64 },
    #[error("ips and matched vectors have different lengths ({ips} vs {matched})")]
    LengthMismatch { ips: usize, matched: usize },
    #[error("inverse propensity score {0} is not a positive finite value")]
    InvalidIps(f64),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Deterministic index-scaled jitter `C_s <- C_s * (1 + s * eps)` making
/// singleton and pairwise sums of `{2 C_s^2}` non-integer; doubles `eps` and
/// retries up to 3 rounds.
pub fn perturb_for_uniqueness(ips: &[f64]) -> Result<Vec<f64>, ThresholdError> {
    for &c in ips {
        if !(c > 0.0) || !c.is_finite() {
            return Err(ThresholdError::InvalidIps(c));
        }
    }
    let mut eps = PERTURB_EPS;
    for _ in 0..3 {
        let out: Vec<f64> = ips
            .iter()
            .enumerate()
            .map(|(i, &c)| c * (1.0 + (i as f64 + 1.0) * eps))
            .collect();
        if subset_sums_generic(&out) {
            return Ok(out);
        }
        eps *= 2.0;
    }
    Err(ThresholdError::PerturbationFailed)
}

/// Checks singleton and pairwise sums of `{2 c^2}` for integrality.
/// Exhaustive subset checking is exponential; generic perturbation plus these
/// low-order checks is the documented compromise.
fn subset_sums_generic(c: &[f64]) -> bool {
    let v: Vec<f64> = c.iter().map(|&x| 2.0 * x * x).collect();
    let near_int = |x: f64| (x - x.round()).abs() < INTEGER_TOL;
    if v.iter().any(|&x| near_int(x)) {
        return false;
    }
    for i in 0..v.len() {
        for j in (i + 1)..v.len() {
            if near_int(v[i] + v[j]) {
                return false;
            }
        }
    }
    true
}

/// Samples reindexed by ascending inverse propensity score.
///
/// Rank `s` (1-based) holds the `s`-th smallest IPS; `C_(0) = 0` is implicit.
#[derive(Debug, Clone)]
pub struct SortedIpsView {
    /// `perm[s-1]` = original index of the sample at sorted rank `s`.
    perm: Vec<usize>,
    /// Sorted IPS values `C_(1) <= ... <= C_(N)`.
    c: Vec<f64>,
    /// Match flags `1{g(X^(s)) = D_(s)}` in sorted order.
    matched: Vec<bool>,
    /// `phi_(s) = C_(s)^2 * matched_(s)`.
    phi: Vec<f64>,
    /// `phi~_(s) = C_(s)^2`.
    phi_tilde: Vec<f64>,
}

impl SortedIpsView {
    pub fn build(perturbed_ips: &[f64], matched: &[bool]) -> Result<Self, ThresholdError> {
        if perturbed_ips.len() != matched.len() {
            return Err(ThresholdError::LengthMismatch {
                ips: perturbed_ips.len(),
                matched: matched.len(),
            });
        }
        let mut perm: Vec<usize> = (0..perturbed_ips.len()).collect();
        perm.sort_by(|&a, &b| {
            perturbed_ips[a]
                .total_cmp(&perturbed_ips[b])
                .then(a.cmp(&b))
        });
        let c: Vec<f64> = perm.iter().map(|&i| perturbed_ips[i]).collect();
        let matched: Vec<bool> = perm.iter().map(|&i| matched[i]).collect();
        let phi_tilde: Vec<f64> = c.iter().map(|&x| x * x).collect();
        let phi: Vec<f64> = phi_tilde
            .iter()
            .zip(&matched)
            .map(|(&x, &m)| if m { x } else { 0.0 })
            .collect();
        Ok(Self {
            perm,
            c,
            matched,
            phi,
            phi_tilde,
        })
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    /// Sorted rank -> original sample index.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// `C_(m)` for `m` in `0..=N` (`C_(0) = 0`).
    pub fn c_at(&self, m: usize) -> f64 {
        if m == 0 {
            0.0
        } else {
            self.c[m - 1]
        }
    }

    pub fn sorted_c(&self) -> &[f64] {
        &self.c
    }

    pub fn matched(&self) -> &[bool] {
        &self.matched
    }

    pub fn phi_values(&self) -> &[f64] {
        &self.phi
    }
}

/// Suffix sums `Phi_m = sum_{s=m}^N (2(N-s)+1 - 2 phi_(s))` for `m = 1..=N+1`
/// (with `Phi_{N+1} = 0`) and the pruning index `m*`.
#[derive(Debug, Clone)]
pub struct SuffixSums {
    /// `phi_suffix[m-1] = Phi_m`; the last entry is `Phi_{N+1} = 0`.
    phi_suffix: Vec<f64>,
    /// `m* = min{m : 2 phi~_(m) >= 2(N-m)+1}`, `None` when the set is empty.
    m_star: Option<usize>,
}

impl SuffixSums {
    /// Single reverse pass over the sorted view.
    pub fn from_view(view: &SortedIpsView) -> Self {
        let n = view.len();
        let mut phi_suffix = vec![0.0; n + 1];
        for m in (1..=n).rev() {
            let coeff = (2 * (n - m) + 1) as f64 - 2.0 * view.phi[m - 1];
            phi_suffix[m - 1] = coeff + phi_suffix[m];
        }
        let m_star = (1..=n).find(|&m| 2.0 * view.phi_tilde[m - 1] >= (2 * (n - m) + 1) as f64);
        Self { phi_suffix, m_star }
    }

    /// `Phi_m` for `m` in `1..=N+1`.
    pub fn phi(&self, m: usize) -> f64 {
        self.phi_suffix[m - 1]
    }

    pub fn m_star(&self) -> Option<usize> {
        self.m_star
    }

    pub fn len(&self) -> usize {
        self.phi_suffix.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Strict argmin of `Phi_t` over `t` in `lo..=N+1`; errors on an exact tie.
fn strict_argmin(sums: &SuffixSums, lo: usize) -> Result<usize, ThresholdError> {
    let hi = sums.len() + 1;
    let mut best_t = lo;
    let mut best = sums.phi(lo);
    let mut tied = false;
    for t in (lo + 1)..=hi {
        let v = sums.phi(t);
        if v < best {
            best = v;
            best_t = t;
            tied = false;
        } else if v == best {
            tied = true;
        }
    }
    if tied {
        return Err(ThresholdError::NonUniqueMinimum);
    }
    Ok(best_t)
}

/// Pruned closed form: the minimum is searched over `t in [m*, N+1]`;
/// `tau^ = C_(t*-1)`. When the pruning set is empty this falls back to the
/// unpruned search (whose minimum then sits at `Phi_{N+1} = 0`).
pub fn optimal_threshold(
    view: &SortedIpsView,
    sums: &SuffixSums,
) -> Result<f64, ThresholdError> {
    Ok(view.c_at(optimal_threshold_rank(sums)? - 1))
}

/// The argmin index `t*` used by [`optimal_threshold`]; `tau^ = C_(t*-1)`.
pub fn optimal_threshold_rank(sums: &SuffixSums) -> Result<usize, ThresholdError> {
    match sums.m_star() {
        Some(m_star) => strict_argmin(sums, m_star),
        None => strict_argmin(sums, 1),
    }
}

/// Unpruned form: compares `Phi_{m+1}` against every `t` in `[1, N+1]`.
pub fn optimal_threshold_unpruned(
    view: &SortedIpsView,
    sums: &SuffixSums,
) -> Result<f64, ThresholdError> {
    Ok(view.c_at(strict_argmin(sums, 1)? - 1))
}

/// The sample-average MSE objective at clipping threshold `tau`:
/// bias term `((1/N) #\{C_s > tau\})^2` plus variance term
/// `(2/N^2) sum matched_s C_s^2 1{C_s <= tau}`. Order-free.
pub fn problem3_objective(ips: &[f64], matched: &[bool], tau: f64) -> f64 {
    let n = ips.len() as f64;
    let clipped = ips.iter().filter(|&&c| c > tau).count() as f64;
    let kept: f64 = ips
        .iter()
        .zip(matched)
        .filter(|(&c, &m)| m && c <= tau)
        .map(|(&c, _)| c * c)
        .sum();
    (clipped / n).powi(2) + 2.0 * kept / (n * n)
}

/// Brute-force minimizer of the MSE objective over the candidate grid
/// `{0, C_(1), ..., C_(N)}`. Independent of the suffix-sum path; ties are
/// reported as errors.
pub fn oracle_threshold(ips: &[f64], matched: &[bool]) -> Result<f64, ThresholdError> {
    if ips.len() != matched.len() {
        return Err(ThresholdError::LengthMismatch {
            ips: ips.len(),
            matched: matched.len(),
        });
    }
    let mut grid: Vec<f64> = ips.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.insert(0, 0.0);
    let mut best_tau = grid[0];
    let mut best = problem3_objective(ips, matched, grid[0]);
    let mut tie: Option<f64> = None;
    for &tau in &grid[1..] {
        let v = problem3_objective(ips, matched, tau);
        if v < best {
            best = v;
            best_tau = tau;
            tie = None;
        } else if v == best && tau != best_tau {
            tie = Some(tau);
        }
    }
    if let Some(other) = tie {
        return Err(ThresholdError::TieAmongMinimizers {
            tau_a: best_tau,
            tau_b: other,
        });
    }
    Ok(best_tau)
}

/// Counterfactual IPS for `policy`, perturbed, sorted, and accumulated.
pub fn build_suffix_sums(
    dataset: &Dataset,
    policy: &LinearPolicy,
) -> Result<(SortedIpsView, SuffixSums), ThresholdError> {
    let ips = counterfactual_ips(dataset, policy)?;
    let perturbed = perturb_for_uniqueness(&ips)?;
    let matched: Vec<bool> = dataset
        .samples()
        .iter()
        .map(|s| policy.assign(&s.covariates) == s.treatment)
        .collect();
    let view = SortedIpsView::build(&perturbed, &matched)?;
    let sums = SuffixSums::from_view(&view);
    Ok((view, sums))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn view(c: &[f64], matched: &[bool]) -> (SortedIpsView, SuffixSums) {
        let v = SortedIpsView::build(c, matched).unwrap();
        let s = SuffixSums::from_view(&v);
        (v, s)
    }

    #[test]
    fn perturb_degenerate_duplicates() {
        let out = perturb_for_uniqueness(&[2.0, 2.0]).unwrap();
        assert_ne!(out[0], out[1]);
        for &c in &out {
            let v = 2.0 * c * c;
            assert!((v - v.round()).abs() >= 1e-12);
        }
    }

    #[test]
    fn perturb_generic_input_nearly_unchanged() {
        let input = [1.1, 3.7];
        let out = perturb_for_uniqueness(&input).unwrap();
        for (a, b) in input.iter().zip(&out) {
            assert!(((a - b) / a).abs() < 1e-8);
        }
    }

    #[test]
    fn perturb_triple_tie_strictly_increasing() {
        let out = perturb_for_uniqueness(&[1.0, 1.0, 1.0]).unwrap();
        assert!(out[0] < out[1] && out[1] < out[2]);
    }

    #[test]
    fn perturb_rejects_nonpositive_ips() {
        assert!(matches!(
            perturb_for_uniqueness(&[0.0]),
            Err(ThresholdError::InvalidIps(_))
        ));
        assert!(matches!(
            perturb_for_uniqueness(&[f64::NAN]),
            Err(ThresholdError::InvalidIps(_))
        ));
    }

    #[test]
    fn suffix_sums_two_matched_samples() {
        let (_, sums) = view(&[1.1, 3.7], &[true, true]);
        assert!((sums.phi(1) - -25.8).abs() < 1e-9);
        assert!((sums.phi(2) - -26.38).abs() < 1e-9);
        assert_eq!(sums.phi(3), 0.0);
        assert_eq!(sums.m_star(), Some(2));
    }

    #[test]
    fn suffix_sums_no_matches_are_squares() {
        let n = 6;
        let c: Vec<f64> = (0..n).map(|i| 1.5 + 0.3 * i as f64).collect();
        let matched = vec![false; n];
        let (_, sums) = view(&c, &matched);
        for m in 1..=n {
            let expected = ((n - m + 1) * (n - m + 1)) as f64;
            assert!((sums.phi(m) - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn suffix_sums_single_matched_sample() {
        let (_, sums) = view(&[0.9_f64], &[true]);
        // 2 c^2 = 1.62 >= 1, so m* = 1; Phi_1 = 1 - 1.62.
        assert!((sums.phi(1) - -0.62).abs() < 1e-12);
        assert_eq!(sums.phi(2), 0.0);
        assert_eq!(sums.m_star(), Some(1));
    }

    #[test]
    fn optimal_threshold_two_sample_instance() {
        let (v, s) = view(&[1.1, 3.7], &[true, true]);
        assert!((optimal_threshold(&v, &s).unwrap() - 1.1).abs() < 1e-12);
        // Objective values at the grid confirm 1.1 is the brute-force argmin.
        let obj: Vec<f64> = [0.0, 1.1, 3.7]
            .iter()
            .map(|&t| problem3_objective(&[1.1, 3.7], &[true, true], t))
            .collect();
        assert!((obj[0] - 1.0).abs() < 1e-12);
        assert!((obj[1] - 0.855).abs() < 1e-12);
        assert!((obj[2] - 7.45).abs() < 1e-12);
    }

    #[test]
    fn optimal_threshold_no_matches_is_largest_ips() {
        let c = [2.05, 1.3, 4.7];
        let (v, s) = view(&c, &[false, false, false]);
        assert_eq!(optimal_threshold(&v, &s).unwrap(), 4.7);
        assert_eq!(oracle_threshold(&c, &[false, false, false]).unwrap(), 4.7);
    }

    #[test]
    fn optimal_threshold_single_sample_full_clip() {
        let (v, s) = view(&[0.9_f64], &[true]);
        assert_eq!(optimal_threshold(&v, &s).unwrap(), 0.0);
        assert_eq!(oracle_threshold(&[0.9], &[true]).unwrap(), 0.0);
    }

    #[test]
    fn oracle_is_order_free() {
        let c = [3.7, 1.1];
        let m = [true, true];
        assert_eq!(oracle_threshold(&c, &m).unwrap(), 1.1);
    }

    #[test]
    fn theta_tilde_additive_constant_relation() {
        // objective(3)(C_(m)) * N^2 - 2 sum phi = Phi_{m+1}.
        let c = perturb_for_uniqueness(&[1.3, 2.0, 2.0, 5.5, 1.01]).unwrap();
        let matched = [true, false, true, true, false];
        let (v, s) = view(&c, &matched);
        let n = c.len();
        let total_phi: f64 = v.phi_values().iter().sum();
        for m in 0..=n {
            let obj = problem3_objective(v.sorted_c(), v.matched(), v.c_at(m));
            let lhs = obj * (n * n) as f64 - 2.0 * total_phi;
            assert!(
                (lhs - s.phi(m + 1)).abs() < 1e-9,
                "m={m}: {lhs} vs {}",
                s.phi(m + 1)
            );
        }
    }

    #[test]
    fn phi_strictly_decreases_where_coefficient_is_negative() {
        let c = perturb_for_uniqueness(&[1.2, 1.4, 2.2, 6.0]).unwrap();
        let matched = [true, false, true, true];
        let (v, s) = view(&c, &matched);
        let n = c.len();
        for m in 1..=n {
            let decreases = s.phi(m) < s.phi(m + 1);
            let coeff_negative = 2.0 * v.phi_values()[m - 1] > (2 * (n - m) + 1) as f64;
            assert_eq!(decreases, coeff_negative, "rank {m}");
        }
    }

    fn random_instance(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ips: Vec<f64> = (0..n).map(|_| 1.0 / rng.random_range(0.01..=1.0)).collect();
        let matched: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        (ips, matched)
    }

    #[test]
    fn closed_form_matches_oracle_on_random_instances() {
        for seed in 0..60 {
            let n = 1 + (seed as usize * 7) % 100;
            let (ips, matched) = random_instance(n, seed);
            let perturbed = perturb_for_uniqueness(&ips).unwrap();
            let v = SortedIpsView::build(&perturbed, &matched).unwrap();
            let s = SuffixSums::from_view(&v);
            let closed = optimal_threshold(&v, &s).unwrap();
            let unpruned = optimal_threshold_unpruned(&v, &s).unwrap();
            let oracle = oracle_threshold(&perturbed, &matched).unwrap();
            assert_eq!(closed, oracle, "seed {seed}");
            assert_eq!(closed, unpruned, "pruning soundness, seed {seed}");
        }
    }

    proptest! {
        #[test]
        fn closed_form_equals_oracle(
            props in proptest::collection::vec(0.01f64..=1.0, 1..40),
            flags in proptest::collection::vec(proptest::bool::ANY, 40),
        ) {
            let ips: Vec<f64> = props.iter().map(|p| 1.0 / p).collect();
            let matched = &flags[..ips.len()];
            let perturbed = perturb_for_uniqueness(&ips).unwrap();
            let v = SortedIpsView::build(&perturbed, matched).unwrap();
            let s = SuffixSums::from_view(&v);
            let closed = optimal_threshold(&v, &s).unwrap();
            let oracle = oracle_threshold(&perturbed, matched).unwrap();
            prop_assert_eq!(closed, oracle);
        }

        #[test]
        fn perturbation_is_deterministic(
            props in proptest::collection::vec(0.01f64..=1.0, 1..30),
        ) {
            let ips: Vec<f64> = props.iter().map(|p| 1.0 / p).collect();
            let a = perturb_for_uniqueness(&ips).unwrap();
            let b = perturb_for_uniqueness(&ips).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

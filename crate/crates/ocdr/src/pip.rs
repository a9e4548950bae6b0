//! Progressive integer programming: solve a sequence of restricted programs
//! whose binary variables are limited to margins inside quantile bands around
//! zero, expanding the bands when the objective stalls and shrinking them
//! when it improves.

use crate::hscop::{HscopError, HscopProblem, InducedPattern};
use crate::mip::{self, BranchAndBound, Budget, MipError, SolveStatus, SolverBackend};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

/// Relative tolerance for "objective unchanged" between iterations.
const STALL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PipError {
    #[error("invalid ratio configuration: need 0 <= r_min <= r0 <= r_max <= 1")]
    InvalidRatios,
    #[error("iteration caps must be positive")]
    InvalidCaps,
    #[error(transparent)]
    Hscop(#[from] HscopError),
    #[error(transparent)]
    Mip(#[from] MipError),
}

/// Ratio-control and budget parameters for the loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipConfig {
    pub r0: f64,
    pub r_max: f64,
    pub r_min: f64,
    pub delta_expand: f64,
    pub delta_shrink: f64,
    /// Band-update cap.
    pub nu_max: usize,
    /// Consecutive-stall cap.
    pub nu_tilde_max: usize,
    /// Deterministic subproblem budget (branch-and-bound nodes).
    pub node_budget: Option<u64>,
    /// Optional wall-clock subproblem budget; breaks byte-reproducibility.
    pub time_budget_secs: Option<f64>,
    pub beta_box: f64,
    pub lambda: f64,
}

impl Default for PipConfig {
    fn default() -> Self {
        PipConfig {
            r0: 0.05,
            r_max: 0.5,
            r_min: 0.01,
            delta_expand: 0.05,
            delta_shrink: 0.02,
            nu_max: 15,
            nu_tilde_max: 3,
            node_budget: Some(2000),
            time_budget_secs: None,
            beta_box: 10.0,
            lambda: 0.0,
        }
    }
}

impl PipConfig {
    fn validate(&self) -> Result<(), PipError> {
        let ok = 0.0 <= self.r_min
            && self.r_min <= self.r0
            && self.r0 <= self.r_max
            && self.r_max <= 1.0;
        if !ok {
            return Err(PipError::InvalidRatios);
        }
        if self.nu_max == 0 || self.nu_tilde_max == 0 {
            return Err(PipError::InvalidCaps);
        }
        Ok(())
    }

    fn budget(&self, warm: Vec<Vec<f64>>) -> Budget {
        Budget {
            node_limit: self.node_budget,
            time_limit: self.time_budget_secs.map(Duration::from_secs_f64),
            warm_start: Some(warm),
        }
    }
}

/// One loop iteration's record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipIterationRecord {
    pub nu: usize,
    pub ratio: f64,
    pub retained_z1: usize,
    pub retained_z2: usize,
    pub bands: (f64, f64, f64, f64),
    pub objective: f64,
    pub solver_status: SolveStatus,
    pub nodes: u64,
    pub wall_ms: f64,
    pub accepted: bool,
}

/// Full trace of a PIP run; serializes to JSON lines.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipTrace {
    pub initial_objective: f64,
    pub records: Vec<PipIterationRecord>,
}

impl PipTrace {
    /// One JSON object per line; timings are zeroed unless requested so that
    /// reruns are byte-identical.
    pub fn write_jsonl(
        &self,
        mut w: impl std::io::Write,
        include_timings: bool,
    ) -> std::io::Result<()> {
        let header = serde_json::json!({
            "record": "init",
            "objective": self.initial_objective,
        });
        writeln!(w, "{header}")?;
        for r in &self.records {
            let mut r = r.clone();
            if !include_timings {
                r.wall_ms = 0.0;
            }
            let line = serde_json::to_value(&r).expect("trace record serializes");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Objective values are nondecreasing across iterations.
    pub fn is_monotone(&self) -> bool {
        let mut last = self.initial_objective;
        for r in &self.records {
            if r.objective < last - 1e-9 {
                return false;
            }
            last = r.objective;
        }
        true
    }
}

/// Nearest-rank lower quantile: the `ceil(r n)`-th smallest; 0 for an empty
/// set or `r = 0`.
fn lower_quantile(values: &mut [f64], r: f64) -> f64 {
    let n = values.len();
    let k = (r * n as f64).ceil() as usize;
    if n == 0 || k == 0 {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values[k.min(n) - 1]
}

/// Nearest-rank upper quantile: the `ceil(r n)`-th largest.
fn upper_quantile(values: &mut [f64], r: f64) -> f64 {
    let n = values.len();
    let k = (r * n as f64).ceil() as usize;
    if n == 0 || k == 0 {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values[n - k.min(n)]
}

/// Deterministic side assignment for exact-zero margins, from (rank, arm)
/// only, so runs are reproducible.
fn zero_margin_goes_positive(rank: usize, arm: usize) -> bool {
    let mut h = (rank as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (arm as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h & 1 == 0
}

pub(crate) fn bands_from_sets(
    mut omega1_pos: Vec<f64>,
    mut omega1_neg: Vec<f64>,
    mut omega2_pos: Vec<f64>,
    mut omega2_neg: Vec<f64>,
    r: f64,
) -> (f64, f64, f64, f64) {
    let d1_plus = lower_quantile(&mut omega1_pos, r);
    let d1_minus = -upper_quantile(&mut omega1_neg, r);
    let d2_plus = lower_quantile(&mut omega2_pos, r);
    let d2_minus = -upper_quantile(&mut omega2_neg, r);
    (d1_minus, d1_plus, d2_minus, d2_plus)
}

/// Quantile bands `(d1-, d1+, d2-, d2+)` around zero for the margin
/// distributions at `beta`, at ratio `r`. Asymmetric by construction: the
/// margin distributions need not be centered at zero.
pub fn build_bands(
    problem: &HscopProblem,
    beta: &[Vec<f64>],
    r: f64,
) -> Result<(f64, f64, f64, f64), PipError> {
    let margins = problem.eval_margins(beta, problem.epsilon())?;
    let mut o1p = Vec::new();
    let mut o1n = Vec::new();
    let mut o2p = Vec::new();
    let mut o2n = Vec::new();
    for s in 0..problem.len() {
        for j in 0..problem.num_treatments() {
            let h = margins.h1[s][j];
            if h > 0.0 {
                o1p.push(h);
            } else if h < 0.0 {
                o1n.push(h);
            } else if zero_margin_goes_positive(s + 1, j + 1) {
                o1p.push(h);
            } else {
                o1n.push(h);
            }
        }
        let d = problem.logged_arm()[s];
        let h = margins.h2[s][d - 1];
        if h > 0.0 {
            o2p.push(h);
        } else if h < 0.0 {
            o2n.push(h);
        } else if zero_margin_goes_positive(s + 1, d) {
            o2p.push(h);
        } else {
            o2n.push(h);
        }
    }
    Ok(bands_from_sets(o1p, o1n, o2p, o2n, r))
}

/// Indicator evaluation of every program binary at `beta` (the warm-start
/// pattern the restricted solves are seeded with).
pub fn induced_binary_pattern(
    problem: &HscopProblem,
    beta: &[Vec<f64>],
    epsilon: f64,
) -> Result<InducedPattern, PipError> {
    Ok(problem.induced_pattern(beta, epsilon)?)
}

/// Runs the loop from `beta0` and returns the best point seen plus the trace.
pub fn run_pip(
    problem: &Arc<HscopProblem>,
    config: &PipConfig,
    beta0: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, PipTrace), PipError> {
    config.validate()?;
    let backend = BranchAndBound::default();
    // LP relaxations can overshoot the box by a tolerance; clamp back in.
    let clamp = |b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        b.iter()
            .map(|row| {
                row.iter()
                    .map(|v| v.clamp(-config.beta_box, config.beta_box))
                    .collect()
            })
            .collect()
    };
    let mut beta = clamp(beta0);
    let mut psi = problem.eval_psi_eps(&beta, problem.epsilon())?
        - config.lambda * beta.iter().flatten().map(|v| v.abs()).sum::<f64>();
    let mut trace = PipTrace {
        initial_objective: psi,
        records: Vec::new(),
    };
    let mut best = (beta.clone(), psi);
    let mut r = config.r0;
    let mut nu = 0usize;
    let mut nu_tilde = 0usize;
    while nu < config.nu_max && nu_tilde < config.nu_tilde_max {
        let started = Instant::now();
        let bands = build_bands(problem, &beta, r)?;
        let prog =
            mip::build_restricted_mip_with(problem, &beta, bands, config.beta_box, config.lambda)?;
        let (retained_z1, retained_z2) = prog.retained_counts();
        let res = backend.solve(&prog, &config.budget(beta.clone()))?;
        let (candidate, cand_psi, status) = if res.has_incumbent() {
            (prog.extract_beta(&res.values), res.objective, res.status)
        } else {
            // Infeasible-within-budget: fall back to the incumbent pattern;
            // counts as an unchanged objective.
            (beta.clone(), psi, res.status)
        };
        // Under budget-limited solves, monotonicity is preserved by
        // rejecting any step that loses objective.
        let accepted = cand_psi >= psi - STALL_TOL;
        let new_psi = if accepted { cand_psi.max(psi) } else { psi };
        let unchanged = (new_psi - psi).abs() <= STALL_TOL * psi.abs().max(1.0);
        if accepted {
            beta = clamp(&candidate);
        }
        psi = new_psi;
        if psi > best.1 {
            best = (beta.clone(), psi);
        }
        if unchanged {
            r = (r + config.delta_expand).min(config.r_max);
            nu_tilde += 1;
        } else {
            r = (r - config.delta_shrink).max(config.r_min);
            nu_tilde = 0;
        }
        nu += 1;
        trace.records.push(PipIterationRecord {
            nu,
            ratio: r,
            retained_z1,
            retained_z2,
            bands,
            objective: psi,
            solver_status: status,
            nodes: res.nodes,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            accepted,
        });
    }
    Ok((best.0, trace))
}

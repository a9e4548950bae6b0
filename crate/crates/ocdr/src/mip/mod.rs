//! Mixed-integer encodings of the epsilon-approximated objective, and a
//! solver interface with a built-in exact branch-and-bound backend.
//!
//! The full program carries one `z1` binary per (sample, arm) for the margin
//! indicator `1{h1_j >= 0}`, one `z2` binary per sample for the logged-arm
//! indicator `1{h2_{D_s} > 0}`, and `w1/w2` binaries for the suffix-function
//! comparisons at ranks `>= m*`. Disjunctive pieces are encoded as follows:
//!
//! * `h1 >= rhs` expands into one row per affine piece (a min on the left of
//!   `>=` is a conjunction).
//! * `h2 <= rhs` needs piece-selection binaries `q` when `J > 2` (a min on the
//!   left of `<=` is a disjunction).
//! * The suffix/prefix minima of the `Phi` sums are materialized as chained
//!   min nodes, one auxiliary variable per rank; nodes whose comparison
//!   direction is forced by objective pressure carry no binary, the others
//!   carry one selection binary each (an equivalent, smaller realization of
//!   per-row selection rows `E_t <= rhs + M (1 - u_t)`).
//! * Objective products `min{z, w}` with positive coefficient become
//!   `y <= z, y <= w`; with negative coefficient `y >= z + w - 1, y >= 0`.
//! * The L1 regularizer enters through the split `beta = beta+ - beta-`.
//!
//! The restricted program fixes binaries outside the in-between index sets:
//! fixed-one margins keep their rows with the binary substituted, fixed-zero
//! `z1` rows vanish, and fixed-zero `z2` rows pin the affine piece that
//! attained the (below-band) minimum at the incumbent.

mod solver;

pub use solver::{BranchAndBound, Budget, SolveResult, SolveStatus, SolverBackend};

use crate::hscop::{HscopProblem, MarginSet};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MipError {
    #[error("beta box radius must be positive (got {0})")]
    NonpositiveBox(f64),
    #[error("regularization weight must be nonnegative (got {0})")]
    NegativeLambda(f64),
    #[error("band widths must be nonnegative (got {0:?})")]
    NegativeBands((f64, f64, f64, f64)),
    #[error("big-M validation failed: {0}")]
    BigMValidation(String),
    #[error("need at least two treatments (got {0})")]
    TooFewTreatments(usize),
    #[error("incumbent beta has wrong shape")]
    IncumbentShape,
    #[error("lp backend: {0}")]
    Lp(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone)]
pub struct Var {
    pub name: String,
    pub lb: f64,
    pub ub: f64,
    pub kind: VarKind,
    pub obj: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowOp {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub name: String,
    pub terms: Vec<(usize, f64)>,
    pub op: RowOp,
    pub rhs: f64,
}

/// Fixing status of an indicator binary in a (possibly restricted) program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Retained(usize),
    Fixed(bool),
}

impl Status {
    pub fn is_retained(&self) -> bool {
        matches!(self, Status::Retained(_))
    }
}

/// Semantic tag carried by every binary variable, used by the pattern
/// completion heuristic to assign values analytically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryRole {
    /// Margin indicator for (rank, arm), both 1-based.
    Z1 { rank: usize, arm: usize },
    Z2 { rank: usize },
    W1 { rank: usize },
    W2 { rank: usize },
    /// Piece selection for the `h2 <= ...` disjunction; `piece_arm` is the
    /// competing arm index (1-based).
    Q { rank: usize, piece_arm: usize },
    /// Suffix-min chain node `M1_m = min(S1_m, M1_{m+1})`; 1 selects `S1_m`.
    V1 { m: usize },
    /// Prefix-min chain node `A1_s = min(A1_{s-1}, S1_s)`; 1 selects `S1_s`.
    V3 { rank: usize },
}

/// Linear expression: constant plus terms over program variables.
#[derive(Debug, Clone, Default)]
struct Expr {
    constant: f64,
    terms: Vec<(usize, f64)>,
}

impl Expr {
    fn constant(c: f64) -> Self {
        Expr {
            constant: c,
            terms: Vec::new(),
        }
    }
    fn var(idx: usize, coef: f64) -> Self {
        Expr {
            constant: 0.0,
            terms: vec![(idx, coef)],
        }
    }
    fn plus(mut self, other: &Expr) -> Self {
        self.constant += other.constant;
        self.terms.extend(other.terms.iter().cloned());
        self
    }
    fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }
}

/// A chain node value: either a resolved constant or a program variable.
#[derive(Debug, Clone, Copy)]
enum NodeVal {
    Const(f64),
    Var(usize),
}

impl NodeVal {
    fn as_expr(&self) -> Expr {
        match *self {
            NodeVal::Const(c) => Expr::constant(c),
            NodeVal::Var(i) => Expr::var(i, 1.0),
        }
    }
}

/// Variables, constraints, objective, and enough problem context to complete
/// fractional relaxation points into feasible assignments.
pub struct IntegerProgram {
    pub(crate) vars: Vec<Var>,
    pub(crate) rows: Vec<Row>,
    /// Objective contribution of indicators fixed to one.
    pub objective_constant: f64,
    pub lambda: f64,
    pub beta_box: f64,
    pub(crate) beta_vars: Vec<Vec<usize>>,
    pub(crate) binary_roles: Vec<(usize, BinaryRole)>,
    /// Objective product terms `y = min(z, w)`: (y, z, w) variable triples.
    pub(crate) y1_links: Vec<(usize, usize, usize)>,
    pub(crate) y2_links: Vec<(usize, usize, usize)>,
    pub(crate) problem: Arc<HscopProblem>,
    pub(crate) z1_status: Vec<Vec<Status>>,
    pub(crate) z2_status: Vec<Status>,
    /// For fixed-zero `z2` rows with `J > 2`: the pinned piece arm (1-based).
    pub(crate) z2_zero_piece: Vec<Option<usize>>,
    pub big_m_upper: f64,
    pub big_m_lower: f64,
    pub phi_big_m: f64,
}

impl IntegerProgram {
    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_binaries(&self) -> usize {
        self.binary_roles.len()
    }

    pub fn var_name(&self, idx: usize) -> &str {
        &self.vars[idx].name
    }

    pub fn problem(&self) -> &HscopProblem {
        &self.problem
    }

    /// Number of retained `z1` / `z2` binaries (the PIP trace records these).
    pub fn retained_counts(&self) -> (usize, usize) {
        let z1 = self
            .binary_roles
            .iter()
            .filter(|(_, r)| matches!(r, BinaryRole::Z1 { .. }))
            .count();
        let z2 = self
            .binary_roles
            .iter()
            .filter(|(_, r)| matches!(r, BinaryRole::Z2 { .. }))
            .count();
        (z1, z2)
    }

    /// Reads the beta matrix out of a solution vector.
    pub fn extract_beta(&self, values: &[f64]) -> Vec<Vec<f64>> {
        self.beta_vars
            .iter()
            .map(|row| row.iter().map(|&i| values[i]).collect())
            .collect()
    }

    /// Objective value of a full assignment (linear part plus constant).
    pub fn objective_value(&self, values: &[f64]) -> f64 {
        let linear: f64 = self
            .vars
            .iter()
            .enumerate()
            .map(|(i, v)| v.obj * values[i])
            .sum();
        linear + self.objective_constant
    }

    /// Checks a full assignment against every row with the given slack.
    pub fn assignment_feasible(&self, values: &[f64], tol: f64) -> bool {
        for (i, v) in self.vars.iter().enumerate() {
            if values[i] < v.lb - tol || values[i] > v.ub + tol {
                return false;
            }
        }
        for row in &self.rows {
            let lhs: f64 = row.terms.iter().map(|&(i, c)| c * values[i]).sum();
            let ok = match row.op {
                RowOp::Le => lhs <= row.rhs + tol,
                RowOp::Ge => lhs >= row.rhs - tol,
                RowOp::Eq => (lhs - row.rhs).abs() <= tol,
            };
            if !ok {
                return false;
            }
        }
        true
    }

    /// Canonical LP-format serialization for debugging against external
    /// solvers.
    pub fn write_lp_format(&self) -> String {
        let mut out = String::new();
        out.push_str("\\ generated by ocdr::mip\nMaximize\n obj:");
        let mut first = true;
        for (i, v) in self.vars.iter().enumerate() {
            if v.obj != 0.0 {
                let sign = if v.obj >= 0.0 { "+" } else { "-" };
                let _ = write!(out, " {sign} {} {}", format_coef(v.obj.abs()), self.vars[i].name);
                first = false;
            }
        }
        if first {
            out.push_str(" 0 b_1_1");
        }
        out.push_str("\nSubject To\n");
        for row in &self.rows {
            let _ = write!(out, " {}:", row.name);
            for &(i, c) in &row.terms {
                let sign = if c >= 0.0 { "+" } else { "-" };
                let _ = write!(out, " {sign} {} {}", format_coef(c.abs()), self.vars[i].name);
            }
            let op = match row.op {
                RowOp::Le => "<=",
                RowOp::Ge => ">=",
                RowOp::Eq => "=",
            };
            let _ = writeln!(out, " {op} {}", format_coef(row.rhs));
        }
        out.push_str("Bounds\n");
        for v in &self.vars {
            if v.kind == VarKind::Binary {
                continue;
            }
            let lb = if v.lb == f64::NEG_INFINITY {
                "-inf".to_string()
            } else {
                format_coef(v.lb)
            };
            let ub = if v.ub == f64::INFINITY {
                "+inf".to_string()
            } else {
                format_coef(v.ub)
            };
            let _ = writeln!(out, " {lb} <= {} <= {ub}", v.name);
        }
        out.push_str("Binary\n");
        for v in &self.vars {
            if v.kind == VarKind::Binary {
                let _ = writeln!(out, " {}", v.name);
            }
        }
        out.push_str("End\n");
        out
    }

    /// Completes a beta point into a full feasible assignment: indicator
    /// binaries take their induced (or fixed) values, chain and selection
    /// binaries are resolved analytically, and the continuous variables are
    /// re-optimized by one LP with all binaries fixed. Returns `None` when
    /// the point violates a fixed indicator's constraint.
    pub fn complete_beta(&self, beta: &[Vec<f64>]) -> Option<(Vec<f64>, f64)> {
        let pattern = self.binary_assignment_for(beta)?;
        let mut lb: Vec<f64> = self.vars.iter().map(|v| v.lb).collect();
        let mut ub: Vec<f64> = self.vars.iter().map(|v| v.ub).collect();
        for (&idx, &val) in &pattern {
            let v = if val { 1.0 } else { 0.0 };
            lb[idx] = v;
            ub[idx] = v;
        }
        let (_, values) = solver::solve_lp(self, &lb, &ub).ok()??;
        let obj = self.objective_value(&values);
        if !self.assignment_feasible(&values, 1e-6) {
            return None;
        }
        Some((values, obj))
    }

    /// LP-free variant of [`Self::complete_beta`]: same induced pattern, but
    /// the continuous part keeps `beta` as-is, so the objective is evaluated
    /// directly. A valid (possibly slightly weaker) incumbent value; the
    /// branch-and-bound uses this at every node and materializes the winner
    /// with one LP at the end.
    pub(crate) fn complete_beta_value(&self, beta: &[Vec<f64>]) -> Option<f64> {
        let pattern = self.binary_assignment_for(beta)?;
        let mut obj = self.objective_constant;
        for (&idx, &val) in &pattern {
            if val {
                obj += self.vars[idx].obj;
            }
        }
        for &(y, z, w) in &self.y1_links {
            if pattern[&z] && pattern[&w] {
                obj += self.vars[y].obj;
            }
        }
        for &(y, z, w) in &self.y2_links {
            if pattern[&z] && pattern[&w] {
                obj += self.vars[y].obj;
            }
        }
        if self.lambda > 0.0 {
            obj -= self.lambda * beta.iter().flatten().map(|v| v.abs()).sum::<f64>();
        }
        Some(obj)
    }

    /// Binary assignment induced by `beta`, respecting fixed statuses.
    /// `None` when a fixed-one margin or fixed-zero piece is violated.
    pub(crate) fn binary_assignment_for(&self, beta: &[Vec<f64>]) -> Option<BTreeMap<usize, bool>> {
        let problem = &self.problem;
        let n = problem.len();
        let margins = problem.eval_margins(beta, problem.epsilon()).ok()?;
        // Indicator values actually used by the program (fixed wins).
        let mut z1_val = vec![vec![false; problem.num_treatments()]; n];
        let mut z2_val = vec![false; n];
        for s in 0..n {
            for j in 0..problem.num_treatments() {
                let induced = margins.h1[s][j] >= 0.0;
                z1_val[s][j] = match self.z1_status[s][j] {
                    Status::Retained(_) => induced,
                    Status::Fixed(v) => {
                        if v && !induced {
                            return None; // h1 >= 0 row violated
                        }
                        v
                    }
                };
            }
            let d = problem.logged_arm()[s] - 1;
            let induced = margins.h2[s][d] > 0.0;
            z2_val[s] = match self.z2_status[s] {
                Status::Retained(_) => induced,
                Status::Fixed(v) => {
                    if !v {
                        // Pinned piece must be nonpositive.
                        match self.z2_zero_piece[s] {
                            Some(arm) => {
                                let piece = h2_piece(&margins, s, d, arm - 1, problem.epsilon());
                                if piece > 0.0 {
                                    return None;
                                }
                            }
                            None => {
                                if induced {
                                    return None;
                                }
                            }
                        }
                    }
                    v
                }
            };
        }
        let chains = ChainValues::compute(problem, &z1_val, &z2_val);
        let mut out = BTreeMap::new();
        for &(idx, role) in &self.binary_roles {
            let val = match role {
                BinaryRole::Z1 { rank, arm } => z1_val[rank - 1][arm - 1],
                BinaryRole::Z2 { rank } => z2_val[rank - 1],
                BinaryRole::W1 { rank } => chains.w1_allowed(rank),
                BinaryRole::W2 { rank } => chains.w2_forced(rank),
                BinaryRole::Q { rank, piece_arm } => {
                    let s = rank - 1;
                    let d = problem.logged_arm()[s] - 1;
                    piece_arm - 1 == argmin_piece(&margins, s, d, problem.epsilon())
                }
                BinaryRole::V1 { m } => chains.s1(m) <= chains.suffix_min_s1(m + 1),
                BinaryRole::V3 { rank } => {
                    chains.s1(rank) <= chains.prefix_min_s1_upto(rank.saturating_sub(1))
                }
            };
            out.insert(idx, val);
        }
        Some(out)
    }
}

fn format_coef(c: f64) -> String {
    format!("{c}")
}

/// Value of the k-th `h2` piece for logged arm `d` (0-based arms).
fn h2_piece(margins: &MarginSet, s: usize, d: usize, i: usize, epsilon: f64) -> f64 {
    let raw = margins.pairwise[s][d][i];
    if i > d {
        raw + epsilon
    } else {
        raw
    }
}

fn argmin_piece(margins: &MarginSet, s: usize, d: usize, epsilon: f64) -> usize {
    let j_count = margins.pairwise[s].len();
    let mut best = usize::MAX;
    let mut best_val = f64::INFINITY;
    for i in 0..j_count {
        if i == d {
            continue;
        }
        let v = h2_piece(margins, s, d, i, epsilon);
        if v < best_val {
            best_val = v;
            best = i;
        }
    }
    best
}

/// Exact suffix-sum and min-chain values for a concrete indicator assignment.
pub(crate) struct ChainValues {
    m_star: usize,
    n: usize,
    /// `s1[t-1] = S1_t` for `t = 1..=N+1` (last entry 0).
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl ChainValues {
    pub(crate) fn compute(problem: &HscopProblem, z1: &[Vec<bool>], z2: &[bool]) -> Self {
        let n = problem.len();
        let mut s1 = vec![0.0; n + 1];
        let mut s2 = vec![0.0; n + 1];
        for t in (1..=n).rev() {
            let s = t - 1;
            let d = problem.logged_arm()[s] - 1;
            let c2 = problem.ips()[s] * problem.ips()[s];
            let odd = (2 * (n - t) + 1) as f64;
            s1[t - 1] = odd - 2.0 * c2 * if z1[s][d] { 1.0 } else { 0.0 } + s1[t];
            s2[t - 1] = odd - 2.0 * c2 * if z2[s] { 1.0 } else { 0.0 } + s2[t];
        }
        ChainValues {
            m_star: problem.m_star(),
            n,
            s1,
            s2,
        }
    }

    fn s1(&self, t: usize) -> f64 {
        self.s1[t - 1]
    }

    fn s2(&self, t: usize) -> f64 {
        self.s2[t - 1]
    }

    /// `min over m in [t, N+1] of S1_m` (the `N+1` candidate is 0).
    fn suffix_min_s1(&self, t: usize) -> f64 {
        (t..=self.n + 1).map(|m| self.s1(m)).fold(f64::INFINITY, f64::min)
    }

    fn suffix_min_s2(&self, t: usize) -> f64 {
        (t..=self.n + 1).map(|m| self.s2(m)).fold(f64::INFINITY, f64::min)
    }

    /// `min over t in [m*, upto] of S1_t`; infinity when `upto < m*`.
    fn prefix_min_s1_upto(&self, upto: usize) -> f64 {
        (self.m_star..=upto.min(self.n))
            .map(|t| self.s1(t))
            .fold(f64::INFINITY, f64::min)
    }

    fn prefix_min_s2_upto(&self, upto: usize) -> f64 {
        (self.m_star..=upto.min(self.n))
            .map(|t| self.s2(t))
            .fold(f64::INFINITY, f64::min)
    }

    /// `w1_s` is allowed iff `min_{t in [m*,s]} S2_t >= min{min_{m>=s+1} S1_m, 0}`.
    pub(crate) fn w1_allowed(&self, rank: usize) -> bool {
        self.prefix_min_s2_upto(rank) - self.suffix_min_s1(rank + 1) >= 0.0
    }

    /// `w2_s` is forced iff `min_{t in [m*,s]} S1_t > min{min_{m>=s+1} S2_m, 0}`.
    pub(crate) fn w2_forced(&self, rank: usize) -> bool {
        self.prefix_min_s1_upto(rank) - self.suffix_min_s2(rank + 1) > 0.0
    }
}

/// Builds the full program: every indicator retained.
pub fn build_full_mip(
    problem: &Arc<HscopProblem>,
    beta_box: f64,
    lambda: f64,
) -> Result<IntegerProgram, MipError> {
    let n = problem.len();
    let j_count = problem.num_treatments();
    let z1_status = vec![vec![None; j_count]; n];
    let z2_status = vec![None; n];
    build_program(problem, beta_box, lambda, z1_status, z2_status, vec![None; n])
}

/// Builds the restricted program around incumbent `beta_bar` with quantile
/// bands `(d1m, d1p, d2m, d2p)`: indices with margins inside the band keep
/// their binaries, the others are fixed to their incumbent side.
pub fn build_restricted_mip(
    problem: &Arc<HscopProblem>,
    beta_bar: &[Vec<f64>],
    bands: (f64, f64, f64, f64),
) -> Result<IntegerProgram, MipError> {
    build_restricted_mip_with(problem, beta_bar, bands, 10.0, 0.0)
}

/// Restricted build with explicit box and regularization (the PIP loop passes
/// its own).
pub fn build_restricted_mip_with(
    problem: &Arc<HscopProblem>,
    beta_bar: &[Vec<f64>],
    bands: (f64, f64, f64, f64),
    beta_box: f64,
    lambda: f64,
) -> Result<IntegerProgram, MipError> {
    let (d1m, d1p, d2m, d2p) = bands;
    if d1m < 0.0 || d1p < 0.0 || d2m < 0.0 || d2p < 0.0 {
        return Err(MipError::NegativeBands(bands));
    }
    let n = problem.len();
    let j_count = problem.num_treatments();
    if beta_bar.len() != j_count || beta_bar.iter().any(|b| b.len() != problem.dim()) {
        return Err(MipError::IncumbentShape);
    }
    let margins = problem
        .eval_margins(beta_bar, problem.epsilon())
        .map_err(|_| MipError::IncumbentShape)?;
    let mut z1_status = vec![vec![None; j_count]; n];
    let mut z2_status = vec![None; n];
    let mut z2_zero_piece = vec![None; n];
    for s in 0..n {
        for j in 0..j_count {
            let h = margins.h1[s][j];
            z1_status[s][j] = if h > d1p {
                Some(true)
            } else if h < -d1m {
                Some(false)
            } else {
                None
            };
        }
        let d = problem.logged_arm()[s] - 1;
        let h = margins.h2[s][d];
        z2_status[s] = if h > d2p {
            Some(true)
        } else if h < -d2m {
            Some(false)
        } else {
            None
        };
        if z2_status[s] == Some(false) && j_count > 2 {
            z2_zero_piece[s] = Some(argmin_piece(&margins, s, d, problem.epsilon()) + 1);
        }
    }
    build_program(problem, beta_box, lambda, z1_status, z2_status, z2_zero_piece)
}

/// Full build with explicit box/lambda plumbing shared by the public entry
/// points. `None` statuses mean retained binaries.
pub fn build_full_mip_with(
    problem: &Arc<HscopProblem>,
    beta_box: f64,
    lambda: f64,
) -> Result<IntegerProgram, MipError> {
    build_full_mip(problem, beta_box, lambda)
}

fn build_program(
    problem: &Arc<HscopProblem>,
    beta_box: f64,
    lambda: f64,
    z1_fix: Vec<Vec<Option<bool>>>,
    z2_fix: Vec<Option<bool>>,
    z2_zero_piece: Vec<Option<usize>>,
) -> Result<IntegerProgram, MipError> {
    if beta_box <= 0.0 || !beta_box.is_finite() {
        return Err(MipError::NonpositiveBox(beta_box));
    }
    if lambda < 0.0 {
        return Err(MipError::NegativeLambda(lambda));
    }
    let n = problem.len();
    let j_count = problem.num_treatments();
    let p = problem.dim();
    if j_count < 2 {
        return Err(MipError::TooFewTreatments(j_count));
    }
    let m_star = problem.m_star();
    let epsilon = problem.epsilon();

    // Big-M constants, provably covering every achievable margin in the box.
    let base = problem.base_scores();
    let max_base_range = (0..j_count)
        .flat_map(|a| (0..j_count).map(move |b| (a, b)))
        .map(|(a, b)| (base[a] - base[b]).abs())
        .fold(0.0, f64::max);
    let max_x_norm = problem
        .covariates()
        .iter()
        .map(|x| x.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let big_m_upper = max_x_norm * 2.0 * beta_box + max_base_range + epsilon + 1.0;
    let big_m_lower = -big_m_upper;
    for x in problem.covariates() {
        let reach = x.iter().map(|v| v.abs()).sum::<f64>() * 2.0 * beta_box + max_base_range + epsilon;
        if big_m_upper < reach {
            return Err(MipError::BigMValidation(format!(
                "margin bound {reach} exceeds big-M {big_m_upper}"
            )));
        }
    }
    // The suffix sums live in [-(2 sum C^2), (N - m* + 1)^2]; the w2 row needs
    // the width of that interval.
    let phi_big_m = if m_star <= n {
        let span = (n - m_star + 1) as f64;
        let sum_c2: f64 = problem.ips()[m_star - 1..]
            .iter()
            .map(|c| 2.0 * c * c)
            .sum();
        span * span + sum_c2 + 1.0
    } else {
        1.0
    };

    let mut b = Builder {
        vars: Vec::new(),
        rows: Vec::new(),
        roles: Vec::new(),
        objective_constant: 0.0,
        y1_links: Vec::new(),
        y2_links: Vec::new(),
    };

    // beta variables and optional L1 split.
    let beta_vars: Vec<Vec<usize>> = (0..j_count)
        .map(|j| {
            (0..p)
                .map(|d| {
                    b.add_var(
                        format!("b_{}_{}", j + 1, d + 1),
                        -beta_box,
                        beta_box,
                        VarKind::Continuous,
                        0.0,
                    )
                })
                .collect()
        })
        .collect();
    if lambda > 0.0 {
        for j in 0..j_count {
            for d in 0..p {
                let bp = b.add_var(
                    format!("bp_{}_{}", j + 1, d + 1),
                    0.0,
                    beta_box,
                    VarKind::Continuous,
                    -lambda,
                );
                let bm = b.add_var(
                    format!("bn_{}_{}", j + 1, d + 1),
                    0.0,
                    beta_box,
                    VarKind::Continuous,
                    -lambda,
                );
                b.add_row(
                    format!("split_{}_{}", j + 1, d + 1),
                    vec![(beta_vars[j][d], 1.0), (bp, -1.0), (bm, 1.0)],
                    RowOp::Eq,
                    0.0,
                );
            }
        }
    }

    // Margin expression h_{j,i} as terms over beta plus base-score constant.
    let margin_expr = |s: usize, j: usize, i: usize| -> (Vec<(usize, f64)>, f64) {
        let x = &problem.covariates()[s];
        let mut terms = Vec::with_capacity(2 * p);
        for d in 0..p {
            if x[d] != 0.0 {
                terms.push((beta_vars[j][d], x[d]));
                terms.push((beta_vars[i][d], -x[d]));
            }
        }
        (terms, base[j] - base[i])
    };

    // z1 indicators and their h1 rows.
    let mut z1_status = vec![vec![Status::Fixed(false); j_count]; n];
    for s in 0..n {
        for j in 0..j_count {
            match z1_fix[s][j] {
                None => {
                    let idx = b.add_binary(
                        format!("z1_s{}_j{}", s + 1, j + 1),
                        BinaryRole::Z1 {
                            rank: s + 1,
                            arm: j + 1,
                        },
                        0.0,
                    );
                    z1_status[s][j] = Status::Retained(idx);
                    // h1_j >= B_lower (1 - z1): one row per affine piece.
                    for i in 0..j_count {
                        if i == j {
                            continue;
                        }
                        let (mut terms, cst) = margin_expr(s, j, i);
                        let shift = if i < j { epsilon } else { 0.0 };
                        terms.push((idx, big_m_lower));
                        b.add_row(
                            format!("h1_s{}_j{}_i{}", s + 1, j + 1, i + 1),
                            terms,
                            RowOp::Ge,
                            big_m_lower - cst + shift,
                        );
                    }
                }
                Some(true) => {
                    z1_status[s][j] = Status::Fixed(true);
                    for i in 0..j_count {
                        if i == j {
                            continue;
                        }
                        let (terms, cst) = margin_expr(s, j, i);
                        let shift = if i < j { epsilon } else { 0.0 };
                        b.add_row(
                            format!("h1f_s{}_j{}_i{}", s + 1, j + 1, i + 1),
                            terms,
                            RowOp::Ge,
                            shift - cst,
                        );
                    }
                }
                Some(false) => {
                    // h1 >= B_lower: vacuous, no row.
                    z1_status[s][j] = Status::Fixed(false);
                }
            }
        }
    }

    // Valid cuts for epsilon > 0: at most one arm per sample can have
    // h1_j >= 0 (the winner's lower margins exceed epsilon, contradicting any
    // other arm's weak upper margin), so sum_j z1_{j,s} <= 1.
    if epsilon > 0.0 {
        for s in 0..n {
            let mut terms = Vec::new();
            let mut fixed_ones = 0usize;
            for j in 0..j_count {
                match z1_status[s][j] {
                    Status::Retained(idx) => terms.push((idx, 1.0)),
                    Status::Fixed(true) => fixed_ones += 1,
                    Status::Fixed(false) => {}
                }
            }
            if !terms.is_empty() && fixed_ones < 2 {
                b.add_row(
                    format!("one_arm_s{}", s + 1),
                    terms,
                    RowOp::Le,
                    1.0 - fixed_ones as f64,
                );
            }
        }
    }

    // z2 indicators and the h2 disjunction.
    let mut z2_status = vec![Status::Fixed(false); n];
    for s in 0..n {
        let d = problem.logged_arm()[s] - 1;
        let pieces: Vec<usize> = (0..j_count).filter(|&i| i != d).collect();
        let piece_shift = |i: usize| if i > d { epsilon } else { 0.0 };
        match z2_fix[s] {
            None => {
                let z2 = b.add_binary(
                    format!("z2_s{}", s + 1),
                    BinaryRole::Z2 { rank: s + 1 },
                    0.0,
                );
                z2_status[s] = Status::Retained(z2);
                if pieces.len() == 1 {
                    let i = pieces[0];
                    let (mut terms, cst) = margin_expr(s, d, i);
                    terms.push((z2, -big_m_upper));
                    b.add_row(
                        format!("h2_s{}", s + 1),
                        terms,
                        RowOp::Le,
                        -cst - piece_shift(i),
                    );
                } else {
                    // Aux H2 = min over pieces, exact via selection binaries.
                    let h2 = b.add_var(
                        format!("H2_s{}", s + 1),
                        -big_m_upper - epsilon,
                        big_m_upper + epsilon,
                        VarKind::Continuous,
                        0.0,
                    );
                    let theta = 2.0 * big_m_upper + 2.0 * epsilon;
                    let mut sel_terms = Vec::new();
                    for &i in &pieces {
                        let (terms, cst) = margin_expr(s, d, i);
                        // H2 <= piece_i
                        let mut up = terms.clone();
                        up.push((h2, -1.0));
                        b.add_row(
                            format!("h2up_s{}_i{}", s + 1, i + 1),
                            up,
                            RowOp::Ge,
                            -cst - piece_shift(i),
                        );
                        // H2 >= piece_i - theta (1 - q)
                        let q = b.add_binary(
                            format!("q_s{}_i{}", s + 1, i + 1),
                            BinaryRole::Q {
                                rank: s + 1,
                                piece_arm: i + 1,
                            },
                            0.0,
                        );
                        let mut lo = terms;
                        lo.push((h2, -1.0));
                        lo.push((q, theta));
                        b.add_row(
                            format!("h2lo_s{}_i{}", s + 1, i + 1),
                            lo,
                            RowOp::Le,
                            theta - cst - piece_shift(i),
                        );
                        sel_terms.push((q, 1.0));
                    }
                    b.add_row(format!("h2sel_s{}", s + 1), sel_terms, RowOp::Ge, 1.0);
                    b.add_row(
                        format!("h2_s{}", s + 1),
                        vec![(h2, 1.0), (z2, -big_m_upper)],
                        RowOp::Le,
                        0.0,
                    );
                }
            }
            Some(true) => {
                z2_status[s] = Status::Fixed(true); // h2 <= B_upper: vacuous.
            }
            Some(false) => {
                z2_status[s] = Status::Fixed(false);
                // h2 <= 0 via the pinned piece (single piece when J = 2).
                let i = match z2_zero_piece[s] {
                    Some(arm) => arm - 1,
                    None => pieces[0],
                };
                let (terms, cst) = margin_expr(s, d, i);
                b.add_row(
                    format!("h2z_s{}", s + 1),
                    terms,
                    RowOp::Le,
                    -cst - piece_shift(i),
                );
            }
        }
    }

    // Valid cut for epsilon > 0: h1_{D_s} >= 0 implies h2_{D_s} >= epsilon,
    // so the logged-arm margin indicator forces z2.
    if epsilon > 0.0 {
        for s in 0..n {
            let d = problem.logged_arm()[s] - 1;
            match (z1_status[s][d], z2_status[s]) {
                (Status::Retained(z1), Status::Retained(z2)) => {
                    b.add_row(
                        format!("z1z2_s{}", s + 1),
                        vec![(z2, 1.0), (z1, -1.0)],
                        RowOp::Ge,
                        0.0,
                    );
                }
                (Status::Fixed(true), Status::Retained(z2)) => {
                    b.add_row(format!("z1z2_s{}", s + 1), vec![(z2, 1.0)], RowOp::Ge, 1.0);
                }
                _ => {}
            }
        }
    }

    // Objective coefficients for z1/z2 and the fixed-part constant.
    for s in 0..n {
        let rank = s + 1;
        let d = problem.logged_arm()[s] - 1;
        let c = problem.ips()[s];
        for j in 0..j_count {
            let mu = problem.mu()[s][j];
            match z1_status[s][j] {
                Status::Retained(idx) => b.vars[idx].obj += mu,
                Status::Fixed(true) => b.objective_constant += mu,
                Status::Fixed(false) => {}
            }
        }
        if rank < m_star {
            let pos = c * problem.resid_pos()[s];
            if pos != 0.0 {
                match z1_status[s][d] {
                    Status::Retained(idx) => b.vars[idx].obj += pos,
                    Status::Fixed(true) => b.objective_constant += pos,
                    Status::Fixed(false) => {}
                }
            }
            let neg = c * problem.resid_neg()[s];
            if neg != 0.0 {
                match z2_status[s] {
                    Status::Retained(idx) => b.vars[idx].obj -= neg,
                    Status::Fixed(true) => b.objective_constant -= neg,
                    Status::Fixed(false) => {}
                }
            }
        }
    }

    // Clipping machinery for ranks >= m*.
    if m_star <= n {
        // Suffix-sum expressions S1_t (z1 at logged arms) and S2_t (z2).
        let mut s1_expr: Vec<Expr> = vec![Expr::default(); n + 2];
        let mut s2_expr: Vec<Expr> = vec![Expr::default(); n + 2];
        for t in (1..=n).rev() {
            let s = t - 1;
            let d = problem.logged_arm()[s] - 1;
            let c2 = problem.ips()[s] * problem.ips()[s];
            let odd = (2 * (n - t) + 1) as f64;
            let term1 = match z1_status[s][d] {
                Status::Retained(idx) => Expr {
                    constant: odd,
                    terms: vec![(idx, -2.0 * c2)],
                },
                Status::Fixed(true) => Expr::constant(odd - 2.0 * c2),
                Status::Fixed(false) => Expr::constant(odd),
            };
            let term2 = match z2_status[s] {
                Status::Retained(idx) => Expr {
                    constant: odd,
                    terms: vec![(idx, -2.0 * c2)],
                },
                Status::Fixed(true) => Expr::constant(odd - 2.0 * c2),
                Status::Fixed(false) => Expr::constant(odd),
            };
            s1_expr[t - 1] = term1.plus(&s1_expr[t]);
            s2_expr[t - 1] = term2.plus(&s2_expr[t]);
        }

        // Suffix-min chains M1_m = min(S1_m, M1_{m+1}) for m = N..m*+1, with
        // the 0 candidate at N+1. M1 is subtracted in a >= row, so it needs
        // the exact (selection-binary) encoding; M2 is subtracted in a <= row
        // where upper bounds alone are binding.
        let m1_chain = b.build_suffix_chain(
            "M1", "v1", &s1_expr, m_star, n, phi_big_m, true,
            |m| BinaryRole::V1 { m },
        );
        let m2_chain = b.build_suffix_chain(
            "M2", "v2", &s2_expr, m_star, n, phi_big_m, false,
            |m| BinaryRole::V1 { m }, // unused (no binaries created)
        );
        // Prefix-min chains A1_s = min over t in [m*, s] of S1_t (exact;
        // appears positively in a <= row) and A2_s (upper-only; appears
        // positively in a >= row).
        let a1_chain = b.build_prefix_chain(
            "A1", "v3", &s1_expr, m_star, n, phi_big_m, true,
            |rank| BinaryRole::V3 { rank },
        );
        let a2_chain = b.build_prefix_chain(
            "A2", "v4", &s2_expr, m_star, n, phi_big_m, false,
            |rank| BinaryRole::V3 { rank }, // unused
        );

        let mut prev_w1: Option<usize> = None;
        for rank in m_star..=n {
            let s = rank - 1;
            let d = problem.logged_arm()[s] - 1;
            let c = problem.ips()[s];
            let w1 = b.add_binary(
                format!("w1_s{rank}"),
                BinaryRole::W1 { rank },
                0.0,
            );
            let w2 = b.add_binary(
                format!("w2_s{rank}"),
                BinaryRole::W2 { rank },
                0.0,
            );
            // A2_s - M1_{s+1} >= B_phi_lower (1 - w1)
            let mut t1 = a2_chain[rank - m_star].as_expr();
            let m1 = m1_chain[rank + 1 - m_star].as_expr();
            t1.constant -= m1.constant;
            for &(i, cf) in &m1.terms {
                t1.terms.push((i, -cf));
            }
            t1.terms.push((w1, -phi_big_m));
            b.add_row(
                format!("w1_s{rank}"),
                t1.terms,
                RowOp::Ge,
                -phi_big_m - t1.constant,
            );
            // A1_s - M2_{s+1} <= B_phi_upper w2
            let mut t2 = a1_chain[rank - m_star].as_expr();
            let m2 = m2_chain[rank + 1 - m_star].as_expr();
            t2.constant -= m2.constant;
            for &(i, cf) in &m2.terms {
                t2.terms.push((i, -cf));
            }
            t2.terms.push((w2, -phi_big_m));
            b.add_row(
                format!("w2_s{rank}"),
                t2.terms,
                RowOp::Le,
                -t2.constant,
            );
            // Ordering: w1_s >= w1_{s+1} (consecutive closure).
            if let Some(prev) = prev_w1 {
                b.add_row(
                    format!("w1ord_s{rank}"),
                    vec![(prev, 1.0), (w1, -1.0)],
                    RowOp::Ge,
                    0.0,
                );
            }
            prev_w1 = Some(w1);

            // Objective: + C [resid]_+ min{z1_{D_s}, w1} - C [resid]_- min{z2, w2}.
            let pos = c * problem.resid_pos()[s];
            if pos != 0.0 {
                match z1_status[s][d] {
                    Status::Retained(z1) => {
                        let y1 = b.add_var(
                            format!("y1_s{rank}"),
                            0.0,
                            1.0,
                            VarKind::Continuous,
                            pos,
                        );
                        b.add_row(
                            format!("y1a_s{rank}"),
                            vec![(y1, 1.0), (z1, -1.0)],
                            RowOp::Le,
                            0.0,
                        );
                        b.add_row(
                            format!("y1b_s{rank}"),
                            vec![(y1, 1.0), (w1, -1.0)],
                            RowOp::Le,
                            0.0,
                        );
                        b.y1_links.push((y1, z1, w1));
                    }
                    Status::Fixed(true) => b.vars[w1].obj += pos,
                    Status::Fixed(false) => {}
                }
            }
            let neg = c * problem.resid_neg()[s];
            if neg != 0.0 {
                match z2_status[s] {
                    Status::Retained(z2) => {
                        let y2 = b.add_var(
                            format!("y2_s{rank}"),
                            0.0,
                            1.0,
                            VarKind::Continuous,
                            -neg,
                        );
                        // y2 >= z2 + w2 - 1
                        b.add_row(
                            format!("y2a_s{rank}"),
                            vec![(y2, 1.0), (z2, -1.0), (w2, -1.0)],
                            RowOp::Ge,
                            -1.0,
                        );
                        b.y2_links.push((y2, z2, w2));
                    }
                    Status::Fixed(true) => b.vars[w2].obj -= neg,
                    Status::Fixed(false) => {}
                }
            }
        }
    }

    Ok(IntegerProgram {
        vars: b.vars,
        rows: b.rows,
        objective_constant: b.objective_constant,
        lambda,
        beta_box,
        beta_vars,
        binary_roles: b.roles,
        y1_links: b.y1_links,
        y2_links: b.y2_links,
        problem: Arc::clone(problem),
        z1_status,
        z2_status,
        z2_zero_piece,
        big_m_upper,
        big_m_lower,
        phi_big_m,
    })
}

struct Builder {
    vars: Vec<Var>,
    rows: Vec<Row>,
    roles: Vec<(usize, BinaryRole)>,
    objective_constant: f64,
    y1_links: Vec<(usize, usize, usize)>,
    y2_links: Vec<(usize, usize, usize)>,
}

impl Builder {
    fn add_var(&mut self, name: String, lb: f64, ub: f64, kind: VarKind, obj: f64) -> usize {
        self.vars.push(Var {
            name,
            lb,
            ub,
            kind,
            obj,
        });
        self.vars.len() - 1
    }

    fn add_binary(&mut self, name: String, role: BinaryRole, obj: f64) -> usize {
        let idx = self.add_var(name, 0.0, 1.0, VarKind::Binary, obj);
        self.roles.push((idx, role));
        idx
    }

    fn add_row(&mut self, name: String, terms: Vec<(usize, f64)>, op: RowOp, rhs: f64) {
        self.rows.push(Row {
            name,
            terms,
            op,
            rhs,
        });
    }

    /// Materializes `M_m = min(S_m, M_{m+1})` for `m = n .. m_star+1` with
    /// `M_{n+1} = 0`. Returns node values indexed by `m - m_star`
    /// (positions `m_star ..= n+1`; the entry at `m_star` is unused by rows
    /// but kept for uniform indexing). With `exact`, each variable node gets
    /// a selection binary forcing equality; otherwise only the upper-bound
    /// rows are emitted (sufficient when the chain value is pushed upward by
    /// the objective).
    #[allow(clippy::too_many_arguments)]
    fn build_suffix_chain(
        &mut self,
        name: &str,
        sel_name: &str,
        s_expr: &[Expr],
        m_star: usize,
        n: usize,
        big_m: f64,
        exact: bool,
        role: impl Fn(usize) -> BinaryRole,
    ) -> Vec<NodeVal> {
        let mut nodes: Vec<NodeVal> = vec![NodeVal::Const(0.0); n + 2 - m_star];
        // nodes[m - m_star] = M_m for m in m_star..=n+1; M_{n+1} = 0.
        for m in (m_star..=n).rev() {
            let s_m = &s_expr[m - 1];
            let prev = nodes[m + 1 - m_star];
            let both_const = s_m.is_constant() && matches!(prev, NodeVal::Const(_));
            if both_const {
                if let NodeVal::Const(pc) = prev {
                    nodes[m - m_star] = NodeVal::Const(s_m.constant.min(pc));
                }
                continue;
            }
            let var = self.add_var(
                format!("{name}_m{m}"),
                -big_m,
                big_m,
                VarKind::Continuous,
                0.0,
            );
            // var <= S_m
            let mut up1: Vec<(usize, f64)> = vec![(var, 1.0)];
            for &(i, c) in &s_m.terms {
                up1.push((i, -c));
            }
            self.add_row(format!("{name}up_m{m}"), up1, RowOp::Le, s_m.constant);
            // var <= M_{m+1}
            match prev {
                NodeVal::Const(pc) => {
                    self.add_row(
                        format!("{name}upp_m{m}"),
                        vec![(var, 1.0)],
                        RowOp::Le,
                        pc,
                    );
                }
                NodeVal::Var(pv) => {
                    self.add_row(
                        format!("{name}upp_m{m}"),
                        vec![(var, 1.0), (pv, -1.0)],
                        RowOp::Le,
                        0.0,
                    );
                }
            }
            if exact {
                let v = self.add_binary(format!("{sel_name}_m{m}"), role(m), 0.0);
                // var >= S_m - big (1 - v)
                let mut lo1: Vec<(usize, f64)> = vec![(var, 1.0), (v, -2.0 * big_m)];
                for &(i, c) in &s_m.terms {
                    lo1.push((i, -c));
                }
                self.add_row(
                    format!("{name}lo_m{m}"),
                    lo1,
                    RowOp::Ge,
                    s_m.constant - 2.0 * big_m,
                );
                // var >= M_{m+1} - big v
                match prev {
                    NodeVal::Const(pc) => {
                        self.add_row(
                            format!("{name}lop_m{m}"),
                            vec![(var, 1.0), (v, 2.0 * big_m)],
                            RowOp::Ge,
                            pc,
                        );
                    }
                    NodeVal::Var(pv) => {
                        self.add_row(
                            format!("{name}lop_m{m}"),
                            vec![(var, 1.0), (pv, -1.0), (v, 2.0 * big_m)],
                            RowOp::Ge,
                            0.0,
                        );
                    }
                }
            }
            nodes[m - m_star] = NodeVal::Var(var);
        }
        nodes
    }

    /// Materializes `A_s = min over t in [m_star, s] of S_t`, indexed by
    /// `s - m_star` for `s in m_star..=n`.
    #[allow(clippy::too_many_arguments)]
    fn build_prefix_chain(
        &mut self,
        name: &str,
        sel_name: &str,
        s_expr: &[Expr],
        m_star: usize,
        n: usize,
        big_m: f64,
        exact: bool,
        role: impl Fn(usize) -> BinaryRole,
    ) -> Vec<NodeVal> {
        let mut nodes: Vec<NodeVal> = Vec::with_capacity(n + 1 - m_star);
        for s in m_star..=n {
            let s_s = &s_expr[s - 1];
            if s == m_star {
                if s_s.is_constant() {
                    nodes.push(NodeVal::Const(s_s.constant));
                } else {
                    let var = self.add_var(
                        format!("{name}_s{s}"),
                        -big_m,
                        big_m,
                        VarKind::Continuous,
                        0.0,
                    );
                    // var == S_{m*}
                    let mut eq: Vec<(usize, f64)> = vec![(var, 1.0)];
                    for &(i, c) in &s_s.terms {
                        eq.push((i, -c));
                    }
                    self.add_row(format!("{name}eq_s{s}"), eq, RowOp::Eq, s_s.constant);
                    nodes.push(NodeVal::Var(var));
                }
                continue;
            }
            let prev = nodes[s - 1 - m_star];
            let both_const = s_s.is_constant() && matches!(prev, NodeVal::Const(_));
            if both_const {
                if let NodeVal::Const(pc) = prev {
                    nodes.push(NodeVal::Const(s_s.constant.min(pc)));
                }
                continue;
            }
            let var = self.add_var(
                format!("{name}_s{s}"),
                -big_m,
                big_m,
                VarKind::Continuous,
                0.0,
            );
            let mut up1: Vec<(usize, f64)> = vec![(var, 1.0)];
            for &(i, c) in &s_s.terms {
                up1.push((i, -c));
            }
            self.add_row(format!("{name}up_s{s}"), up1, RowOp::Le, s_s.constant);
            match prev {
                NodeVal::Const(pc) => {
                    self.add_row(format!("{name}upp_s{s}"), vec![(var, 1.0)], RowOp::Le, pc);
                }
                NodeVal::Var(pv) => {
                    self.add_row(
                        format!("{name}upp_s{s}"),
                        vec![(var, 1.0), (pv, -1.0)],
                        RowOp::Le,
                        0.0,
                    );
                }
            }
            if exact {
                let v = self.add_binary(format!("{sel_name}_s{s}"), role(s), 0.0);
                let mut lo1: Vec<(usize, f64)> = vec![(var, 1.0), (v, -2.0 * big_m)];
                for &(i, c) in &s_s.terms {
                    lo1.push((i, -c));
                }
                self.add_row(
                    format!("{name}lo_s{s}"),
                    lo1,
                    RowOp::Ge,
                    s_s.constant - 2.0 * big_m,
                );
                match prev {
                    NodeVal::Const(pc) => {
                        self.add_row(
                            format!("{name}lop_s{s}"),
                            vec![(var, 1.0), (v, 2.0 * big_m)],
                            RowOp::Ge,
                            pc,
                        );
                    }
                    NodeVal::Var(pv) => {
                        self.add_row(
                            format!("{name}lop_s{s}"),
                            vec![(var, 1.0), (pv, -1.0), (v, 2.0 * big_m)],
                            RowOp::Ge,
                            0.0,
                        );
                    }
                }
            }
            nodes.push(NodeVal::Var(var));
        }
        nodes
    }
}

#[cfg(test)]
mod tests;

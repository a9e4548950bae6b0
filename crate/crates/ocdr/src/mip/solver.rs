//! Solver interface and the built-in exact backend.
//!
//! The built-in backend runs best-first branch-and-bound over the binary
//! variables with LP-relaxation bounding (box-constrained continuous
//! variables). Branching picks the most-fractional binary, ties broken by
//! lowest variable index. At every node the relaxation's beta point is
//! completed into a feasible incumbent via the program's induced-pattern
//! heuristic, so time- or node-limited solves still return useful incumbents.
//! Search order, node ids, and the underlying simplex are deterministic;
//! wall-clock limits are optional and off by default.

use super::{IntegerProgram, MipError, RowOp};
use minilp::{ComparisonOp, OptimizationDirection, Problem as LpProblem};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

/// Search budget. With neither limit set the tree is exhausted (proven
/// optimum). Node limits are deterministic; time limits are not.
#[derive(Debug, Clone, Default)]
pub struct Budget {
    pub node_limit: Option<u64>,
    pub time_limit: Option<Duration>,
    /// Feasible point whose induced pattern seeds the incumbent.
    pub warm_start: Option<Vec<Vec<f64>>>,
}

impl Budget {
    pub fn unlimited() -> Self {
        Budget::default()
    }

    pub fn nodes(limit: u64) -> Self {
        Budget {
            node_limit: Some(limit),
            ..Budget::default()
        }
    }

    pub fn with_warm_start(mut self, beta: Vec<Vec<f64>>) -> Self {
        self.warm_start = Some(beta);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    /// Tree exhausted; the incumbent is the proven optimum.
    Optimal,
    /// Budget hit with an incumbent in hand.
    FeasibleIncumbent,
    /// No feasible assignment exists.
    Infeasible,
    /// Budget hit before any incumbent was found.
    BudgetExhausted,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Full variable assignment (empty unless an incumbent exists).
    pub values: Vec<f64>,
    /// Objective of the incumbent, including the fixed constant.
    pub objective: f64,
    /// Valid upper bound on the true optimum (maximization).
    pub best_bound: f64,
    pub nodes: u64,
}

impl SolveResult {
    pub fn has_incumbent(&self) -> bool {
        matches!(
            self.status,
            SolveStatus::Optimal | SolveStatus::FeasibleIncumbent
        )
    }
}

/// Backend contract: an external solver can be swapped in without touching
/// the callers.
pub trait SolverBackend {
    fn solve(&self, program: &IntegerProgram, budget: &Budget) -> Result<SolveResult, MipError>;

    /// All binaries relaxed to `[0, 1]`.
    fn solve_relaxation(&self, program: &IntegerProgram) -> Result<SolveResult, MipError>;
}

/// Solves the LP with the given variable bounds. `Ok(None)` means infeasible.
pub(crate) fn solve_lp(
    prog: &IntegerProgram,
    lb: &[f64],
    ub: &[f64],
) -> Result<Option<(f64, Vec<f64>)>, MipError> {
    let mut lp = LpProblem::new(OptimizationDirection::Maximize);
    let vars: Vec<minilp::Variable> = prog
        .vars
        .iter()
        .enumerate()
        .map(|(i, v)| lp.add_var(v.obj, (lb[i], ub[i])))
        .collect();
    for row in &prog.rows {
        let op = match row.op {
            RowOp::Le => ComparisonOp::Le,
            RowOp::Ge => ComparisonOp::Ge,
            RowOp::Eq => ComparisonOp::Eq,
        };
        let expr: Vec<(minilp::Variable, f64)> =
            row.terms.iter().map(|&(i, c)| (vars[i], c)).collect();
        lp.add_constraint(&expr[..], op, row.rhs);
    }
    match lp.solve() {
        Ok(sol) => {
            let values: Vec<f64> = vars.iter().map(|&v| sol[v]).collect();
            Ok(Some((sol.objective() + prog.objective_constant, values)))
        }
        Err(minilp::Error::Infeasible) => Ok(None),
        Err(e) => Err(MipError::Lp(e.to_string())),
    }
}

/// Built-in exact branch-and-bound for desk-scale instances.
#[derive(Debug, Clone)]
pub struct BranchAndBound {
    pub integrality_tol: f64,
    pub prune_tol: f64,
}

impl Default for BranchAndBound {
    fn default() -> Self {
        BranchAndBound {
            integrality_tol: 1e-6,
            prune_tol: 1e-9,
        }
    }
}

enum Incumbent {
    /// Full assignment from an integral leaf resolve.
    Full(Vec<f64>),
    /// Beta point whose induced pattern is the incumbent; materialized lazily.
    Beta(Vec<Vec<f64>>),
}

struct HeapNode {
    bound: f64,
    id: u64,
    fixes: Vec<(usize, bool)>,
}

impl PartialEq for HeapNode {
    fn eq(&self, other: &Self) -> bool {
        self.bound == other.bound && self.id == other.id
    }
}
impl Eq for HeapNode {}
impl PartialOrd for HeapNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapNode {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap: larger bound first, then smaller id (deterministic).
        self.bound
            .total_cmp(&other.bound)
            .then(other.id.cmp(&self.id))
    }
}

impl SolverBackend for BranchAndBound {
    fn solve(&self, prog: &IntegerProgram, budget: &Budget) -> Result<SolveResult, MipError> {
        let start = Instant::now();
        let base_lb: Vec<f64> = prog.vars.iter().map(|v| v.lb).collect();
        let base_ub: Vec<f64> = prog.vars.iter().map(|v| v.ub).collect();
        let binaries: Vec<usize> = prog.binary_roles.iter().map(|&(i, _)| i).collect();
        // Decision binaries (indicators) branch before the auxiliary
        // selection binaries of the min encodings, which are implied once the
        // indicators settle.
        let decision: Vec<usize> = prog
            .binary_roles
            .iter()
            .filter(|(_, r)| {
                matches!(
                    r,
                    super::BinaryRole::Z1 { .. }
                        | super::BinaryRole::Z2 { .. }
                        | super::BinaryRole::W1 { .. }
                        | super::BinaryRole::W2 { .. }
                )
            })
            .map(|&(i, _)| i)
            .collect();

        // Incumbents are tracked as (beta, valid objective); the winning one
        // is materialized into a full assignment by a single LP at the end.
        let mut incumbent: Option<(Incumbent, f64)> = None;
        if let Some(beta) = &budget.warm_start {
            if let Some(obj) = prog.complete_beta_value(beta) {
                incumbent = Some((Incumbent::Beta(beta.clone()), obj));
            }
        }
        let inc_obj =
            |inc: &Option<(Incumbent, f64)>| inc.as_ref().map_or(f64::NEG_INFINITY, |i| i.1);

        let mut heap = BinaryHeap::new();
        heap.push(HeapNode {
            bound: f64::INFINITY,
            id: 0,
            fixes: Vec::new(),
        });
        let mut next_id = 1u64;
        let mut nodes = 0u64;
        let mut exhausted = true;
        let mut open_bound = f64::NEG_INFINITY;

        while let Some(node) = heap.pop() {
            if node.bound <= inc_obj(&incumbent) + self.prune_tol {
                // Best-first: every remaining node is at most this bound.
                break;
            }
            let over_nodes = budget.node_limit.is_some_and(|l| nodes >= l);
            let over_time = budget.time_limit.is_some_and(|l| start.elapsed() >= l);
            if over_nodes || over_time {
                exhausted = false;
                open_bound = node.bound;
                break;
            }
            nodes += 1;
            let mut lb = base_lb.clone();
            let mut ub = base_ub.clone();
            for &(i, v) in &node.fixes {
                let x = if v { 1.0 } else { 0.0 };
                lb[i] = x;
                ub[i] = x;
            }
            let Some((obj, values)) = solve_lp(prog, &lb, &ub)? else {
                continue;
            };
            if obj <= inc_obj(&incumbent) + self.prune_tol {
                continue;
            }
            // Primal heuristic: complete the relaxation's beta point (no LP).
            let beta_here = prog.extract_beta(&values);
            if let Some(cand) = prog.complete_beta_value(&beta_here) {
                if cand > inc_obj(&incumbent) {
                    incumbent = Some((Incumbent::Beta(beta_here), cand));
                }
            }
            // Most-fractional binary, ties broken by lowest variable index;
            // decision binaries take precedence over auxiliary selectors.
            let pick = |set: &[usize]| {
                let mut var = None;
                let mut best_frac = self.integrality_tol;
                for &i in set {
                    let frac = (values[i] - values[i].round()).abs();
                    if frac > best_frac {
                        best_frac = frac;
                        var = Some(i);
                    }
                }
                var
            };
            let branch_var = pick(&decision).or_else(|| pick(&binaries));
            match branch_var {
                Some(i) => {
                    for v in [false, true] {
                        let mut fixes = node.fixes.clone();
                        fixes.push((i, v));
                        heap.push(HeapNode {
                            bound: obj,
                            id: next_id,
                            fixes,
                        });
                        next_id += 1;
                    }
                }
                None => {
                    // Integral relaxation: pin binaries and re-solve for an
                    // exact incumbent.
                    let mut lb2 = lb.clone();
                    let mut ub2 = ub.clone();
                    for &i in &binaries {
                        let v = values[i].round();
                        lb2[i] = v;
                        ub2[i] = v;
                    }
                    if let Some((obj2, vals2)) = solve_lp(prog, &lb2, &ub2)? {
                        if obj2 > inc_obj(&incumbent) && prog.assignment_feasible(&vals2, 1e-6) {
                            incumbent = Some((Incumbent::Full(vals2), obj2));
                        }
                    }
                }
            }
        }

        let remaining = heap
            .iter()
            .map(|n| n.bound)
            .fold(open_bound, f64::max);
        Ok(match incumbent {
            Some((winner, mut objective)) => {
                let values = match winner {
                    Incumbent::Full(values) => values,
                    Incumbent::Beta(beta) => {
                        // One LP to materialize (and possibly improve via the
                        // regularizer) the winning pattern.
                        match prog.complete_beta(&beta) {
                            Some((values, obj)) => {
                                objective = objective.max(obj);
                                values
                            }
                            None => Vec::new(),
                        }
                    }
                };
                if exhausted {
                    SolveResult {
                        status: SolveStatus::Optimal,
                        values,
                        objective,
                        best_bound: objective,
                        nodes,
                    }
                } else {
                    SolveResult {
                        status: SolveStatus::FeasibleIncumbent,
                        values,
                        objective,
                        best_bound: remaining.max(objective),
                        nodes,
                    }
                }
            }
            None => SolveResult {
                status: if exhausted {
                    SolveStatus::Infeasible
                } else {
                    SolveStatus::BudgetExhausted
                },
                values: Vec::new(),
                objective: f64::NEG_INFINITY,
                best_bound: if exhausted { f64::NEG_INFINITY } else { remaining },
                nodes,
            },
        })
    }

    fn solve_relaxation(&self, prog: &IntegerProgram) -> Result<SolveResult, MipError> {
        let lb: Vec<f64> = prog.vars.iter().map(|v| v.lb).collect();
        let ub: Vec<f64> = prog.vars.iter().map(|v| v.ub).collect();
        Ok(match solve_lp(prog, &lb, &ub)? {
            Some((objective, values)) => SolveResult {
                status: SolveStatus::Optimal,
                values,
                objective,
                best_bound: objective,
                nodes: 1,
            },
            None => SolveResult {
                status: SolveStatus::Infeasible,
                values: Vec::new(),
                objective: f64::NEG_INFINITY,
                best_bound: f64::NEG_INFINITY,
                nodes: 1,
            },
        })
    }
}


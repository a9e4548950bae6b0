use super::*;
use crate::data::{Dataset, RewardModel, Sample};
use crate::hscop::{EstimatorMode, HscopProblem};
use rand::{Rng, SeedableRng};
use std::sync::Arc;

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

fn build_problem(n: usize, j: usize, p: usize, seed: u64) -> Arc<HscopProblem> {
    let ds = random_dataset(n, j, p, seed);
    let model = RewardModel::from_fn(|x, arm| 0.4 * x[0] + 0.12 * arm as f64, 1.0, "t");
    Arc::new(HscopProblem::build(&ds, &model, EstimatorMode::Ocdr, None, None).unwrap())
}

fn l1(beta: &[Vec<f64>]) -> f64 {
    beta.iter().flatten().map(|v| v.abs()).sum()
}

#[test]
fn tiny_program_variable_counts() {
    let prob = build_problem(1, 2, 1, 1);
    let prog = build_full_mip(&prob, 10.0, 0.0).unwrap();
    let z1 = prog
        .binary_roles
        .iter()
        .filter(|(_, r)| matches!(r, BinaryRole::Z1 { .. }))
        .count();
    let z2 = prog
        .binary_roles
        .iter()
        .filter(|(_, r)| matches!(r, BinaryRole::Z2 { .. }))
        .count();
    let w = prog
        .binary_roles
        .iter()
        .filter(|(_, r)| matches!(r, BinaryRole::W1 { .. } | BinaryRole::W2 { .. }))
        .count();
    assert_eq!(z1, 2);
    assert_eq!(z2, 1);
    // N = 1 and C >= 1 imply m* = 1, so the w block is a singleton pair.
    assert_eq!(prob.m_star(), 1);
    assert_eq!(w, 2);
}

#[test]
fn lambda_zero_has_no_split_vars() {
    let prob = build_problem(3, 2, 2, 2);
    let prog = build_full_mip(&prob, 10.0, 0.0).unwrap();
    assert!(!prog.vars.iter().any(|v| v.name.starts_with("bp_")));
    let prog = build_full_mip(&prob, 10.0, 0.1).unwrap();
    assert!(prog.vars.iter().any(|v| v.name.starts_with("bp_")));
}

#[test]
fn zero_beta_completes_to_feasible_assignment() {
    let prob = build_problem(4, 3, 2, 3);
    let prog = build_full_mip(&prob, 10.0, 0.0).unwrap();
    let beta = vec![vec![0.0; 2]; 3];
    let (values, obj) = prog.complete_beta(&beta).expect("beta = 0 must complete");
    assert!(prog.assignment_feasible(&values, 1e-6));
    let eps = prob.epsilon();
    let psi = prob.eval_psi_eps(&beta, eps).unwrap();
    // Completion re-optimizes the continuous part, so it can only improve.
    assert!(obj >= psi - 1e-9);
}

#[test]
fn completion_matches_psi_eps_at_fixed_beta() {
    // With lambda = 0 the LP has no continuous objective, so the completed
    // assignment's value must equal psi_eps at that beta exactly.
    let prob = build_problem(6, 2, 2, 4);
    let prog = build_full_mip(&prob, 10.0, 0.0).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let beta: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..2).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let (_, obj) = prog.complete_beta(&beta).unwrap();
        let psi = prob.eval_psi_eps(&beta, prob.epsilon()).unwrap();
        assert!(
            (obj - psi).abs() < 1e-7,
            "completion {obj} vs psi_eps {psi}"
        );
    }
}

/// Exhaustive enumeration over all z patterns (J = 2), with w and the chain
/// selections resolved analytically and the continuous part re-optimized by
/// one LP per pattern.
fn enumeration_optimum(prog: &IntegerProgram) -> Option<f64> {
    let problem = prog.problem();
    let n = problem.len();
    assert_eq!(problem.num_treatments(), 2, "oracle built for J = 2");
    let z1_bits = 2 * n;
    let total_bits = z1_bits + n;
    assert!(total_bits <= 20);
    let base_lb: Vec<f64> = prog.vars.iter().map(|v| v.lb).collect();
    let base_ub: Vec<f64> = prog.vars.iter().map(|v| v.ub).collect();
    let mut best: Option<f64> = None;
    for mask in 0u32..(1u32 << total_bits) {
        let mut z1 = vec![vec![false; 2]; n];
        let mut z2 = vec![false; n];
        for s in 0..n {
            z1[s][0] = mask & (1 << (2 * s)) != 0;
            z1[s][1] = mask & (1 << (2 * s + 1)) != 0;
            z2[s] = mask & (1 << (z1_bits + s)) != 0;
        }
        let chains = ChainValues::compute(problem, &z1, &z2);
        let mut lb = base_lb.clone();
        let mut ub = base_ub.clone();
        for &(idx, role) in &prog.binary_roles {
            let v = match role {
                BinaryRole::Z1 { rank, arm } => z1[rank - 1][arm - 1],
                BinaryRole::Z2 { rank } => z2[rank - 1],
                BinaryRole::W1 { rank } => chains.w1_allowed(rank),
                BinaryRole::W2 { rank } => chains.w2_forced(rank),
                BinaryRole::Q { .. } => unreachable!("no q binaries at J = 2"),
                BinaryRole::V1 { m } => chains.s1(m) <= chains.suffix_min_s1(m + 1),
                BinaryRole::V3 { rank } => {
                    chains.s1(rank) <= chains.prefix_min_s1_upto(rank.saturating_sub(1))
                }
            };
            let x = if v { 1.0 } else { 0.0 };
            lb[idx] = x;
            ub[idx] = x;
        }
        if let Some((obj, _)) = solver::solve_lp(prog, &lb, &ub).unwrap() {
            best = Some(best.map_or(obj, |b: f64| b.max(obj)));
        }
    }
    best
}

#[test]
fn branch_and_bound_matches_enumeration() {
    for (n, seed, lambda) in [(3usize, 10u64, 0.0), (3, 11, 0.05), (4, 12, 0.0)] {
        let prob = build_problem(n, 2, 2, seed);
        let prog = build_full_mip(&prob, 5.0, lambda).unwrap();
        let solver = BranchAndBound::default();
        let res = solver.solve(&prog, &Budget::unlimited()).unwrap();
        assert_eq!(res.status, SolveStatus::Optimal, "seed {seed}");
        let oracle = enumeration_optimum(&prog).expect("some pattern feasible");
        assert!(
            (res.objective - oracle).abs() < 1e-6,
            "seed {seed}: bnb {} vs enumeration {oracle}",
            res.objective
        );
    }
}

#[test]
fn optimal_objective_matches_psi_eps_roundtrip() {
    for seed in 20..26 {
        let j = if seed % 2 == 0 { 2 } else { 3 };
        let prob = build_problem(5, j, 2, seed);
        let lambda = if seed % 3 == 0 { 0.1 } else { 0.0 };
        let prog = build_full_mip(&prob, 5.0, lambda).unwrap();
        let solver = BranchAndBound::default();
        let res = solver.solve(&prog, &Budget::unlimited()).unwrap();
        assert_eq!(res.status, SolveStatus::Optimal);
        let beta = prog.extract_beta(&res.values);
        let psi = prob.eval_psi_eps(&beta, prob.epsilon()).unwrap();
        assert!(
            (res.objective - (psi - lambda * l1(&beta))).abs() < 1e-6,
            "seed {seed}: objective {} vs psi_eps - reg {}",
            res.objective,
            psi - lambda * l1(&beta)
        );
    }
}

#[test]
fn lp_relaxation_bounds_integer_optimum() {
    let prob = build_problem(5, 2, 2, 30);
    let prog = build_full_mip(&prob, 5.0, 0.0).unwrap();
    let solver = BranchAndBound::default();
    let relaxed = solver.solve_relaxation(&prog).unwrap();
    let exact = solver.solve(&prog, &Budget::unlimited()).unwrap();
    assert_eq!(exact.status, SolveStatus::Optimal);
    assert!(relaxed.objective >= exact.objective - 1e-9);
}

#[test]
fn relaxation_equals_solve_when_binaries_fixed() {
    // A program whose every binary is fixed by restriction is a pure LP.
    let prob = build_problem(4, 2, 2, 31);
    let beta_bar = vec![vec![0.7, -0.4], vec![-0.2, 0.9]];
    let prog = build_restricted_mip_with(&prob, &beta_bar, (0.0, 0.0, 0.0, 0.0), 5.0, 0.0).unwrap();
    let (z1, z2) = prog.retained_counts();
    assert_eq!(z1 + z2, 0, "zero bands retain no margin binaries");
    let only_w = prog
        .binary_roles
        .iter()
        .all(|(_, r)| matches!(r, BinaryRole::W1 { .. } | BinaryRole::W2 { .. }));
    assert!(only_w, "chains collapse to constants when all z are fixed");
}

#[test]
fn restricted_with_infinite_bands_equals_full() {
    let prob = build_problem(5, 3, 2, 32);
    let beta_bar = vec![vec![0.1, 0.2], vec![-0.3, 0.4], vec![0.0, -0.5]];
    let inf = f64::INFINITY;
    let full = build_full_mip(&prob, 5.0, 0.0).unwrap();
    let restricted =
        build_restricted_mip_with(&prob, &beta_bar, (inf, inf, inf, inf), 5.0, 0.0).unwrap();
    assert_eq!(full.num_vars(), restricted.num_vars());
    assert_eq!(full.num_rows(), restricted.num_rows());
    let solver = BranchAndBound::default();
    let a = solver.solve(&full, &Budget::unlimited()).unwrap();
    let b = solver.solve(&restricted, &Budget::unlimited()).unwrap();
    assert!((a.objective - b.objective).abs() < 1e-8);
}

#[test]
fn restricted_optimum_at_most_full_optimum() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
    for seed in 40..44 {
        let prob = build_problem(5, 2, 2, seed);
        let beta_bar: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let full = build_full_mip(&prob, 5.0, 0.0).unwrap();
        let restricted =
            build_restricted_mip_with(&prob, &beta_bar, (0.05, 0.05, 0.05, 0.05), 5.0, 0.0)
                .unwrap();
        let solver = BranchAndBound::default();
        let a = solver.solve(&full, &Budget::unlimited()).unwrap();
        let b = solver.solve(&restricted, &Budget::unlimited()).unwrap();
        assert_eq!(a.status, SolveStatus::Optimal);
        assert_eq!(b.status, SolveStatus::Optimal);
        assert!(
            b.objective <= a.objective + 1e-8,
            "restricted {} > full {}",
            b.objective,
            a.objective
        );
        // Feasibility carry-over: the incumbent completes in the restricted
        // program, so its optimum is at least the incumbent's value.
        let at_incumbent = restricted.complete_beta(&beta_bar).unwrap().1;
        assert!(b.objective >= at_incumbent - 1e-8);
    }
}

#[test]
fn infeasible_program_reports_infeasible() {
    let prob = build_problem(2, 2, 1, 50);
    let mut prog = build_full_mip(&prob, 5.0, 0.0).unwrap();
    // Contradiction: 0 * b_1_1 >= 1.
    prog.rows.push(Row {
        name: "contradiction".into(),
        terms: vec![(0, 0.0)],
        op: RowOp::Ge,
        rhs: 1.0,
    });
    let solver = BranchAndBound::default();
    let res = solver.solve(&prog, &Budget::unlimited()).unwrap();
    assert_eq!(res.status, SolveStatus::Infeasible);
}

#[test]
fn warm_start_guarantees_incumbent_under_tiny_budget() {
    let prob = build_problem(6, 3, 2, 51);
    let prog = build_full_mip(&prob, 5.0, 0.0).unwrap();
    let beta = vec![vec![0.3, -0.1], vec![0.0, 0.2], vec![-0.4, 0.1]];
    let solver = BranchAndBound::default();
    let res = solver
        .solve(&prog, &Budget::nodes(0).with_warm_start(beta.clone()))
        .unwrap();
    assert_eq!(res.status, SolveStatus::FeasibleIncumbent);
    let psi = prob.eval_psi_eps(&beta, prob.epsilon()).unwrap();
    assert!(res.objective >= psi - 1e-7);
    assert!(res.best_bound >= res.objective);
}

#[test]
fn big_m_dominates_reachable_margins() {
    let prob = build_problem(6, 3, 3, 52);
    let prog = build_full_mip(&prob, 7.0, 0.0).unwrap();
    for x in prog.problem().covariates() {
        let reach: f64 = x.iter().map(|v| v.abs()).sum::<f64>() * 2.0 * 7.0;
        assert!(prog.big_m_upper >= reach + prog.problem().epsilon());
    }
    assert_eq!(prog.big_m_lower, -prog.big_m_upper);
}

#[test]
fn lp_format_dump_has_sections() {
    let prob = build_problem(2, 2, 1, 53);
    let prog = build_full_mip(&prob, 5.0, 0.1).unwrap();
    let text = prog.write_lp_format();
    for section in ["Maximize", "Subject To", "Bounds", "Binary", "End"] {
        assert!(text.contains(section), "missing {section}");
    }
    assert!(text.contains("z1_s1_j1"));
}

#[test]
fn deterministic_solve() {
    let prob = build_problem(5, 2, 2, 54);
    let prog = build_full_mip(&prob, 5.0, 0.0).unwrap();
    let solver = BranchAndBound::default();
    let a = solver.solve(&prog, &Budget::unlimited()).unwrap();
    let b = solver.solve(&prog, &Budget::unlimited()).unwrap();
    assert_eq!(a.objective, b.objective);
    assert_eq!(a.values, b.values);
    assert_eq!(a.nodes, b.nodes);
}

//! Synthetic data-generating processes, oracle evaluation, and the seeded
//! experiment runner that produces result tables.
//!
//! Two generators are built in. The `statistical` process draws covariates
//! uniformly from the unit square, pays `0.2 + theta_j . x` plus Gaussian
//! noise on the assigned arm, and logs treatments with probabilities
//! proportional to (0.9, 0.185, 0.015) over the (optimal, suboptimal, worst)
//! arms — the raw triple sums to 1.1 and is renormalized; the raw values stay
//! available in [`STATISTICAL_RAW_LOGGING`] for callers preferring a
//! different repair. Realized rewards are clamped into the declared [0, M]
//! bound; evaluation uses the unclamped analytic means. The `computational`
//! process draws rows from a finite support in the 20-dimensional unit cube,
//! logs by a softmax propensity model, and pays one of four exponential
//! reward surfaces plus a shared random-index covariate term and lognormal
//! noise.

use crate::data::{DataError, Dataset, LinearPolicy, Sample};
use crate::learn::{self, LearnMethod, LearnerSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Raw (unnormalized) logging probabilities over (optimal, suboptimal,
/// worst) arms; they sum to 1.1 and are divided by that sum.
pub const STATISTICAL_RAW_LOGGING: [f64; 3] = [0.9, 0.185, 0.015];

/// Declared reward bound for the statistical process.
const STATISTICAL_REWARD_BOUND: f64 = 2.0;
/// Reward-noise variance of the statistical process.
const STATISTICAL_NOISE_VAR: f64 = 0.01;
/// Declared reward bound for the computational process (the largest
/// exponential surface tops out below exp(6.4) + 1 + noise).
const COMPUTATIONAL_REWARD_BOUND: f64 = 610.0;
/// Lognormal noise variance (of the underlying normal).
const COMPUTATIONAL_NOISE_VAR: f64 = 0.001;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Learn(#[from] learn::LearnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("empty experiment grid")]
    EmptyGrid,
}

/// Which synthetic process to draw from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DgpSpec {
    Statistical { n: usize, seed: u64 },
    Computational { support: usize, n: usize, seed: u64 },
}

/// The statistical process's true reward surface: three arms over the unit
/// square with a shared intercept.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthModel {
    pub thetas: Vec<Vec<f64>>,
    pub intercept: f64,
}

impl TruthModel {
    pub fn statistical() -> Self {
        TruthModel {
            thetas: vec![vec![1.0, 0.5], vec![-0.5, 1.0], vec![-0.5, -0.5]],
            intercept: 0.2,
        }
    }

    /// Expected reward of `arm` at `x` (unclamped).
    pub fn mu(&self, x: &[f64], arm: usize) -> f64 {
        self.intercept + crate::data::dot(x, &self.thetas[arm - 1])
    }

    /// The truth model as a linear policy (so ties break identically).
    pub fn as_policy(&self) -> LinearPolicy {
        LinearPolicy {
            coefficients: self.thetas.clone(),
            base_scores: vec![self.intercept; self.thetas.len()],
        }
    }

    pub fn oracle_arm(&self, x: &[f64]) -> usize {
        self.as_policy().assign(x)
    }

    pub fn num_arms(&self) -> usize {
        self.thetas.len()
    }

    /// (optimal, suboptimal, worst) arms at `x`. Arm 3 is pointwise
    /// dominated, so it is always the worst.
    fn arm_ranking(&self, x: &[f64]) -> (usize, usize, usize) {
        let best = self.oracle_arm(x);
        let worst = 3;
        let sub = (1..=3).find(|&j| j != best && j != worst).unwrap();
        (best, sub, worst)
    }
}

/// Statistical process: returns the dataset and the oracle truth model.
pub fn generate_statistical(n: usize, seed: u64) -> Result<(Dataset, TruthModel), BenchError> {
    let truth = TruthModel::statistical();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, STATISTICAL_NOISE_VAR.sqrt()).expect("valid sigma");
    let total: f64 = STATISTICAL_RAW_LOGGING.iter().sum();
    let probs_by_rank: Vec<f64> = STATISTICAL_RAW_LOGGING.iter().map(|p| p / total).collect();
    let mut samples = Vec::with_capacity(n);
    let mut model = Vec::with_capacity(n);
    for _ in 0..n {
        let x = vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let (best, sub, worst) = truth.arm_ranking(&x);
        let mut probs = vec![0.0; 3];
        probs[best - 1] = probs_by_rank[0];
        probs[sub - 1] = probs_by_rank[1];
        probs[worst - 1] = probs_by_rank[2];
        let u: f64 = rng.random_range(0.0..1.0);
        let treatment = if u < probs[0] {
            1
        } else if u < probs[0] + probs[1] {
            2
        } else {
            3
        };
        let reward = (truth.mu(&x, treatment) + noise.sample(&mut rng))
            .clamp(0.0, STATISTICAL_REWARD_BOUND);
        samples.push(Sample {
            covariates: x,
            treatment,
            reward,
            propensity: probs[treatment - 1],
        });
        model.push(probs);
    }
    let eta = probs_by_rank[2];
    let ds = Dataset::new(
        samples,
        3,
        STATISTICAL_REWARD_BOUND,
        eta,
        Some(model),
    )?;
    Ok((ds, truth))
}

/// Computational process: `support` distinct points in the 20-cube, softmax
/// logging over 4 arms, exponential reward surfaces.
pub fn generate_computational(
    support: usize,
    n: usize,
    seed: u64,
) -> Result<Dataset, BenchError> {
    const P: usize = 20;
    const J: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support_points: Vec<Vec<f64>> = (0..support)
        .map(|_| (0..P).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let std_normal = Normal::new(0.0, 1.0).expect("valid sigma");
    // Theta[d][j]: softmax logits are theta_j . x.
    let thetas: Vec<Vec<f64>> = (0..J)
        .map(|_| (0..P).map(|_| std_normal.sample(&mut rng)).collect())
        .collect();
    // The random-index covariate term is drawn once per dataset.
    let r_index = rng.random_range(0..P);
    let noise = LogNormal::new(0.0, COMPUTATIONAL_NOISE_VAR.sqrt()).expect("valid sigma");

    let softmax = |x: &[f64]| -> Vec<f64> {
        let logits: Vec<f64> = thetas.iter().map(|t| crate::data::dot(x, t)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|e| e / z).collect()
    };
    let surface = |x: &[f64], arm: usize| -> f64 {
        let (x0, x1, x2) = (x[0], x[1], x[2]);
        match arm {
            1 => (1.2 + 0.2 * x0 + 1.7 * x1 - 0.2 * x2 + 2.0 * x0 * x1).exp(),
            2 => (1.0 - x0 + 2.0 * x1 + 2.0 * x0 * x1).exp(),
            3 => (1.2 + 0.2 * x0 + 1.7 * x1 - 0.1 * x2 + 2.0 * x0 * x1 + 1.3 * x0 * x1).exp(),
            _ => (1.6 + 2.0 * x0 - 0.1 * x1 + 2.0 * x0 * x1 - 1.2 * x1 * x2).exp(),
        }
    };

    let mut samples = Vec::with_capacity(n);
    let mut model = Vec::with_capacity(n);
    let mut eta: f64 = 1.0;
    for _ in 0..n {
        let x = support_points[rng.random_range(0..support)].clone();
        let probs = softmax(&x);
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        let mut treatment = J;
        for (j, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                treatment = j + 1;
                break;
            }
        }
        let reward = (surface(&x, treatment) + x[r_index] + noise.sample(&mut rng))
            .clamp(0.0, COMPUTATIONAL_REWARD_BOUND);
        eta = probs.iter().cloned().fold(eta, f64::min);
        samples.push(Sample {
            covariates: x,
            treatment,
            reward,
            propensity: probs[treatment - 1],
        });
        model.push(probs);
    }
    Ok(Dataset::new(
        samples,
        J,
        COMPUTATIONAL_REWARD_BOUND,
        eta.min(0.999),
        Some(model),
    )?)
}

/// Build a dataset (plus the truth model when there is one) from a spec.
pub fn generate(spec: &DgpSpec) -> Result<(Dataset, Option<TruthModel>), BenchError> {
    match spec {
        DgpSpec::Statistical { n, seed } => {
            let (ds, truth) = generate_statistical(*n, *seed)?;
            Ok((ds, Some(truth)))
        }
        DgpSpec::Computational { support, n, seed } => {
            Ok((generate_computational(*support, *n, *seed)?, None))
        }
    }
}

/// Out-of-sample evaluation of a policy against the oracle.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean oracle reward minus mean policy reward on the test draw
    /// (analytic means; nonnegative by construction).
    pub gap: f64,
    pub freq_optimal: f64,
    pub freq_suboptimal: f64,
    pub freq_worst: f64,
}

/// Draws fresh covariates and compares analytic mean rewards; with
/// `sampled_rewards` the paper-style noisy reward average is used instead.
pub fn evaluate_policy(
    policy: &LinearPolicy,
    truth: &TruthModel,
    test_size: usize,
    seed: u64,
    sampled_rewards: bool,
) -> EvalReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, STATISTICAL_NOISE_VAR.sqrt()).expect("valid sigma");
    let mut gap_sum = 0.0;
    let mut counts = [0usize; 3];
    for _ in 0..test_size {
        let x = vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let chosen = policy.assign(&x);
        let (best, sub, _worst) = truth.arm_ranking(&x);
        let mut oracle_reward = truth.mu(&x, best);
        let mut policy_reward = truth.mu(&x, chosen);
        if sampled_rewards {
            oracle_reward += noise.sample(&mut rng);
            policy_reward += noise.sample(&mut rng);
        }
        gap_sum += oracle_reward - policy_reward;
        let slot = if chosen == best {
            0
        } else if chosen == sub {
            1
        } else {
            2
        };
        counts[slot] += 1;
    }
    let nf = test_size as f64;
    EvalReport {
        gap: gap_sum / nf,
        freq_optimal: counts[0] as f64 / nf,
        freq_suboptimal: counts[1] as f64 / nf,
        freq_worst: counts[2] as f64 / nf,
    }
}

/// Experiment grid over methods and sample sizes with seeded replications.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub methods: Vec<LearnMethod>,
    pub sample_sizes: Vec<usize>,
    pub num_seeds: u64,
    pub base_seed: u64,
    pub test_size: usize,
    /// Learner template; method/seed are overridden per cell.
    pub spec: LearnerSpec,
    pub sampled_rewards: bool,
}

/// One replication's outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: LearnMethod,
    pub n: usize,
    pub seed: u64,
    pub report: EvalReport,
    pub objective: f64,
    pub wall_secs: f64,
    #[serde(skip)]
    pub trace: Option<crate::pip::PipTrace>,
}

/// Per-(method, n) aggregate over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub method: LearnMethod,
    pub n: usize,
    pub runs: usize,
    pub gap_mean: f64,
    pub gap_std: f64,
    pub freq_optimal_mean: f64,
    pub freq_suboptimal_mean: f64,
    pub freq_worst_mean: f64,
}

/// Runs every (method, n, seed) cell of the grid on the statistical process.
/// Replications run concurrently (up to `jobs` threads) with independent
/// seed-derived RNG streams; outputs are collected in grid order.
pub fn run_grid(grid: &ExperimentGrid, jobs: usize) -> Result<Vec<RunRecord>, BenchError> {
    if grid.methods.is_empty() || grid.sample_sizes.is_empty() || grid.num_seeds == 0 {
        return Err(BenchError::EmptyGrid);
    }
    let mut cells = Vec::new();
    for &method in &grid.methods {
        for &n in &grid.sample_sizes {
            for k in 0..grid.num_seeds {
                cells.push((method, n, grid.base_seed + k));
            }
        }
    }
    let run_cell = |&(method, n, seed): &(LearnMethod, usize, u64)| -> Result<RunRecord, BenchError> {
        let started = std::time::Instant::now();
        let (dataset, truth) = generate_statistical(n, seed)?;
        let mut spec = grid.spec.clone();
        spec.method = method;
        spec.seed = seed ^ 0x9E37_79B9_7F4A_7C15;
        let learned = learn::learn_policy(&dataset, &spec)?;
        let eval_seed = seed.wrapping_add(0xD1B5_4A32_D192_ED03);
        let report = evaluate_policy(
            &learned.policy,
            &truth,
            grid.test_size,
            eval_seed,
            grid.sampled_rewards,
        );
        Ok(RunRecord {
            method,
            n,
            seed,
            report,
            objective: learned.objective,
            wall_secs: started.elapsed().as_secs_f64(),
            trace: Some(learned.trace),
        })
    };
    let records: Vec<Result<RunRecord, BenchError>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        use rayon::prelude::*;
        pool.install(|| cells.par_iter().map(run_cell).collect())
    } else {
        cells.iter().map(run_cell).collect()
    };
    records.into_iter().collect()
}

pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRecord> {
    let mut keys: Vec<(LearnMethod, usize)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.method, r.n)) {
            keys.push((r.method, r.n));
        }
    }
    keys.iter()
        .map(|&(method, n)| {
            let group: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.method == method && r.n == n)
                .collect();
            let k = group.len() as f64;
            let gap_mean = group.iter().map(|r| r.report.gap).sum::<f64>() / k;
            let gap_var = group
                .iter()
                .map(|r| (r.report.gap - gap_mean).powi(2))
                .sum::<f64>()
                / k;
            AggregateRecord {
                method,
                n,
                runs: group.len(),
                gap_mean,
                gap_std: gap_var.sqrt(),
                freq_optimal_mean: group.iter().map(|r| r.report.freq_optimal).sum::<f64>() / k,
                freq_suboptimal_mean: group.iter().map(|r| r.report.freq_suboptimal).sum::<f64>()
                    / k,
                freq_worst_mean: group.iter().map(|r| r.report.freq_worst).sum::<f64>() / k,
            }
        })
        .collect()
}

/// Runs the grid and writes `results.csv`, `aggregate.csv`, a JSON manifest,
/// and archived PIP traces under `out/traces/`. Deterministic byte-for-byte
/// unless `include_timings` is set.
pub fn run_experiment(
    grid: &ExperimentGrid,
    out_dir: impl AsRef<Path>,
    jobs: usize,
    include_timings: bool,
) -> Result<(Vec<RunRecord>, Vec<AggregateRecord>), BenchError> {
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out.join("traces"))?;
    let records = run_grid(grid, jobs)?;
    let aggregates = aggregate(&records);

    let mut results = std::fs::File::create(out.join("results.csv"))?;
    writeln!(
        results,
        "method,n,seed,gap,freq_opt,freq_sub,freq_worst,wall_time"
    )?;
    for r in &records {
        let wall = if include_timings { r.wall_secs } else { 0.0 };
        writeln!(
            results,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.n,
            r.seed,
            r.report.gap,
            r.report.freq_optimal,
            r.report.freq_suboptimal,
            r.report.freq_worst,
            wall
        )?;
    }

    let mut agg = std::fs::File::create(out.join("aggregate.csv"))?;
    writeln!(
        agg,
        "method,n,runs,gap_mean,gap_std,freq_opt_mean,freq_sub_mean,freq_worst_mean"
    )?;
    for a in &aggregates {
        writeln!(
            agg,
            "{},{},{},{},{},{},{},{}",
            a.method,
            a.n,
            a.runs,
            a.gap_mean,
            a.gap_std,
            a.freq_optimal_mean,
            a.freq_suboptimal_mean,
            a.freq_worst_mean
        )?;
    }

    let manifest = serde_json::json!({
        "grid": grid,
        "jobs": jobs,
        "outputs": ["results.csv", "aggregate.csv"],
    });
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;

    for r in &records {
        if let Some(trace) = &r.trace {
            let path: PathBuf = out
                .join("traces")
                .join(format!("{}_{}_{}.jsonl", r.method, r.n, r.seed));
            let f = std::fs::File::create(path)?;
            trace.write_jsonl(f, include_timings)?;
        }
    }
    Ok((records, aggregates))
}

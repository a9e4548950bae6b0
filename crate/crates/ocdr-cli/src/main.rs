//! Batch command-line surface: simulate datasets, learn policies, inspect
//! clipping thresholds, and run experiment grids.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Every command is deterministic given (config, seed); wall-clock fields in
//! emitted files are zeroed unless `--timings` is passed.

mod config;

use clap::{Args, Parser, Subcommand};
use config::{DatasetManifest, RunConfig};
use ocdr::bench::{self, DgpSpec, ExperimentGrid};
use ocdr::data::{self, CsvSchema, Dataset, LinearPolicy};
use ocdr::learn::{self, LearnMethod, LearnedPolicyReport};
use ocdr::threshold;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ocdr", version, about = "Offline policy learning with optimized weight clipping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV plus its manifest.
    Simulate(SimulateArgs),
    /// Learn a policy from a dataset.
    Learn(LearnArgs),
    /// Report the MSE-optimal clipping threshold of a policy on a dataset.
    Threshold(ThresholdArgs),
    /// Run an experiment grid and emit result tables.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Data-generating process: statistical | computational.
    #[arg(long)]
    dgp: String,
    /// Number of rows.
    #[arg(long)]
    n: usize,
    /// Support size (computational process only).
    #[arg(long, default_value_t = 100)]
    support: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LearnArgs {
    /// Dataset CSV (bounds come from its manifest unless overridden).
    #[arg(long)]
    data: PathBuf,
    /// ocdrl | drl | ipwl.
    #[arg(long)]
    method: String,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Optional TOML config; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    split_fraction: Option<f64>,
    #[arg(long)]
    beta_box: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    reward_bound: Option<f64>,
    #[arg(long)]
    overlap_floor: Option<f64>,
    /// External treatment labels, comma separated, in arm order.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    /// Record real wall-clock timings (breaks byte-reproducibility).
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long)]
    data: PathBuf,
    /// Policy JSON (a learned-policy report or bare coefficients).
    #[arg(long)]
    policy: PathBuf,
    /// Also run the brute-force grid minimizer and assert agreement.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    reward_bound: Option<f64>,
    #[arg(long)]
    overlap_floor: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
}

#[derive(Args)]
struct BenchArgs {
    /// Methods to compare, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "ocdrl,drl,ipwl")]
    methods: Vec<String>,
    /// Sample sizes, comma separated.
    #[arg(long = "n", value_delimiter = ',', default_value = "400")]
    sample_sizes: Vec<usize>,
    /// Number of seeded replications per cell.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    #[arg(long, default_value_t = 10_000)]
    test_size: usize,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    /// Parallel replications (defaults to OCDR_JOBS or 1).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    timings: bool,
}

enum CliError {
    /// Configuration or schema problems: exit 2.
    Usage(String),
    /// Failures during an accepted run: exit 1.
    Runtime(String),
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Learn(args) => cmd_learn(args),
        Command::Threshold(args) => cmd_threshold(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let spec = match args.dgp.as_str() {
        "statistical" => DgpSpec::Statistical {
            n: args.n,
            seed: args.seed,
        },
        "computational" => DgpSpec::Computational {
            support: args.support,
            n: args.n,
            seed: args.seed,
        },
        other => return Err(CliError::Usage(format!("unknown dgp {other:?}"))),
    };
    let (dataset, _) = bench::generate(&spec).map_err(CliError::runtime)?;
    data::write_dataset_csv(&dataset, &args.out).map_err(CliError::runtime)?;
    let manifest = DatasetManifest {
        dgp: spec,
        reward_bound: dataset.reward_bound(),
        overlap_floor: dataset.overlap_floor(),
        num_treatments: dataset.num_treatments(),
        dim: dataset.dim(),
        rows: dataset.len(),
    };
    let manifest_path = DatasetManifest::path_for(&args.out);
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(CliError::runtime)?;
    println!(
        "wrote {} ({} rows) and {}",
        args.out.display(),
        dataset.len(),
        manifest_path.display()
    );
    Ok(())
}

/// Loads a dataset, pulling declared bounds from explicit flags, then the
/// sibling manifest, in that order.
fn load_dataset(
    path: &Path,
    reward_bound: Option<f64>,
    overlap_floor: Option<f64>,
    labels: Option<Vec<String>>,
) -> Result<Dataset, CliError> {
    let manifest_path = DatasetManifest::path_for(path);
    let manifest: Option<DatasetManifest> = std::fs::read_to_string(&manifest_path)
        .ok()
        .and_then(|text| serde_json::from_str(&text).ok());
    let bound = reward_bound
        .or(manifest.as_ref().map(|m| m.reward_bound))
        .ok_or_else(|| {
            CliError::Usage(format!(
                "--reward-bound required ({} has no manifest)",
                path.display()
            ))
        })?;
    let floor = overlap_floor
        .or(manifest.as_ref().map(|m| m.overlap_floor))
        .ok_or_else(|| CliError::Usage("--overlap-floor required".into()))?;
    let schema = match labels {
        Some(labels) => {
            let header = read_header(path)?;
            let mut schema = CsvSchema::infer(&header).map_err(CliError::usage)?;
            schema.treatment_labels = Some(labels);
            Some(schema)
        }
        None => None,
    };
    data::load_dataset(path, schema, (bound, floor)).map_err(CliError::usage)
}

fn read_header(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::usage)?;
    Ok(text
        .lines()
        .next()
        .unwrap_or("")
        .split(',')
        .map(|s| s.trim().to_string())
        .collect())
}

fn cmd_learn(args: LearnArgs) -> Result<(), CliError> {
    let config = match &args.config {
        Some(path) => RunConfig::load(path).map_err(CliError::Usage)?,
        None => RunConfig::default(),
    };
    let method = LearnMethod::parse(&args.method)
        .ok_or_else(|| CliError::Usage(format!("unknown method {:?}", args.method)))?;
    let seed = args.seed.or(config.learner.seed).unwrap_or(0);
    let mut spec = config.learner_spec(method, seed);
    if let Some(v) = args.lambda {
        spec.lambda = v;
        spec.pip.lambda = v;
    }
    if let Some(v) = args.split_fraction {
        spec.split_fraction = v;
    }
    if let Some(v) = args.beta_box {
        spec.beta_box = v;
        spec.pip.beta_box = v;
    }
    if args.epsilon.is_some() {
        spec.epsilon = args.epsilon;
    }
    let labels = args.labels.clone().or_else(|| config.data.labels.clone());
    let dataset = load_dataset(
        &args.data,
        args.reward_bound.or(config.data.reward_bound),
        args.overlap_floor.or(config.data.overlap_floor),
        labels,
    )?;
    if !dataset.has_propensity_model() {
        return Err(CliError::Usage(
            "learning requires full propensity columns e1..eJ in the dataset schema".into(),
        ));
    }

    let learned = learn::learn_policy(&dataset, &spec).map_err(CliError::runtime)?;
    std::fs::create_dir_all(&args.out_dir).map_err(CliError::runtime)?;
    let trace_name = "trace.jsonl";
    let trace_file =
        std::fs::File::create(args.out_dir.join(trace_name)).map_err(CliError::runtime)?;
    learned
        .trace
        .write_jsonl(trace_file, args.timings)
        .map_err(CliError::runtime)?;
    let report = learned.to_report(Some(trace_name.to_string()));
    std::fs::write(
        args.out_dir.join("policy.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(CliError::runtime)?;
    let manifest = serde_json::json!({
        "command": "learn",
        "data": args.data,
        "method": method,
        "spec": spec,
        "config": config,
    });
    std::fs::write(
        args.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(CliError::runtime)?;
    println!(
        "learned {method} policy: objective {}, outputs in {}",
        learned.objective,
        args.out_dir.display()
    );
    Ok(())
}

fn read_policy(path: &Path) -> Result<LinearPolicy, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::usage)?;
    if let Ok(report) = serde_json::from_str::<LearnedPolicyReport>(&text) {
        return LinearPolicy::new(report.coefficients, report.base_scores)
            .map_err(CliError::usage);
    }
    serde_json::from_str::<LinearPolicy>(&text)
        .map_err(|e| CliError::Usage(format!("policy file: {e}")))
        .and_then(|p| LinearPolicy::new(p.coefficients, p.base_scores).map_err(CliError::usage))
}

fn cmd_threshold(args: ThresholdArgs) -> Result<(), CliError> {
    let dataset = load_dataset(
        &args.data,
        args.reward_bound,
        args.overlap_floor,
        args.labels.clone(),
    )?;
    let policy = read_policy(&args.policy)?;
    let (_view, sums) =
        threshold::build_suffix_sums(&dataset, &policy).map_err(CliError::runtime)?;
    let tau = threshold::optimal_threshold(&_view, &sums).map_err(CliError::runtime)?;
    let objective =
        ocdr::estimators::mse_objective(&dataset, &policy).map_err(CliError::runtime)?;
    println!("tau_hat = {tau}");
    match sums.m_star() {
        Some(m) => println!("m_star = {m}"),
        None => println!("m_star = (pruning set empty)"),
    }
    println!("grid:");
    println!("rank,c,objective");
    for (i, (t, v)) in objective.taus.iter().zip(&objective.values).enumerate() {
        println!("{i},{t},{v}");
    }
    if args.oracle {
        let ips = data::counterfactual_ips(&dataset, &policy).map_err(CliError::usage)?;
        let perturbed = threshold::perturb_for_uniqueness(&ips).map_err(CliError::runtime)?;
        let matched: Vec<bool> = dataset
            .samples()
            .iter()
            .map(|s| policy.assign(&s.covariates) == s.treatment)
            .collect();
        let brute =
            threshold::oracle_threshold(&perturbed, &matched).map_err(CliError::runtime)?;
        println!("oracle tau_hat = {brute}");
        if brute != tau {
            return Err(CliError::Runtime(format!(
                "closed form {tau} disagrees with brute force {brute}"
            )));
        }
        println!("closed form and brute force agree");
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let config = match &args.config {
        Some(path) => RunConfig::load(path).map_err(CliError::Usage)?,
        None => RunConfig::default(),
    };
    let methods: Vec<LearnMethod> = args
        .methods
        .iter()
        .map(|m| {
            LearnMethod::parse(m).ok_or_else(|| CliError::Usage(format!("unknown method {m:?}")))
        })
        .collect::<Result<_, _>>()?;
    let jobs = args
        .jobs
        .or(config.bench.jobs)
        .or_else(|| std::env::var("OCDR_JOBS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1)
        .max(1);
    let spec = config.learner_spec(LearnMethod::Ocdrl, args.base_seed);
    let grid = ExperimentGrid {
        methods,
        sample_sizes: args.sample_sizes.clone(),
        num_seeds: args.seeds,
        base_seed: args.base_seed,
        test_size: args.test_size,
        spec,
        sampled_rewards: false,
    };
    let (records, aggregates) = bench::run_experiment(&grid, &args.out_dir, jobs, args.timings)
        .map_err(CliError::runtime)?;
    println!(
        "ran {} replications over {} cells; tables in {}",
        records.len(),
        aggregates.len(),
        args.out_dir.display()
    );
    for a in &aggregates {
        println!(
            "{} n={}: mean gap {:.4} (std {:.4}), worst-arm freq {:.4}",
            a.method, a.n, a.gap_mean, a.gap_std, a.freq_worst_mean
        );
    }
    Ok(())
}

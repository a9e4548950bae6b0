//! Logged-bandit data model: samples, datasets, linear policies, reward models,
//! and CSV ingestion with schema validation.
//!
//! A [`Dataset`] is an immutable table of (covariates, treatment, reward,
//! propensity) rows. Treatments are 1-based labels in `1..=J`. A dataset may
//! optionally carry the full propensity map `e(x, j)` per row, which is
//! required to evaluate counterfactual inverse propensity scores for arbitrary
//! policies (and hence for policy learning). A dataset with only logged-arm
//! propensities supports evaluation of the logging arm only.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Tolerance for `propensity_model` agreeing with each row's logged propensity.
const PROPENSITY_AGREEMENT_TOL: f64 = 1e-9;
/// Tolerance for each row of the propensity model summing to one.
const PROPENSITY_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}` in CSV header")]
    MissingColumn(String),
    #[error("row {row}: treatment label out of range (got {got}, expected 1..={max})")]
    TreatmentOutOfRange { row: usize, got: String, max: usize },
    #[error("row {row}: overlap violated (propensity {value} outside ({floor}, 1])")]
    OverlapViolated { row: usize, value: f64, floor: f64 },
    #[error("row {row}: reward {value} outside [0, {bound}]")]
    RewardOutOfBounds { row: usize, value: f64, bound: f64 },
    #[error("row {row}: covariate length {got} does not match dataset dimension {expected}")]
    DimensionMismatch { row: usize, got: usize, expected: usize },
    #[error("row {row}: propensity model disagrees with logged propensity ({model} vs {logged})")]
    PropensityModelMismatch { row: usize, model: f64, logged: f64 },
    #[error("row {row}: propensity model sums to {sum}, expected 1")]
    PropensityModelNotNormalized { row: usize, sum: f64 },
    #[error("row {row}: failed to parse field `{field}`: {reason}")]
    Parse { row: usize, field: String, reason: String },
    #[error("invalid bounds: reward bound M must be >= 1 and finite (got {0})")]
    InvalidRewardBound(f64),
    #[error("invalid bounds: overlap floor eta must lie in (0, 1) (got {0})")]
    InvalidOverlapFloor(f64),
    #[error("dataset is empty")]
    Empty,
    #[error("full propensity model required for this operation (dataset has logged-arm propensities only)")]
    PropensityModelRequired,
    #[error("policy shape mismatch: {0}")]
    PolicyShape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// One logged interaction: covariates, the treatment actually assigned, the
/// observed reward, and the logged propensity `e(X^s, D_s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub covariates: Vec<f64>,
    /// Treatment label in `1..=J`.
    pub treatment: usize,
    /// Observed reward in `[0, M]`.
    pub reward: f64,
    /// Logged probability of the assigned treatment, in `(0, 1]`.
    pub propensity: f64,
}

/// Immutable logged-bandit table plus declared bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_treatments: usize,
    dim: usize,
    /// Declared reward bound `M >= 1`.
    reward_bound: f64,
    /// Declared overlap floor `eta` in (0, 1).
    overlap_floor: f64,
    /// Optional full propensity map: `propensity_model[s][j-1] = e(X^s, j)`.
    propensity_model: Option<Vec<Vec<f64>>>,
}

impl Dataset {
    /// Validates every invariant and returns the dataset or the first
    /// violation (with its row index).
    pub fn new(
        samples: Vec<Sample>,
        num_treatments: usize,
        reward_bound: f64,
        overlap_floor: f64,
        propensity_model: Option<Vec<Vec<f64>>>,
    ) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::Empty);
        }
        if !(reward_bound >= 1.0) || !reward_bound.is_finite() {
            return Err(DataError::InvalidRewardBound(reward_bound));
        }
        if !(overlap_floor > 0.0 && overlap_floor < 1.0) {
            return Err(DataError::InvalidOverlapFloor(overlap_floor));
        }
        let dim = samples[0].covariates.len();
        for (row, s) in samples.iter().enumerate() {
            if s.covariates.len() != dim {
                return Err(DataError::DimensionMismatch {
                    row,
                    got: s.covariates.len(),
                    expected: dim,
                });
            }
            if s.covariates.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite("covariates"));
            }
            if s.treatment < 1 || s.treatment > num_treatments {
                return Err(DataError::TreatmentOutOfRange {
                    row,
                    got: s.treatment.to_string(),
                    max: num_treatments,
                });
            }
            if !(s.propensity >= overlap_floor && s.propensity <= 1.0) {
                return Err(DataError::OverlapViolated {
                    row,
                    value: s.propensity,
                    floor: overlap_floor,
                });
            }
            if !(s.reward >= 0.0 && s.reward <= reward_bound) {
                return Err(DataError::RewardOutOfBounds {
                    row,
                    value: s.reward,
                    bound: reward_bound,
                });
            }
        }
        if let Some(model) = &propensity_model {
            for (row, (probs, s)) in model.iter().zip(&samples).enumerate() {
                if probs.len() != num_treatments {
                    return Err(DataError::PolicyShape(format!(
                        "propensity model row {row} has {} entries, expected {num_treatments}",
                        probs.len()
                    )));
                }
                let sum: f64 = probs.iter().sum();
                if (sum - 1.0).abs() > PROPENSITY_SUM_TOL {
                    return Err(DataError::PropensityModelNotNormalized { row, sum });
                }
                let at_logged = probs[s.treatment - 1];
                if (at_logged - s.propensity).abs() > PROPENSITY_AGREEMENT_TOL {
                    return Err(DataError::PropensityModelMismatch {
                        row,
                        model: at_logged,
                        logged: s.propensity,
                    });
                }
            }
        }
        Ok(Self {
            samples,
            num_treatments,
            dim,
            reward_bound,
            overlap_floor,
            propensity_model,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_treatments(&self) -> usize {
        self.num_treatments
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    pub fn overlap_floor(&self) -> f64 {
        self.overlap_floor
    }

    pub fn has_propensity_model(&self) -> bool {
        self.propensity_model.is_some()
    }

    /// Full propensity map `e(X^s, j)` for row `s` (1-based arm `j`).
    pub fn propensity(&self, row: usize, arm: usize) -> Option<f64> {
        self.propensity_model.as_ref().map(|m| m[row][arm - 1])
    }

    /// Sub-dataset over the given row indices (propensity model carried over).
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset, DataError> {
        let samples = rows.iter().map(|&r| self.samples[r].clone()).collect();
        let model = self
            .propensity_model
            .as_ref()
            .map(|m| rows.iter().map(|&r| m[r].clone()).collect());
        Dataset::new(
            samples,
            self.num_treatments,
            self.reward_bound,
            self.overlap_floor,
            model,
        )
    }
}

/// Linear decision rule: amongst arms `j`, pick the smallest index maximizing
/// `x . beta_j + b_j` (strict inequality against lower indices, weak against
/// higher ones).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    /// One coefficient vector per arm, each of length `p`.
    pub coefficients: Vec<Vec<f64>>,
    /// Fixed base scores `b_j`, never learned.
    pub base_scores: Vec<f64>,
}

impl LinearPolicy {
    pub fn new(coefficients: Vec<Vec<f64>>, base_scores: Vec<f64>) -> Result<Self, DataError> {
        if coefficients.is_empty() || coefficients.len() != base_scores.len() {
            return Err(DataError::PolicyShape(format!(
                "{} coefficient vectors vs {} base scores",
                coefficients.len(),
                base_scores.len()
            )));
        }
        let p = coefficients[0].len();
        if coefficients.iter().any(|c| c.len() != p) {
            return Err(DataError::PolicyShape("ragged coefficient vectors".into()));
        }
        let finite = coefficients.iter().flatten().all(|v| v.is_finite())
            && base_scores.iter().all(|v| v.is_finite());
        if !finite {
            return Err(DataError::NonFinite("policy parameters"));
        }
        Ok(Self {
            coefficients,
            base_scores,
        })
    }

    /// Policy that assigns every unit the same arm.
    pub fn constant(arm: usize, num_treatments: usize, dim: usize) -> Self {
        let mut base = vec![0.0; num_treatments];
        base[arm - 1] = 1.0;
        Self {
            coefficients: vec![vec![0.0; dim]; num_treatments],
            base_scores: base,
        }
    }

    pub fn num_treatments(&self) -> usize {
        self.coefficients.len()
    }

    pub fn dim(&self) -> usize {
        self.coefficients[0].len()
    }

    pub fn score(&self, covariates: &[f64], arm: usize) -> f64 {
        dot(covariates, &self.coefficients[arm - 1]) + self.base_scores[arm - 1]
    }

    /// Assigned arm for `covariates`: the smallest index attaining the maximum
    /// score.
    pub fn assign(&self, covariates: &[f64]) -> usize {
        debug_assert_eq!(covariates.len(), self.dim());
        let mut best = 1usize;
        let mut best_score = self.score(covariates, 1);
        for j in 2..=self.num_treatments() {
            let s = self.score(covariates, j);
            if s > best_score {
                best = j;
                best_score = s;
            }
        }
        best
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-treatment expected-reward predictor, clamped to `[0, M]` at this
/// boundary. Deterministic for fixed inputs.
pub struct RewardModel {
    inner: Box<dyn Fn(&[f64], usize) -> f64 + Send + Sync>,
    bound: f64,
    descriptor: String,
}

impl fmt::Debug for RewardModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RewardModel({}, bound={})", self.descriptor, self.bound)
    }
}

impl RewardModel {
    pub fn from_fn<F>(f: F, bound: f64, descriptor: impl Into<String>) -> Self
    where
        F: Fn(&[f64], usize) -> f64 + Send + Sync + 'static,
    {
        Self {
            inner: Box::new(f),
            bound,
            descriptor: descriptor.into(),
        }
    }

    pub fn constant(value: f64, bound: f64) -> Self {
        Self::from_fn(move |_, _| value, bound, format!("constant {value}"))
    }

    pub fn zero(bound: f64) -> Self {
        Self::constant(0.0, bound)
    }

    /// Per-arm affine model: `intercept_j + x . coef_j`.
    pub fn linear(coefficients: Vec<Vec<f64>>, intercepts: Vec<f64>, bound: f64) -> Self {
        Self::from_fn(
            move |x, arm| intercepts[arm - 1] + dot(x, &coefficients[arm - 1]),
            bound,
            "per-arm linear",
        )
    }

    /// Prediction clamped to `[0, M]`.
    pub fn predict(&self, covariates: &[f64], arm: usize) -> f64 {
        (self.inner)(covariates, arm).clamp(0.0, self.bound)
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }
}

/// Which propensity columns a CSV carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PropensityColumns {
    /// A single column with the logged-arm propensity.
    Logged(String),
    /// One column per arm: the full propensity model.
    Full(Vec<String>),
}

/// Column mapping for dataset CSV files.
///
/// The canonical header is `x1..xp, d, y` plus either `e` or `e1..eJ`.
/// External treatment labels are mapped to internal `1..=J` through
/// `treatment_labels` (index `j-1` holds the external label for arm `j`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub covariates: Vec<String>,
    pub treatment: String,
    pub reward: String,
    pub propensity: PropensityColumns,
    pub treatment_labels: Option<Vec<String>>,
}

impl CsvSchema {
    /// Infers the canonical schema from a header: covariates `x1..xp`,
    /// treatment `d`, reward `y`, propensities `e` or `e1..eJ`.
    pub fn infer(header: &[String]) -> Result<Self, DataError> {
        let mut covariates: Vec<(usize, String)> = Vec::new();
        let mut full: Vec<(usize, String)> = Vec::new();
        let mut logged = None;
        let mut treatment = None;
        let mut reward = None;
        for name in header {
            let n = name.trim();
            if let Some(idx) = n.strip_prefix('x').and_then(|t| t.parse::<usize>().ok()) {
                covariates.push((idx, n.to_string()));
            } else if let Some(idx) = n.strip_prefix('e').and_then(|t| t.parse::<usize>().ok()) {
                full.push((idx, n.to_string()));
            } else {
                match n {
                    "d" => treatment = Some(n.to_string()),
                    "y" => reward = Some(n.to_string()),
                    "e" => logged = Some(n.to_string()),
                    _ => {}
                }
            }
        }
        covariates.sort();
        full.sort();
        let covariates: Vec<String> = covariates.into_iter().map(|(_, n)| n).collect();
        if covariates.is_empty() {
            return Err(DataError::MissingColumn("x1".into()));
        }
        let propensity = if !full.is_empty() {
            PropensityColumns::Full(full.into_iter().map(|(_, n)| n).collect())
        } else if let Some(e) = logged {
            PropensityColumns::Logged(e)
        } else {
            return Err(DataError::MissingColumn("e (or e1..eJ)".into()));
        };
        Ok(Self {
            covariates,
            treatment: treatment.ok_or_else(|| DataError::MissingColumn("d".into()))?,
            reward: reward.ok_or_else(|| DataError::MissingColumn("y".into()))?,
            propensity,
            treatment_labels: None,
        })
    }

    fn map_treatment(&self, raw: &str, num_treatments: usize, row: usize) -> Result<usize, DataError> {
        if let Some(labels) = &self.treatment_labels {
            match labels.iter().position(|l| l == raw.trim()) {
                Some(pos) => Ok(pos + 1),
                None => Err(DataError::TreatmentOutOfRange {
                    row,
                    got: raw.to_string(),
                    max: num_treatments,
                }),
            }
        } else {
            raw.trim()
                .parse::<usize>()
                .map_err(|_| DataError::Parse {
                    row,
                    field: self.treatment.clone(),
                    reason: format!("not an integer label: {raw:?}"),
                })
        }
    }
}

/// Number of arms a schema implies: explicit labels, else full-propensity
/// column count, else the max label seen in the data.
fn schema_num_treatments(schema: &CsvSchema, max_seen: usize) -> usize {
    if let Some(labels) = &schema.treatment_labels {
        labels.len()
    } else if let PropensityColumns::Full(cols) = &schema.propensity {
        cols.len()
    } else {
        max_seen
    }
}

/// Loads and validates a dataset CSV. Decimal floats only; no locale-dependent
/// parsing. `bounds = (M, eta)`.
pub fn load_dataset(
    path: impl AsRef<Path>,
    schema: Option<CsvSchema>,
    bounds: (f64, f64),
) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path)?;
    load_dataset_from_reader(&bytes[..], schema, bounds)
}

/// Same as [`load_dataset`] but from any reader (used by tests and fuzzing).
pub fn load_dataset_from_reader(
    reader: impl std::io::Read,
    schema: Option<CsvSchema>,
    bounds: (f64, f64),
) -> Result<Dataset, DataError> {
    let (reward_bound, overlap_floor) = bounds;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let schema = match schema {
        Some(s) => s,
        None => CsvSchema::infer(&header)?,
    };
    let col = |name: &str| -> Result<usize, DataError> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let x_cols: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<_, _>>()?;
    let d_col = col(&schema.treatment)?;
    let y_col = col(&schema.reward)?;
    let prop_cols: Result<Vec<usize>, DataError> = match &schema.propensity {
        PropensityColumns::Logged(c) => Ok(vec![col(c)?]),
        PropensityColumns::Full(cs) => cs.iter().map(|c| col(c)).collect(),
    };
    let prop_cols = prop_cols?;
    let full_model = matches!(schema.propensity, PropensityColumns::Full(_));

    let parse = |row: usize, field: &str, raw: &str| -> Result<f64, DataError> {
        raw.trim().parse::<f64>().map_err(|_| DataError::Parse {
            row,
            field: field.to_string(),
            reason: format!("not a decimal float: {raw:?}"),
        })
    };

    let mut samples = Vec::new();
    let mut model_rows: Vec<Vec<f64>> = Vec::new();
    let mut max_label = 0usize;
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let get = |c: usize| record.get(c).unwrap_or("");
        let covariates: Vec<f64> = x_cols
            .iter()
            .enumerate()
            .map(|(k, &c)| parse(row, &schema.covariates[k], get(c)))
            .collect::<Result<_, _>>()?;
        let n_arms_hint = schema_num_treatments(&schema, usize::MAX);
        let treatment = schema.map_treatment(get(d_col), n_arms_hint, row)?;
        max_label = max_label.max(treatment);
        let reward = parse(row, &schema.reward, get(y_col))?;
        let propensity = if full_model {
            let probs: Vec<f64> = prop_cols
                .iter()
                .enumerate()
                .map(|(k, &c)| parse(row, &format!("e{}", k + 1), get(c)))
                .collect::<Result<_, _>>()?;
            if treatment < 1 || treatment > probs.len() {
                return Err(DataError::TreatmentOutOfRange {
                    row,
                    got: treatment.to_string(),
                    max: probs.len(),
                });
            }
            let logged = probs[treatment - 1];
            model_rows.push(probs);
            logged
        } else {
            parse(row, "e", get(prop_cols[0]))?
        };
        samples.push(Sample {
            covariates,
            treatment,
            reward,
            propensity,
        });
    }
    let num_treatments = schema_num_treatments(&schema, max_label);
    Dataset::new(
        samples,
        num_treatments,
        reward_bound,
        overlap_floor,
        full_model.then_some(model_rows),
    )
}

/// Writes a dataset in the canonical CSV schema (full propensity columns when
/// the model is present). Floats use shortest round-trip formatting.
pub fn write_dataset_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_path(path)?;
    let p = dataset.dim();
    let j_count = dataset.num_treatments();
    let mut header: Vec<String> = (1..=p).map(|i| format!("x{i}")).collect();
    header.push("d".into());
    header.push("y".into());
    if dataset.has_propensity_model() {
        header.extend((1..=j_count).map(|j| format!("e{j}")));
    } else {
        header.push("e".into());
    }
    wtr.write_record(&header)?;
    for (row, s) in dataset.samples().iter().enumerate() {
        let mut rec: Vec<String> = s.covariates.iter().map(|v| format!("{v}")).collect();
        rec.push(format!("{}", s.treatment));
        rec.push(format!("{}", s.reward));
        if dataset.has_propensity_model() {
            for j in 1..=j_count {
                rec.push(format!("{}", dataset.propensity(row, j).unwrap()));
            }
        } else {
            rec.push(format!("{}", s.propensity));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Counterfactual inverse propensity scores `C_s = 1 / e(X^s, g(X^s))`.
///
/// Requires the full propensity model; every entry lies in `[1, 1/eta]`.
pub fn counterfactual_ips(dataset: &Dataset, policy: &LinearPolicy) -> Result<Vec<f64>, DataError> {
    if !dataset.has_propensity_model() {
        return Err(DataError::PropensityModelRequired);
    }
    Ok(dataset
        .samples()
        .iter()
        .enumerate()
        .map(|(row, s)| {
            let arm = policy.assign(&s.covariates);
            1.0 / dataset.propensity(row, arm).unwrap()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_row_csv() -> &'static str {
        "x1,x2,d,y,e1,e2\n0.1,0.2,1,0.5,0.7,0.3\n0.9,0.4,2,0.25,0.6,0.4\n"
    }

    #[test]
    fn loads_wellformed_csv() {
        let ds = load_dataset_from_reader(two_row_csv().as_bytes(), None, (1.0, 0.1)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.num_treatments(), 2);
        assert!(ds.has_propensity_model());
        assert_eq!(ds.samples()[0].propensity, 0.7);
        assert_eq!(ds.propensity(1, 1), Some(0.6));
    }

    #[test]
    fn zero_propensity_is_overlap_violation() {
        let csv = "x1,d,y,e\n0.1,1,0.5,0.0\n";
        let err = load_dataset_from_reader(csv.as_bytes(), None, (1.0, 0.05)).unwrap_err();
        match err {
            DataError::OverlapViolated { row, .. } => assert_eq!(row, 0),
            other => panic!("expected overlap violation, got {other}"),
        }
    }

    #[test]
    fn treatment_label_out_of_range() {
        let csv = "x1,d,y,e1,e2,e3\n0.1,5,0.5,0.5,0.3,0.2\n";
        let err = load_dataset_from_reader(csv.as_bytes(), None, (1.0, 0.05)).unwrap_err();
        assert!(matches!(err, DataError::TreatmentOutOfRange { row: 0, .. }));
    }

    #[test]
    fn reward_outside_bounds_reported_with_row() {
        let csv = "x1,d,y,e\n0.1,1,0.5,0.5\n0.2,1,7.0,0.5\n";
        let err = load_dataset_from_reader(csv.as_bytes(), None, (1.0, 0.05)).unwrap_err();
        assert!(matches!(err, DataError::RewardOutOfBounds { row: 1, .. }));
    }

    #[test]
    fn external_labels_map_to_internal() {
        let csv = "x1,d,y,e1,e2,e3\n0.1,0,0.5,0.8,0.18,0.02\n0.3,2,0.1,0.8,0.18,0.02\n";
        let mut schema = CsvSchema::infer(&["x1", "d", "y", "e1", "e2", "e3"].map(String::from)).unwrap();
        schema.treatment_labels = Some(vec!["0".into(), "1".into(), "2".into()]);
        let ds = load_dataset_from_reader(csv.as_bytes(), Some(schema), (1.0, 0.01)).unwrap();
        assert_eq!(ds.samples()[0].treatment, 1);
        assert_eq!(ds.samples()[1].treatment, 3);
    }

    #[test]
    fn propensity_model_mismatch_detected() {
        let samples = vec![Sample {
            covariates: vec![0.0],
            treatment: 1,
            reward: 0.0,
            propensity: 0.5,
        }];
        let err = Dataset::new(samples, 2, 1.0, 0.1, Some(vec![vec![0.6, 0.4]])).unwrap_err();
        assert!(matches!(err, DataError::PropensityModelMismatch { row: 0, .. }));
    }

    #[test]
    fn assign_picks_smallest_maximizer() {
        let p = LinearPolicy::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap();
        assert_eq!(p.assign(&[1.0, 0.0]), 1);
        let zero = LinearPolicy::new(vec![vec![0.0]; 3], vec![0.0; 3]).unwrap();
        assert_eq!(zero.assign(&[4.2]), 1);
    }

    #[test]
    fn assign_matches_section_7_2_truth_region() {
        // Truth model arms: theta_1=(1,.5), theta_2=(-.5,1), intercept shared,
        // so arm 2 wins iff x2 > 3 x1.
        let p = LinearPolicy::new(
            vec![vec![1.0, 0.5], vec![-0.5, 1.0], vec![-0.5, -0.5]],
            vec![0.0; 3],
        )
        .unwrap();
        assert_eq!(p.assign(&[0.2, 0.9]), 2);
        assert_eq!(p.assign(&[0.5, 0.5]), 1);
    }

    #[test]
    fn counterfactual_ips_identity_and_uniform() {
        let ds = load_dataset_from_reader(two_row_csv().as_bytes(), None, (1.0, 0.1)).unwrap();
        // Policy assigning each sample its logged arm: x1 > 0.5 -> arm 2.
        let logging_like =
            LinearPolicy::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![0.5, 0.0]).unwrap();
        assert_eq!(logging_like.assign(&ds.samples()[0].covariates), 1);
        assert_eq!(logging_like.assign(&ds.samples()[1].covariates), 2);
        let ips = counterfactual_ips(&ds, &logging_like).unwrap();
        assert!((ips[0] - 1.0 / 0.7).abs() < 1e-12);
        assert!((ips[1] - 1.0 / 0.4).abs() < 1e-12);

        let uniform = "x1,d,y,e1,e2\n0.1,1,0.5,0.5,0.5\n0.9,2,0.25,0.5,0.5\n";
        let ds = load_dataset_from_reader(uniform.as_bytes(), None, (1.0, 0.1)).unwrap();
        for arm in 1..=2 {
            let pol = LinearPolicy::constant(arm, 2, 1);
            for c in counterfactual_ips(&ds, &pol).unwrap() {
                assert!((c - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn counterfactual_ips_requires_full_model() {
        let csv = "x1,d,y,e\n0.1,1,0.5,0.5\n";
        let ds = load_dataset_from_reader(csv.as_bytes(), None, (1.0, 0.1)).unwrap();
        let pol = LinearPolicy::constant(1, 1, 1);
        assert!(matches!(
            counterfactual_ips(&ds, &pol),
            Err(DataError::PropensityModelRequired)
        ));
    }

    #[test]
    fn reward_model_clamps_at_boundary() {
        let m = RewardModel::from_fn(|_, _| 5.0, 2.0, "test");
        assert_eq!(m.predict(&[0.0], 1), 2.0);
        let m = RewardModel::from_fn(|_, _| -1.0, 2.0, "test");
        assert_eq!(m.predict(&[0.0], 1), 0.0);
    }

    proptest! {
        // Adding a common vector to every beta_j and a common constant to
        // every b_j never changes assignments.
        #[test]
        fn assign_shift_invariance(
            coefs in proptest::collection::vec(
                proptest::collection::vec(-5.0f64..5.0, 3), 2..5),
            shift in proptest::collection::vec(-5.0f64..5.0, 3),
            c in -5.0f64..5.0,
            x in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let j_count = coefs.len();
            let base: Vec<f64> = (0..j_count).map(|j| j as f64 * 0.25).collect();
            let p1 = LinearPolicy::new(coefs.clone(), base.clone()).unwrap();
            let shifted: Vec<Vec<f64>> = coefs
                .iter()
                .map(|b| b.iter().zip(&shift).map(|(a, s)| a + s).collect())
                .collect();
            let base2: Vec<f64> = base.iter().map(|b| b + c).collect();
            let p2 = LinearPolicy::new(shifted, base2).unwrap();
            prop_assert_eq!(p1.assign(&x), p2.assign(&x));
        }

        // Exhaustive-ish tie handling at p=1: assign returns the smallest
        // maximizing index over rational score grids.
        #[test]
        fn assign_tie_break_lowest_index(
            scores in proptest::collection::vec(-2i32..=2, 2..=4),
            x in 0.5f64..2.0,
        ) {
            let j_count = scores.len();
            let coefs: Vec<Vec<f64>> = scores.iter().map(|&s| vec![s as f64]).collect();
            let policy = LinearPolicy::new(coefs, vec![0.0; j_count]).unwrap();
            let vals: Vec<f64> = scores.iter().map(|&s| s as f64 * x).collect();
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let expected = vals.iter().position(|&v| v == max).unwrap() + 1;
            prop_assert_eq!(policy.assign(&[x]), expected);
        }
    }
}

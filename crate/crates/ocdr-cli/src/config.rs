//! Run configuration: a TOML file with flat key-value sections, every field
//! overridable on the command line. The resolved configuration is embedded in
//! the run manifest for reproducibility.

use ocdr::learn::{LearnMethod, LearnerSpec, RewardModelKind};
use ocdr::pip::PipConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub learner: LearnerSection,
    #[serde(default)]
    pub pip: PipSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// CSV path (exactly one data source: either this or a bench/simulate
    /// generator invocation).
    pub path: Option<PathBuf>,
    pub reward_bound: Option<f64>,
    pub overlap_floor: Option<f64>,
    /// External treatment labels for arm 1..J, in order.
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSection {
    pub method: Option<String>,
    pub split_fraction: Option<f64>,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub beta_box: Option<f64>,
    pub seed: Option<u64>,
    pub ridge: Option<f64>,
    pub base_scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipSection {
    pub r0: Option<f64>,
    pub r_max: Option<f64>,
    pub r_min: Option<f64>,
    pub delta_expand: Option<f64>,
    pub delta_shrink: Option<f64>,
    pub nu_max: Option<usize>,
    pub nu_tilde_max: Option<usize>,
    pub node_budget: Option<u64>,
    pub time_budget_secs: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub methods: Option<Vec<String>>,
    pub sample_sizes: Option<Vec<usize>>,
    pub num_seeds: Option<u64>,
    pub base_seed: Option<u64>,
    pub test_size: Option<usize>,
    pub jobs: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let config: RunConfig = toml::from_str(text).map_err(|e| format!("config: {e}"))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(path) = &self.data.path {
            if !path.exists() {
                return Err(format!("data path {} does not exist", path.display()));
            }
        }
        if let Some(m) = &self.learner.method {
            if LearnMethod::parse(m).is_none() {
                return Err(format!("unknown method {m:?} (expected ocdrl, drl, or ipwl)"));
            }
        }
        if let Some(f) = self.learner.split_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(format!("split_fraction must lie in (0, 1), got {f}"));
            }
        }
        if let Some(methods) = &self.bench.methods {
            for m in methods {
                if LearnMethod::parse(m).is_none() {
                    return Err(format!("unknown bench method {m:?}"));
                }
            }
        }
        Ok(())
    }

    /// Learner spec with config values applied over the defaults.
    pub fn learner_spec(&self, method: LearnMethod, seed: u64) -> LearnerSpec {
        let mut spec = LearnerSpec::new(method, seed);
        let l = &self.learner;
        if let Some(f) = l.split_fraction {
            spec.split_fraction = f;
        }
        if let Some(v) = l.lambda {
            spec.lambda = v;
        }
        spec.epsilon = l.epsilon;
        if let Some(v) = l.beta_box {
            spec.beta_box = v;
        }
        if let Some(r) = l.ridge {
            spec.reward_model = RewardModelKind::RidgeLinear { ridge: r };
        }
        spec.base_scores = l.base_scores.clone();
        spec.pip = self.pip_config();
        spec.pip.beta_box = spec.beta_box;
        spec.pip.lambda = spec.lambda;
        spec
    }

    pub fn pip_config(&self) -> PipConfig {
        let mut pip = PipConfig::default();
        let p = &self.pip;
        if let Some(v) = p.r0 {
            pip.r0 = v;
        }
        if let Some(v) = p.r_max {
            pip.r_max = v;
        }
        if let Some(v) = p.r_min {
            pip.r_min = v;
        }
        if let Some(v) = p.delta_expand {
            pip.delta_expand = v;
        }
        if let Some(v) = p.delta_shrink {
            pip.delta_shrink = v;
        }
        if let Some(v) = p.nu_max {
            pip.nu_max = v;
        }
        if let Some(v) = p.nu_tilde_max {
            pip.nu_tilde_max = v;
        }
        if let Some(v) = p.node_budget {
            pip.node_budget = Some(v);
        }
        pip.time_budget_secs = p.time_budget_secs;
        pip
    }
}

/// Manifest written next to simulated datasets so downstream commands can
/// recover declared bounds and labels without re-specifying them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dgp: ocdr::bench::DgpSpec,
    pub reward_bound: f64,
    pub overlap_floor: f64,
    pub num_treatments: usize,
    pub dim: usize,
    pub rows: usize,
}

impl DatasetManifest {
    pub fn path_for(data: &Path) -> PathBuf {
        let mut name = data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "data".into());
        name.push_str(".manifest.json");
        data.with_file_name(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let cfg = RunConfig::parse(
            "[learner]\nmethod = \"ocdrl\"\nlambda = 0.1\n\n[pip]\nnu_max = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.learner.method.as_deref(), Some("ocdrl"));
        assert_eq!(cfg.pip_config().nu_max, 5);
        assert!(RunConfig::parse("[learner]\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("[learner]\nmethod = \"nope\"\n").is_err());
    }

    #[test]
    fn missing_data_path_is_rejected() {
        let err = RunConfig::parse("[data]\npath = \"/definitely/not/here.csv\"\n").unwrap_err();
        assert!(err.contains("does not exist"));
    }

    #[test]
    fn manifest_path_derivation() {
        assert_eq!(
            DatasetManifest::path_for(Path::new("/tmp/d.csv")),
            PathBuf::from("/tmp/d.manifest.json")
        );
    }
}

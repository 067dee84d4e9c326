//! Experiment configuration: JSON files with defaults matching the built-in
//! benchmark cases.

use serde::{Deserialize, Serialize};

use hetgp::error::{Error, Result};
use hetgp::models::Variant;

/// Built-in benchmark case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseName {
    Noisy,
    Park,
}

impl CaseName {
    pub fn name(self) -> &'static str {
        match self {
            CaseName::Noisy => "noisy",
            CaseName::Park => "park",
        }
    }

    /// Default target-task training size.
    pub fn default_n1(self) -> usize {
        match self {
            CaseName::Noisy => 5,
            CaseName::Park => 6,
        }
    }
}

impl std::str::FromStr for CaseName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noisy" => Ok(CaseName::Noisy),
            "park" => Ok(CaseName::Park),
            other => Err(Error::contract(format!("unknown case '{other}'"))),
        }
    }
}

impl std::fmt::Display for CaseName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Seed specification: an explicit list or a count expanding to `0..count`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    Count(u64),
    List(Vec<u64>),
}

impl Seeds {
    pub fn resolve(&self) -> Vec<u64> {
        match self {
            Seeds::Count(n) => (0..*n).collect(),
            Seeds::List(v) => v.clone(),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::Count(10)
    }
}

fn default_models() -> Vec<String> {
    Variant::ALL.iter().map(|v| v.name().to_string()).collect()
}

/// Dataset and model sizes. Absent fields take the case defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Sizes {
    pub n1: Option<usize>,
    pub n2: usize,
    pub n_test: usize,
    /// Inducing size per latent process.
    pub m: usize,
    /// Mapping-GP inducing size; absent means the task's training size.
    pub m_g: Option<usize>,
    /// Number of latent processes.
    pub q: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Sizes {
            n1: None,
            n2: 100,
            n_test: 100,
            m: 30,
            m_g: None,
            q: 2,
        }
    }
}

/// Optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Per-task minibatch cap.
    pub batch_size: usize,
    pub trace_every: usize,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer {
            learning_rate: 5e-3,
            iterations: 5000,
            batch_size: 512,
            trace_every: 50,
        }
    }
}

/// One experiment: a case, a model subset and a seed protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub case: CaseName,
    #[serde(default = "default_models")]
    pub models: Vec<String>,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub sizes: Sizes,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Kernel lengthscale initialization (low-dimensional cases use 0.1).
    #[serde(default = "default_lengthscale_init")]
    pub lengthscale_init: f64,
    /// Report metrics for every task instead of the target task only.
    #[serde(default)]
    pub report_all_tasks: bool,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

fn default_lengthscale_init() -> f64 {
    0.1
}

fn default_output_dir() -> String {
    "out".to_string()
}

impl ExperimentConfig {
    pub fn new(case: CaseName) -> Self {
        ExperimentConfig {
            case,
            models: default_models(),
            seeds: Seeds::default(),
            sizes: Sizes::default(),
            optimizer: Optimizer::default(),
            lengthscale_init: default_lengthscale_init(),
            report_all_tasks: false,
            output_dir: default_output_dir(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::contract(format!("config parse failure: {e}")))
    }

    pub fn variants(&self) -> Result<Vec<Variant>> {
        self.models.iter().map(|m| m.parse()).collect()
    }

    pub fn n1(&self) -> usize {
        self.sizes.n1.unwrap_or_else(|| self.case.default_n1())
    }
}

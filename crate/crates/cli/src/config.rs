use std::path::{Path, PathBuf};

use antlab_core::diffusion::SamplerMethod;
use antlab_core::eval::EvalConfig;
use antlab_core::guidance::GuidancePolicy;
use antlab_core::params::ModelConfig;
use antlab_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "runs/corpus".into(),
            checkpoint: "runs/model.ckpt".into(),
            out: "runs/out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub size: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { size: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub steps: usize,
    pub method: SamplerMethod,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            steps: 10,
            method: SamplerMethod::DpmSolver2M,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    /// Explicit prompts; empty means the first `count` test prompts.
    pub prompts: Vec<String>,
    pub count: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            prompts: Vec::new(),
            count: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub omega_min: Vec<f64>,
    pub omega_max: Vec<f64>,
    pub reps: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            omega_min: vec![1.0, 1.5, 2.0],
            omega_max: vec![2.5, 3.0, 3.5],
            reps: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub batch: usize,
    pub reps: usize,
    pub warmup: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            batch: 32,
            reps: 5,
            warmup: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSection {
    pub draws: usize,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        SpectrumSection { draws: 10_000 }
    }
}

/// Everything a run depends on. The master `seed` overrides the seeds of
/// the `train` and `eval` sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    /// Step at which `train` stops; the learning-rate schedule still spans `train.steps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_until: Option<u64>,
    pub paths: Paths,
    pub corpus: CorpusSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub guidance: GuidancePolicy,
    pub sampler: SamplerSection,
    pub sample: SampleSection,
    pub eval: EvalConfig,
    pub grid: GridSection,
    pub bench: BenchSection,
    pub spectrum: SpectrumSection,
}


impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn normalize(&mut self) {
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.guidance.validate()?;
        if let Some(u) = self.train_until.filter(|&u| u > self.train.steps) {
            return Err(CliError::Usage(format!("train_until {u} beyond train.steps {}", self.train.steps)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

//! Experiment configuration file.
//!
//! One TOML document with a section per stage. Every field has a default, so
//! an empty file is a valid configuration. Precedence, highest first:
//! command-line flags, the `POD_OUT` environment variable (output directory
//! only), the config file, built-in defaults.
//!
//! Per-stage seeds (`synth.seed`, `model.seed`, `train.seed`) are always
//! derived from the global `seed`; values written for them are replaced on
//! resolution.

use std::path::{Path, PathBuf};

use pod_core::datamodel::SynthConfig;
use pod_core::eval::Projection;
use pod_core::model::ModelConfig;
use pod_core::pipeline::{ClassifyConfig, Settings, WindowConfig};
use pod_core::preprocessing::{PreprocessConfig, RangeTable};
use pod_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Environment variable that overrides the output directory.
pub const OUT_ENV: &str = "POD_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub output: PathBuf,
    /// Raw cohort directory. Defaults to `<output>/cohort`, where `synth`
    /// writes; point it elsewhere to run on external records.
    pub cohort: Option<PathBuf>,
    /// Defaults to `<output>/model.json`.
    pub checkpoint: Option<PathBuf>,
    /// Physiological range table (TOML). Defaults to the built-in table.
    pub ranges: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            output: PathBuf::from("runs/default"),
            cohort: None,
            checkpoint: None,
            ranges: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub lambda_grid: Vec<f64>,
    /// Downsampling intervals in seconds; the period is `window_len * interval`.
    pub period_grid: Vec<f64>,
    pub projection: Projection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lambda_grid: vec![0.0, 1e-4, 5e-4, 1e-3, 0.0016],
            period_grid: vec![5.0, 10.0],
            projection: Projection::Pca2d,
        }
    }
}

/// Tiny model used by the `gradcheck` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub window_len: usize,
    pub d_e: usize,
    pub patch_sizes: Vec<usize>,
    pub top_k: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub eps: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            window_len: 16,
            d_e: 8,
            patch_sizes: vec![4, 8],
            top_k: 1,
            n_heads: 2,
            d_ff: 16,
            eps: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub classify: ClassifyConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::ConfigParse(e.message().to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Loads `path` (or defaults), applies overrides and the output
    /// environment variable, resolves seeds and validates.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(out) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            cfg.paths.output = PathBuf::from(out);
        }
        if let Some(out) = &overrides.out {
            cfg.paths.output = out.clone();
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        cfg.resolve_seeds();
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(CliError::Core(pod_core::Error::Config(errs)));
        }
        Ok(cfg)
    }

    pub fn resolve_seeds(&mut self) {
        let base = Settings {
            seed: self.seed,
            ..Settings::default()
        };
        self.synth.seed = base.stage_seed("synth");
        self.model.seed = base.stage_seed("model");
        self.train.seed = base.stage_seed("train");
    }

    /// Every violation across all sections.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.synth.validate();
        if self.paths.cohort.is_none() && self.synth.modalities != self.model.modalities {
            errs.push("synth.modalities must match model.modalities when the cohort is synthesized".into());
        }
        errs.extend(self.settings().validate());
        if self.eval.lambda_grid.is_empty() {
            errs.push("eval.lambda_grid must not be empty".into());
        }
        if let Some(l) = self.eval.lambda_grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            errs.push(format!("eval.lambda_grid entries must be >= 0, got {l}"));
        }
        if self.eval.period_grid.is_empty() {
            errs.push("eval.period_grid must not be empty".into());
        }
        for &interval in &self.eval.period_grid {
            let p = PreprocessConfig {
                downsample_interval: interval,
                ..self.preprocess.clone()
            };
            if !p.validate().is_empty() {
                errs.push(format!(
                    "eval.period_grid entry {interval} is not a valid downsampling interval"
                ));
            }
        }
        let g = &self.gradcheck;
        errs.extend(
            self.gradcheck_model()
                .validate()
                .into_iter()
                .map(|e| format!("gradcheck: {e}")),
        );
        if !(g.eps > 0.0 && g.eps.is_finite()) {
            errs.push("gradcheck.eps must be positive".into());
        }
        errs
    }

    pub fn settings(&self) -> Settings {
        Settings {
            preprocess: self.preprocess.clone(),
            window: self.window.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            classify: self.classify.clone(),
            seed: self.seed,
        }
    }

    pub fn gradcheck_model(&self) -> ModelConfig {
        let g = &self.gradcheck;
        ModelConfig {
            d_e: g.d_e,
            patch_sizes: g.patch_sizes.clone(),
            top_k: g.top_k,
            n_heads: g.n_heads,
            d_ff: g.d_ff,
            window_len: g.window_len,
            modalities: self.model.modalities.clone(),
            router_noise: 0.0,
            seed: self.model.seed,
        }
    }

    pub fn ranges(&self) -> CliResult<RangeTable> {
        match &self.paths.ranges {
            Some(p) => Ok(RangeTable::load(p)?),
            None => Ok(RangeTable::default_table()),
        }
    }

    pub fn out(&self) -> &Path {
        &self.paths.output
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.paths.cohort.clone().unwrap_or_else(|| self.out().join("cohort"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out().join("model.json"))
    }

    /// SHA-256 of the resolved configuration without the `paths` section, so
    /// the same experiment written to two directories shares a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let digest = Sha256::digest(c.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

//! Experiment configuration. Values come from built-in defaults, then an
//! optional JSON file, then command-line flags; later sources win.

use std::fs;
use std::path::{Path, PathBuf};

use anonvec_core::reprogram::{Init, OptimizerConfig, DEFAULT_EPSILON, DEFAULT_INIT_SCALE, DEFAULT_LAMBDA_DIST};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnonymizerKind {
    Identity,
    BaselineNear,
    BaselineFar,
    Reprogram,
}

impl std::fmt::Display for AnonymizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AnonymizerKind::Identity => "identity",
            AnonymizerKind::BaselineNear => "baseline_near",
            AnonymizerKind::BaselineFar => "baseline_far",
            AnonymizerKind::Reprogram => "reprogram",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaScope {
    Global,
    PerSpeaker,
}

/// Optimizer settings as they appear in the config file. The optimizer seed
/// is not set here; it is derived from the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub step_size: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub init: Init,
    pub backtracking: bool,
    pub max_backtracks: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            step_size: d.step_size,
            max_iters: d.max_iters,
            tol: d.tol,
            init: Init::SeededUniform { scale: DEFAULT_INIT_SCALE },
            backtracking: d.backtracking,
            max_backtracks: d.max_backtracks,
        }
    }
}

impl OptimizerSettings {
    pub fn with_seed(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            step_size: self.step_size,
            max_iters: self.max_iters,
            seed,
            tol: self.tol,
            init: self.init,
            backtracking: self.backtracking,
            max_backtracks: self.max_backtracks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Embeddings the reprogramming parameters are trained on.
    pub train: Option<PathBuf>,
    /// Enrollment-side evaluation embeddings.
    pub enroll: Option<PathBuf>,
    /// Trial-side evaluation embeddings.
    pub trial: Option<PathBuf>,
    /// External pool for the baseline anonymizers.
    pub pool: Option<PathBuf>,
    /// Trial list (`enrollment_id<TAB>trial_id<TAB>label`).
    pub trials: Option<PathBuf>,
    /// Input of `anonymize`; defaults to `trial`.
    pub input: Option<PathBuf>,
    pub proxy: Option<PathBuf>,
    /// Trained parameters; defaults to `<out>/theta.json`.
    pub checkpoint: Option<PathBuf>,
    pub anonymizer: AnonymizerKind,
    /// Baseline selection size; defaults to half the pool.
    pub k: Option<usize>,
    pub epsilon: f64,
    pub lambda_dist: f64,
    pub theta_scope: ThetaScope,
    /// Restrict scoring to trials whose speakers both carry this gender tag.
    pub gender: Option<String>,
    pub optimizer: OptimizerSettings,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: None,
            enroll: None,
            trial: None,
            pool: None,
            trials: None,
            input: None,
            proxy: None,
            checkpoint: None,
            anonymizer: AnonymizerKind::Reprogram,
            k: None,
            epsilon: DEFAULT_EPSILON,
            lambda_dist: DEFAULT_LAMBDA_DIST,
            theta_scope: ThetaScope::Global,
            gender: None,
            optimizer: OptimizerSettings::default(),
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// `key=value` pairs; dotted keys reach nested fields
    /// (`optimizer.max_iters=50`).
    pub set: Vec<String>,
}

impl ExperimentConfig {
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let from_file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("{}: invalid JSON: {e}", path.display())))?;
            if !from_file.is_object() {
                return Err(CliError::Input(format!("{}: config must be a JSON object", path.display())));
            }
            merge(&mut value, from_file);
        }
        for pair in &overrides.set {
            let (key, raw) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{pair}`")))?;
            set_path(&mut value, key.trim(), parse_scalar(raw))?;
        }
        if let Some(seed) = overrides.seed {
            value["seed"] = seed.into();
        }
        if let Some(out) = &overrides.out {
            value["out"] = out.to_string_lossy().into_owned().into();
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(CliError::Usage(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.lambda_dist >= 0.0 && self.lambda_dist.is_finite()) {
            return Err(CliError::Usage(format!("lambda_dist must be nonnegative, got {}", self.lambda_dist)));
        }
        if self.k == Some(0) {
            return Err(CliError::Usage("k must be at least 1".into()));
        }
        self.optimizer
            .with_seed(0)
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("theta.json"))
    }

    /// The resolved configuration as embedded in output artifacts.
    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, anything else
/// replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

fn set_path(value: &mut Value, key: &str, new: Value) -> Result<(), CliError> {
    if key.is_empty() {
        return Err(CliError::Usage("--set key is empty".into()));
    }
    let mut cur = value;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("--set {key}: `{part}` is not inside an object")))?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), new);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// `--set` values are JSON when they parse as JSON, otherwise plain strings,
/// so `k=5` is a number and `pool=data/pool.jsonl` a path.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

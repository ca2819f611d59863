//! Flat `section.key=value` configuration with dataset profiles.
//!
//! Resolution order, later wins: built-in defaults, profile, config file,
//! `--set` overrides, dedicated command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ibanet::data::{SplitPlan, SplitScheme, SyntheticSpec};
use ibanet::loss::{LossConfig, LossKind};
use ibanet::mfc::EncoderConfig;
use ibanet::model::ModelVariant;
use ibanet::train_eval::TrainConfig;

use crate::error::CliError;

/// Every accepted key with its default value. Unknown keys are rejected.
const DEFAULTS: &[(&str, &str)] = &[
    ("ablate.study", "modules"),
    ("data.baseline_rate_hz", "12.5"),
    ("data.factors", "2,4,8"),
    ("data.noise_std", "0.5"),
    ("data.path", ""),
    ("data.sampling_rate_hz", "100"),
    ("data.source", "synthetic"),
    ("data.stride_s", "2"),
    ("data.subjects", "5"),
    ("data.total", "3000"),
    ("data.window_s", "2"),
    ("grid.epochs_per_cell", "0"),
    ("grid.k", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"),
    ("grid.tau", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"),
    ("loss.beta", "0.9999"),
    ("loss.gamma", "0.5"),
    ("loss.kind", "cb_focal"),
    ("model.channels", "8,16,32"),
    ("model.etf_dim", "0"),
    ("model.k", "0.3"),
    ("model.kernel", "5"),
    ("model.padding", "2"),
    ("model.stride", "2"),
    ("model.tau", "0.4"),
    ("model.variant", "iba_net"),
    ("run.fold", "0"),
    ("run.jobs", "1"),
    ("run.out", "out"),
    ("run.seed", "0"),
    ("split.folds", "5"),
    ("split.scheme", "loso"),
    ("train.batch_size", "256"),
    ("train.epochs", "100"),
    ("train.eval_chunk", "512"),
    ("train.lr", "1e-4"),
    ("train.weight_decay", "1e-4"),
];

/// Named override bundles for the three animal datasets and the synthetic
/// stand-in.
pub const PROFILES: &[(&str, &[(&str, &str)])] = &[
    (
        "goat",
        &[
            ("train.lr", "1e-4"),
            ("train.weight_decay", "1e-4"),
            ("model.tau", "0.4"),
            ("model.k", "0.3"),
            ("data.sampling_rate_hz", "100"),
            ("data.factors", "2,4,8"),
            ("data.baseline_rate_hz", "12.5"),
            ("split.scheme", "loso"),
        ],
    ),
    (
        "cattle",
        &[
            ("train.lr", "5e-4"),
            ("train.weight_decay", "6e-2"),
            ("model.tau", "0.8"),
            ("model.k", "0.1"),
            ("data.sampling_rate_hz", "25"),
            ("data.factors", "1,2,5"),
            ("data.baseline_rate_hz", "25"),
            ("split.scheme", "stratified"),
            ("split.folds", "5"),
        ],
    ),
    (
        "horse",
        &[
            ("train.lr", "1e-4"),
            ("train.weight_decay", "0.1"),
            ("model.tau", "0.5"),
            ("model.k", "0.2"),
            ("data.sampling_rate_hz", "100"),
            ("data.factors", "2,4,8"),
            ("data.baseline_rate_hz", "25"),
            ("split.scheme", "loso"),
        ],
    ),
    (
        "goat-like",
        &[
            ("data.source", "synthetic"),
            ("data.sampling_rate_hz", "100"),
            ("data.factors", "2,4,8"),
            ("data.baseline_rate_hz", "12.5"),
            ("split.scheme", "stratified"),
            ("split.folds", "5"),
        ],
    ),
];

/// The resolved key/value table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::UnknownKey(key.to_string())),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key listed in DEFAULTS")
    }

    pub fn apply_profile(&mut self, name: &str) -> Result<(), CliError> {
        let (_, pairs) = PROFILES
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CliError::Config(format!("unknown profile '{name}' (goat, cattle, horse, goat-like)")))?;
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// `key=value` per line; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got '{line}'", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_assignment(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got '{assignment}'")))?;
        self.set(k.trim(), v)
    }

    /// Sorted `key=value` lines; feeding them back reproduces the table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.get(key);
        v.parse().map_err(|_| CliError::Value { key: key.to_string(), value: v.to_string() })
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let v = self.get(key);
        v.split(',')
            .map(|x| x.trim().parse().map_err(|_| CliError::Value { key: key.to_string(), value: v.to_string() }))
            .collect()
    }

    pub fn resolve(&self) -> Result<Settings, CliError> {
        let bad = |key: &str| CliError::Value { key: key.to_string(), value: self.get(key).to_string() };
        let source = match self.get("data.source") {
            "synthetic" => DataSource::Synthetic,
            "csv" => {
                let p = self.get("data.path");
                if p.is_empty() {
                    return Err(CliError::Config("data.source=csv needs data.path".into()));
                }
                DataSource::Csv(PathBuf::from(p))
            }
            _ => return Err(bad("data.source")),
        };
        let scheme = match self.get("split.scheme") {
            "loso" => SplitScheme::LeaveOneSubjectOut,
            "stratified" => SplitScheme::StratifiedKFold { folds: self.parse("split.folds")? },
            _ => return Err(bad("split.scheme")),
        };
        let kind = LossKind::parse(self.get("loss.kind")).ok_or_else(|| bad("loss.kind"))?;
        let variant = ModelVariant::from_str(self.get("model.variant")).map_err(|_| bad("model.variant"))?;
        let etf_dim: usize = self.parse("model.etf_dim")?;
        let seed: u64 = self.parse("run.seed")?;
        let epochs_per_cell: usize = self.parse("grid.epochs_per_cell")?;
        let train = TrainConfig {
            epochs: self.parse("train.epochs")?,
            batch_size: self.parse("train.batch_size")?,
            lr: self.parse("train.lr")?,
            weight_decay: self.parse("train.weight_decay")?,
            tau: self.parse("model.tau")?,
            k: self.parse("model.k")?,
            loss: LossConfig { kind, beta: self.parse("loss.beta")?, gamma: self.parse("loss.gamma")? },
            variant,
            encoder: EncoderConfig {
                channels: self.list("model.channels")?,
                kernel: self.parse("model.kernel")?,
                stride: self.parse("model.stride")?,
                padding: self.parse("model.padding")?,
            },
            etf_dim: (etf_dim > 0).then_some(etf_dim),
            seed,
            eval_chunk: self.parse("train.eval_chunk")?,
        };
        train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let settings = Settings {
            source,
            sampling_rate_hz: self.parse("data.sampling_rate_hz")?,
            window_s: self.parse("data.window_s")?,
            stride_s: self.parse("data.stride_s")?,
            factors: self.list("data.factors")?,
            baseline_rate_hz: self.parse("data.baseline_rate_hz")?,
            synthetic_total: self.parse("data.total")?,
            synthetic_subjects: self.parse("data.subjects")?,
            noise_std: self.parse("data.noise_std")?,
            plan: SplitPlan { scheme, seed },
            train,
            grid_taus: self.list("grid.tau")?,
            grid_ks: self.list("grid.k")?,
            grid_epochs: (epochs_per_cell > 0).then_some(epochs_per_cell),
            study: self.get("ablate.study").to_string(),
            fold: self.parse("run.fold")?,
            jobs: self.parse("run.jobs")?,
            out: PathBuf::from(self.get("run.out")),
        };
        if settings.factors.is_empty() || settings.factors.contains(&0) {
            return Err(bad("data.factors"));
        }
        Ok(settings)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Csv(PathBuf),
}

/// Typed view of a resolved [`RawConfig`].
#[derive(Clone, Debug)]
pub struct Settings {
    pub source: DataSource,
    pub sampling_rate_hz: f64,
    pub window_s: f64,
    pub stride_s: f64,
    pub factors: Vec<usize>,
    pub baseline_rate_hz: f64,
    pub synthetic_total: usize,
    pub synthetic_subjects: usize,
    pub noise_std: f64,
    pub plan: SplitPlan,
    pub train: TrainConfig,
    pub grid_taus: Vec<f64>,
    pub grid_ks: Vec<f64>,
    pub grid_epochs: Option<usize>,
    pub study: String,
    pub fold: usize,
    pub jobs: usize,
    pub out: PathBuf,
}

impl Settings {
    /// The goat-like generator adjusted to the configured rate and size.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            base_rate_hz: self.sampling_rate_hz,
            window_seconds: self.window_s,
            total: self.synthetic_total,
            subjects: self.synthetic_subjects,
            noise_std: self.noise_std,
            ..SyntheticSpec::goat_like()
        }
    }
}

pub fn read_config_file(path: &Path, raw: &mut RawConfig) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    raw.apply_text(&text)
}

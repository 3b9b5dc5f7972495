//! Experiment configuration, read from TOML and overridable from the command line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kan_core::{Aggregator, Head, SyntheticKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sweep,
    Compare,
    Adherence,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sweep => "sweep",
            Mode::Compare => "compare",
            Mode::Adherence => "adherence",
        })
    }
}

/// Network families compared against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Sum aggregation everywhere.
    Kan,
    /// Sum aggregation with layer normalization after every hidden layer.
    KanLayernorm,
    /// Mean aggregation everywhere.
    KanAvg,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Kan, Variant::KanLayernorm, Variant::KanAvg];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Kan => "kan",
            Variant::KanLayernorm => "kan-layernorm",
            Variant::KanAvg => "kan-avg",
        }
    }

    pub fn aggregator(self) -> Aggregator {
        match self {
            Variant::Kan | Variant::KanLayernorm => Aggregator::Sum,
            Variant::KanAvg => Aggregator::Mean,
        }
    }

    pub fn layer_norm(self) -> bool {
        self == Variant::KanLayernorm
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown variant `{s}` (expected kan, kan-layernorm or kan-avg)")))
    }
}

/// A generated dataset, written `kind:features:instances` on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: String,
    pub features: usize,
    pub instances: usize,
}

impl SyntheticSpec {
    pub fn kind(&self) -> Result<SyntheticKind> {
        Ok(self.kind.parse()?)
    }

    pub fn name(&self) -> String {
        format!("{}-{}f", self.kind.replace(':', ""), self.features)
    }
}

impl FromStr for SyntheticSpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.rsplitn(3, ':').collect();
        let bad = || HarnessError::Config(format!("synthetic dataset `{s}` is not kind:features:instances"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let spec = SyntheticSpec {
            kind: parts[2].to_string(),
            features: parts[1].parse().map_err(|_| bad())?,
            instances: parts[0].parse().map_err(|_| bad())?,
        };
        spec.kind()?;
        Ok(spec)
    }
}

/// Optional replacements for the training defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Dataset manifest files.
    pub datasets: Vec<PathBuf>,
    pub synthetic: Vec<SyntheticSpec>,
    pub variants: Vec<Variant>,
    /// Aggregators crossed over the hidden and output layer in sweep mode.
    pub aggregators: Vec<Aggregator>,
    /// Seeded runs per configuration; defaults to 20 in compare mode and 1 otherwise.
    pub runs: Option<usize>,
    pub hidden_width: usize,
    pub train: TrainOverrides,
    /// Single regression output on the class index instead of one logit per class.
    pub strict_replication: bool,
    pub scale_features: bool,
    pub seed: u64,
    /// Not part of the config hash: neither changes any result.
    pub out_dir: Option<PathBuf>,
    pub parallelism: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Compare,
            datasets: Vec::new(),
            synthetic: Vec::new(),
            variants: Variant::ALL.to_vec(),
            aggregators: Aggregator::ALL.to_vec(),
            runs: None,
            hidden_width: 10,
            train: TrainOverrides::default(),
            strict_replication: false,
            scale_features: true,
            seed: 0,
            out_dir: None,
            parallelism: None,
        }
    }
}

impl ExperimentConfig {
    pub fn new(mode: Mode) -> Self {
        ExperimentConfig {
            mode,
            ..ExperimentConfig::default()
        }
    }

    /// Reads a TOML file; relative dataset paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            for d in &mut cfg.datasets {
                if d.is_relative() {
                    *d = dir.join(&*d);
                }
            }
        }
        Ok(cfg)
    }

    pub fn runs(&self) -> usize {
        self.runs.unwrap_or(match self.mode {
            Mode::Compare => 20,
            Mode::Sweep | Mode::Adherence => 1,
        })
    }

    pub fn head(&self) -> Head {
        if self.strict_replication {
            Head::Regression
        } else {
            Head::Softmax
        }
    }

    /// Training settings for one run; adherence is traced only when the mode reports it.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        let o = &self.train;
        TrainConfig {
            iterations: o.iterations.unwrap_or(d.iterations),
            batch_size: o.batch_size.unwrap_or(d.batch_size),
            learning_rate: o.learning_rate.unwrap_or(d.learning_rate),
            beta1: o.beta1.unwrap_or(d.beta1),
            beta2: o.beta2.unwrap_or(d.beta2),
            epsilon: o.epsilon.unwrap_or(d.epsilon),
            seed,
            trace_adherence: self.mode == Mode::Adherence,
            head: self.head(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() && self.synthetic.is_empty() {
            return Err(HarnessError::Config("no datasets configured".into()));
        }
        if self.runs() == 0 {
            return Err(HarnessError::Config("runs must be at least 1".into()));
        }
        if self.hidden_width == 0 {
            return Err(HarnessError::Config("hidden width must be at least 1".into()));
        }
        if self.parallelism == Some(0) {
            return Err(HarnessError::Config("parallelism must be at least 1".into()));
        }
        match self.mode {
            Mode::Sweep if self.aggregators.is_empty() => {
                return Err(HarnessError::Config("sweep needs at least one aggregator".into()))
            }
            Mode::Compare | Mode::Adherence if self.variants.is_empty() => {
                return Err(HarnessError::Config(format!("{} needs at least one variant", self.mode)))
            }
            _ => {}
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return Err(HarnessError::Config(format!("variant `{v}` listed twice")));
            }
        }
        for s in &self.synthetic {
            s.kind()?;
        }
        self.train_config(0).validate()?;
        Ok(())
    }

    /// Fields that determine the results, in a stable serialized form.
    pub(crate) fn hashed_view(&self) -> serde_json::Value {
        let mut view = self.clone();
        view.out_dir = None;
        view.parallelism = None;
        view.runs = Some(self.runs());
        serde_json::to_value(view).expect("config serializes")
    }
}

//! Experiment configuration files.
//!
//! A config is a TOML document with the sections `run`, `model`,
//! `training`, `federation`, `data` and `attack`. Every section and key is
//! optional and falls back to the defaults below, but unknown keys are
//! rejected so that a typo can never silently change an experiment.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unishuffle::codec::EncodingMode;
use unishuffle::federation::{FlConfig, Mode};
use unishuffle::nn::{Activation, Layout, NnError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Standard,
    UnaryQuant,
}

impl From<ModeName> for Mode {
    fn from(m: ModeName) -> Mode {
        match m {
            ModeName::Standard => Mode::Standard,
            ModeName::UnaryQuant => Mode::UnaryQuant,
        }
    }
}

impl std::str::FromStr for ModeName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.parse::<Mode>().map_err(|e| e.to_string())? {
            Mode::Standard => Ok(ModeName::Standard),
            Mode::UnaryQuant => Ok(ModeName::UnaryQuant),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingName {
    General,
    PaperFaithful,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Mnist,
    Synthetic,
}

/// Which rounds get a transcript file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DumpRounds {
    None,
    Final,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Output directory; relative paths resolve against the working directory.
    pub out: PathBuf,
    pub dump_rounds: DumpRounds,
    /// Write every unary bit as its own line instead of per-parameter counts.
    pub full_unary_dump: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            out: PathBuf::from("runs/default"),
            dump_rounds: DumpRounds::Final,
            full_unary_dump: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Input, hidden and output widths.
    pub layers: Vec<usize>,
    pub activation: ActivationName,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: vec![784, 32, 10],
            activation: ActivationName::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            learning_rate: 0.2,
            epochs: 3,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub mode: ModeName,
    pub rounds: usize,
    pub clients: usize,
    /// Clients per round; defaults to all of them.
    pub cohort: Option<usize>,
    pub k: u32,
    pub r: usize,
    pub encoding: EncodingName,
}

impl Default for FederationSection {
    fn default() -> Self {
        FederationSection {
            mode: ModeName::UnaryQuant,
            rounds: 15,
            clients: 10,
            cohort: None,
            k: 3,
            r: 1000,
            encoding: EncodingName::General,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Directory holding the four MNIST IDX files.
    pub mnist_dir: PathBuf,
    /// Number of leading training examples to use; 0 keeps all.
    pub subset: usize,
    pub alpha: f64,
    /// Synthetic data shape.
    pub per_class: usize,
    pub classes: usize,
    pub dim: usize,
    pub test_per_class: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            subset: 10_000,
            alpha: 0.1,
            per_class: 100,
            classes: 10,
            dim: 20,
            test_per_class: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub targets_per_client: usize,
    pub pairing_budget: usize,
    /// Give the adversary every client's class histogram.
    pub known_stats: bool,
    /// Round to attack; the final round when unset.
    pub round: Option<usize>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            targets_per_client: 100,
            pairing_budget: unishuffle::attack::DEFAULT_PAIRING_BUDGET,
            known_stats: true,
            round: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub federation: FederationSection,
    pub data: DataSection,
    pub attack: AttackSection,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<ModeName>,
    pub k: Option<u32>,
    pub r: Option<usize>,
    pub rounds: Option<usize>,
    pub clients: Option<usize>,
    pub alpha: Option<f64>,
    pub subset: Option<usize>,
}

impl ExperimentConfig {
    /// Parse and validate TOML text. `origin` names the source in errors.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Apply overrides and validate the result.
    pub fn with_overrides(mut self, o: &Overrides) -> Result<Self, ConfigError> {
        if let Some(v) = &o.out {
            self.run.out = v.clone();
        }
        if let Some(v) = o.seed {
            self.run.seed = v;
        }
        if let Some(v) = o.mode {
            self.federation.mode = v;
        }
        if let Some(v) = o.k {
            self.federation.k = v;
        }
        if let Some(v) = o.r {
            self.federation.r = v;
        }
        if let Some(v) = o.rounds {
            self.federation.rounds = v;
        }
        if let Some(v) = o.clients {
            self.federation.clients = v;
        }
        if let Some(v) = o.alpha {
            self.data.alpha = v;
        }
        if let Some(v) = o.subset {
            self.data.subset = v;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn fl_config(&self) -> FlConfig {
        let f = &self.federation;
        FlConfig {
            rounds: f.rounds,
            clients: f.clients,
            cohort: f.cohort.unwrap_or(f.clients),
            k: f.k,
            r: f.r,
            learning_rate: self.training.learning_rate,
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            mode: f.mode.into(),
            encoding: match f.encoding {
                EncodingName::General => EncodingMode::General,
                EncodingName::PaperFaithful => EncodingMode::PaperFaithful,
            },
            seed: self.run.seed,
        }
    }

    pub fn layout(&self) -> Result<Arc<Layout>, NnError> {
        let act = match self.model.activation {
            ActivationName::Relu => Activation::Relu,
            ActivationName::Tanh => Activation::Tanh,
        };
        Layout::new(&self.model.layers, act).map(Arc::new)
    }

    /// Input width and class count implied by the data section.
    pub fn data_shape(&self) -> (usize, usize) {
        match self.data.source {
            DataSource::Mnist => (784, 10),
            DataSource::Synthetic => (self.data.dim, self.data.classes),
        }
    }

    /// Short series name such as `standard` or `unary_quant_k3_r1000`.
    pub fn label(&self) -> String {
        match self.federation.mode {
            ModeName::Standard => "standard".to_string(),
            ModeName::UnaryQuant => {
                format!("unary_quant_k{}_r{}", self.federation.k, self.federation.r)
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.fl_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let layout = self
            .layout()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let (dim, classes) = self.data_shape();
        if layout.inputs() != dim || layout.classes() != classes {
            return invalid(format!(
                "model.layers must start at {dim} and end at {classes} for this data, got {:?}",
                self.model.layers
            ));
        }
        let d = &self.data;
        if !(d.alpha > 0.0 && d.alpha.is_finite()) {
            return invalid(format!("data.alpha must be positive, got {}", d.alpha));
        }
        match d.source {
            DataSource::Mnist => {
                if d.subset != 0 && d.subset < self.federation.clients {
                    return invalid(format!(
                        "data.subset of {} leaves some of the {} clients without data",
                        d.subset, self.federation.clients
                    ));
                }
            }
            DataSource::Synthetic => {
                if d.per_class == 0 || d.test_per_class == 0 || d.classes < 2 || d.dim < d.classes {
                    return invalid(
                        "synthetic data needs per_class, test_per_class > 0, classes >= 2 and dim >= classes".into(),
                    );
                }
                if d.per_class * d.classes < self.federation.clients {
                    return invalid("synthetic data has fewer examples than clients".into());
                }
            }
        }
        if self.attack.targets_per_client == 0 || self.attack.pairing_budget == 0 {
            return invalid(
                "attack.targets_per_client and attack.pairing_budget must be positive".into(),
            );
        }
        if let Some(r) = self.attack.round {
            if r == 0 || r > self.federation.rounds {
                return invalid(format!(
                    "attack.round must be in 1..={}, got {r}",
                    self.federation.rounds
                ));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_toml())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("", Path::new("x.toml")).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.layout().unwrap().len(), 25_450);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.federation.mode = ModeName::Standard;
        cfg.federation.cohort = Some(5);
        cfg.attack.round = Some(3);
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_report_their_line() {
        let text = "[federation]\nrounds = 3\nround = 4\n";
        let err = ExperimentConfig::from_toml(text, Path::new("bad.toml")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.toml"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("round"), "{msg}");
    }

    #[test]
    fn type_errors_report_their_line() {
        let text = "[run]\nseed = 1\n\n[training]\nepochs = \"two\"\n";
        let msg = ExperimentConfig::from_toml(text, Path::new("t.toml"))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("line 5"), "{msg}");
    }

    #[test]
    fn semantic_errors_are_caught() {
        for text in [
            "[federation]\nk = 0\n",
            "[federation]\nr = 0\n",
            "[federation]\nclients = 4\ncohort = 5\n",
            "[data]\nalpha = 0.0\n",
            "[model]\nlayers = [100, 10]\n",
            "[attack]\nround = 99\n",
            "[data]\nsource = \"synthetic\"\n",
        ] {
            assert!(
                matches!(
                    ExperimentConfig::from_toml(text, Path::new("c.toml")),
                    Err(ConfigError::Invalid(_))
                ),
                "{text}"
            );
        }
    }

    #[test]
    fn overrides_apply_and_revalidate() {
        let o = Overrides {
            mode: Some(ModeName::Standard),
            k: Some(2),
            r: Some(100),
            seed: Some(9),
            ..Overrides::default()
        };
        let cfg = ExperimentConfig::default().with_overrides(&o).unwrap();
        assert_eq!(cfg.fl_config().mode, Mode::Standard);
        assert_eq!(
            (cfg.federation.k, cfg.federation.r, cfg.run.seed),
            (2, 100, 9)
        );
        let bad = Overrides {
            k: Some(12),
            ..Overrides::default()
        };
        assert!(ExperimentConfig::default().with_overrides(&bad).is_err());
    }

    #[test]
    fn mode_names_parse() {
        assert_eq!(
            "unary_quant".parse::<ModeName>().unwrap(),
            ModeName::UnaryQuant
        );
        assert_eq!("standard".parse::<ModeName>().unwrap(), ModeName::Standard);
        assert!("fedavg".parse::<ModeName>().is_err());
    }

    #[test]
    fn labels_name_the_codec() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.label(), "unary_quant_k3_r1000");
        cfg.federation.mode = ModeName::Standard;
        assert_eq!(cfg.label(), "standard");
    }
}

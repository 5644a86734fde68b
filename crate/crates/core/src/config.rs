//! Experiment configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::split::{Budget, SplitProtocol};
use crate::synth::SynthSpec;
use crate::train::{Method, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub tiles: usize,
    pub spec: SynthSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            tiles: 1000,
            spec: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub methods: Vec<Method>,
    pub budgets: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            budgets: vec![0.10, 0.20, 0.30],
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataqConfig {
    /// Size of a stratified subset compared against the corpus; the whole
    /// corpus when absent.
    pub subset_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Training seed (initialization, batches, augmentation).
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Corpus directory written by `synth`; regenerated in memory from
    /// `corpus` when absent.
    pub corpus_dir: Option<PathBuf>,
    pub budget: f64,
    pub method: Method,
    pub corpus: CorpusConfig,
    pub split: SplitProtocol,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub dataq: DataqConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            corpus_dir: None,
            budget: 0.10,
            method: Method::Full,
            corpus: CorpusConfig::default(),
            split: SplitProtocol::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
            dataq: DataqConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Writes the config verbatim as `config.toml` in `dir`.
    pub fn save_into(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn budget(&self) -> Budget {
        Budget::from_fraction(self.budget)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.spec.validate()?;
        if self.corpus.tiles == 0 {
            return Err(Error::invalid("corpus.tiles must be positive"));
        }
        self.split.validate()?;
        self.check_budget(self.budget)?;
        for &b in &self.ablation.budgets {
            self.check_budget(b)?;
        }
        self.train.validate()?;
        if self.train.model.num_classes != 2 {
            return Err(Error::invalid("the synthetic corpus has exactly 2 classes"));
        }
        Ok(())
    }

    fn check_budget(&self, b: f64) -> Result<()> {
        let key = Budget::from_fraction(b);
        let known = self
            .split
            .labeled_fractions
            .iter()
            .any(|&f| Budget::from_fraction(f) == key);
        if known || key == Budget::from_fraction(1.0) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "budget {b} is neither a labeled fraction of the split protocol nor 1.0"
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 7;
        cfg.method = Method::CaatOnly;
        cfg.dataq.subset_size = Some(100);
        cfg.corpus_dir = Some(PathBuf::from("corpus"));
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 3\nmethod = \"bank_only\"\n[train]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.method, Method::BankOnly);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.labeled_batch, 8);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(ExperimentConfig::from_toml("budget = 0.15").is_err());
        assert!(ExperimentConfig::from_toml("[corpus.spec]\nslum_pixel_fraction = 0.7").is_err());
        assert!(ExperimentConfig::from_toml("method = \"teacher\"").is_err());
        assert!(ExperimentConfig::from_toml("budget = 1.0").is_ok());
    }

    #[test]
    fn misspelled_keys_rejected() {
        for text in ["sede = 1", "[train]\nstpes = 10", "[train.bank]\ngama = 1.0", "[corpus.spec]\ntile = 16"] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            let cause = std::error::Error::source(&err).unwrap().to_string();
            assert!(cause.contains("unknown field"), "{text}: {cause}");
        }
        let cfg = ExperimentConfig::from_toml("[train.bank]\ngamma = 1.0").unwrap();
        assert_eq!(cfg.train.bank.capacity, 256);
    }
}

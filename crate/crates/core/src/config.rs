//! Experiment configuration.
//!
//! Configs are small TOML documents with one table per block (`[run]`,
//! `[dataset]`, `[training]`, `[sampler]`, `[analysis]`). Every key has a
//! default, so an empty file is a valid config. The canonical form is the
//! re-serialization of the parsed struct, which fixes key order; the config
//! hash is the SHA-256 of that canonical text.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{CorruptionMode, DatasetKind, GenConstants};
use crate::error::{Result, SpfmError};
use crate::flow::TrainingConfig;
use crate::sampler::SamplerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub label: String,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            label: "spfm".into(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub name: DatasetKind,
    pub n: usize,
    pub seed: u64,
    pub corruption_rate: f64,
    pub corruption_mode: CorruptionMode,
    pub constants: GenConstants,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            name: DatasetKind::TwoCircles,
            n: 10_000,
            seed: 1,
            corruption_rate: 0.4,
            corruption_mode: CorruptionMode::SwapExisting,
            constants: GenConstants::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub n_steps: usize,
    pub seed: u64,
    /// Guidance scales evaluated by `eval` and `reproduce fig2`.
    pub omega: Vec<f64>,
    /// Conditions drawn per guidance scale; also the scatter size per panel.
    pub n_eval: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            n_steps: 100,
            seed: 0,
            omega: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            n_eval: 2000,
        }
    }
}

impl SamplerSection {
    pub fn sampler_config(&self, guidance: f64) -> SamplerConfig {
        SamplerConfig {
            guidance,
            n_steps: self.n_steps,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub t_prime: Vec<f64>,
    pub threshold: f64,
    /// Clean samples taken from the dataset; each yields one correct and one
    /// mismatched record per `t'`.
    pub n_samples: usize,
    pub seed: u64,
    /// Noise draws averaged per sample (1 matches the training-time gate).
    pub draws: usize,
    pub bins: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            t_prime: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            threshold: 0.0,
            n_samples: 2000,
            seed: 0,
            draws: 1,
            bins: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub training: TrainingConfig,
    pub sampler: SamplerSection,
    pub analysis: AnalysisSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| SpfmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SpfmError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            SpfmError::Config(m) => SpfmError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.label.trim().is_empty() {
            return Err(SpfmError::Config("run.label must be non-empty".into()));
        }
        if self.dataset.n == 0 {
            return Err(SpfmError::Config("dataset.n must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.dataset.corruption_rate) {
            return Err(SpfmError::Config(format!(
                "dataset.corruption_rate must lie in [0, 1], got {}",
                self.dataset.corruption_rate
            )));
        }
        if self.dataset.name == DatasetKind::External {
            return Err(SpfmError::Config(
                "dataset.name must be two_circles or spiral (import external data with gen-data --import)".into(),
            ));
        }
        self.dataset.constants.validate()?;
        self.training.validate()?;
        if self.sampler.n_steps == 0 {
            return Err(SpfmError::Config("sampler.n_steps must be >= 1".into()));
        }
        if self.sampler.n_eval == 0 {
            return Err(SpfmError::Config("sampler.n_eval must be >= 1".into()));
        }
        if let Some(w) = self.sampler.omega.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(SpfmError::Config(format!("sampler.omega entries must be >= 0, got {w}")));
        }
        if let Some(t) = self.analysis.t_prime.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(SpfmError::Config(format!(
                "analysis.t_prime entries must lie in (0, 1), got {t}"
            )));
        }
        if !self.analysis.threshold.is_finite() {
            return Err(SpfmError::Config("analysis.threshold must be finite".into()));
        }
        if self.analysis.n_samples < 2 {
            return Err(SpfmError::Config("analysis.n_samples must be >= 2".into()));
        }
        if self.analysis.draws == 0 || self.analysis.bins == 0 {
            return Err(SpfmError::Config("analysis.draws and analysis.bins must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical text: every key present, fixed order.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical text with `run.output_dir` cleared, so the
    /// same experiment hashes the same wherever it is written.
    pub fn hash(&self) -> [u8; 32] {
        let mut located = self.clone();
        located.run.output_dir = PathBuf::new();
        Sha256::digest(located.canonical().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }
}

/// Pinned configuration for the guidance-sweep figure.
pub const FIG2_CONFIG: &str = include_str!("../configs/fig2.toml");
/// Pinned configuration for the loss-difference figure.
pub const FIG3_CONFIG: &str = include_str!("../configs/fig3.toml");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_output_location_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.run.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.training.train_seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.training.epochs, 100);
        assert_eq!(cfg.training.warmup_epochs, 4);
        assert_eq!(cfg.training.cfg_dropout_rate, 0.1);
        assert_eq!(cfg.training.gate_time, 0.5);
    }

    #[test]
    fn canonical_round_trip() {
        let text = "[training]\nepochs = 7\nwarmup_epochs = 2\n[dataset]\nname = \"spiral\"\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        let canon = cfg.canonical();
        let again = ExperimentConfig::parse(&canon).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.canonical(), canon);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn pinned_configs_parse() {
        for text in [FIG2_CONFIG, FIG3_CONFIG] {
            let cfg = ExperimentConfig::parse(text).unwrap();
            assert_eq!(cfg.dataset.corruption_rate, 0.4);
            assert_eq!(cfg.training.epochs, 100);
        }
    }

    #[test]
    fn diagnostics_name_the_field() {
        let err = ExperimentConfig::parse("[training]\nwarmup_epochs = 200\n").unwrap_err();
        assert!(err.to_string().contains("warmup_epochs"), "{err}");
        let err = ExperimentConfig::parse("[training]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ExperimentConfig::parse("[training]\ngate_time = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("gate_time"), "{err}");
        let err = ExperimentConfig::parse("[dataset]\ncorruption_rate = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("corruption_rate"), "{err}");
        let err = ExperimentConfig::parse("[run]\nlabel = \"\"\n").unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.training.train_seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}

use std::path::{Path, PathBuf};

use mof_core::encoder::EncoderConfig;
use mof_core::models::ModelKind;
use mof_core::train::TrainConfig;
use mof_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything one command needs. Loaded from a JSON file, then overridden
/// by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub market: Option<PathBuf>,
    pub summaries: Option<PathBuf>,
    pub similar_words: Option<PathBuf>,
    pub features: Vec<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Share of windows used for training.
    pub split: f64,
    pub summary_sentences: usize,
    pub pretrain_epochs: usize,
    pub ablate_models: Vec<ModelKind>,
    pub train: TrainConfig,
    pub encoder_config: EncoderConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            market: None,
            summaries: None,
            similar_words: None,
            features: Vec::new(),
            encoder: None,
            out: None,
            split: 0.8,
            summary_sentences: 3,
            pretrain_epochs: 20,
            ablate_models: vec![ModelKind::FeedForward, ModelKind::Lstm],
            train: TrainConfig::default(),
            encoder_config: EncoderConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut cfg.market,
            &mut cfg.summaries,
            &mut cfg.similar_words,
            &mut cfg.encoder,
            &mut cfg.out,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        cfg.features.iter_mut().for_each(fix);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Config(format!(
                "split must lie in (0, 1), got {}",
                self.split
            )));
        }
        if self.summary_sentences == 0 {
            return Err(Error::Config("summary_sentences must be at least 1".into()));
        }
        self.train.validate()?;
        self.encoder_config.validate()?;
        let paths = [
            &self.market,
            &self.summaries,
            &self.similar_words,
            &self.encoder,
        ];
        for p in paths.into_iter().flatten().chain(&self.features) {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{flag} is required")))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        Self::require(&self.out, "--out")
    }
}

/// Creates `dir` if needed and checks that it accepts files.
pub fn prepare_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })?;
    let probe = dir.join(".mof-write-check");
    std::fs::write(&probe, b"").map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })?;
    let _ = std::fs::remove_file(probe);
    Ok(())
}

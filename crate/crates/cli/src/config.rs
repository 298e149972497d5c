//! Run configuration file: TOML, unknown keys rejected, relative paths
//! resolved against the file's directory.

use std::path::{Path, PathBuf};

use patentner_core::bilm::BiLmConfig;
use patentner_core::model::ModelConfig;
use patentner_core::textproc::{RuleConfig, TokenizerKind};
use patentner_core::training::TrainConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    General,
    #[default]
    Chemical,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub bilm: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `training.seed` when set.
    pub seed: Option<u64>,
    pub tokenizer: Option<Mode>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub bilm: BiLmConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for (slot, must_exist) in [
            (&mut p.train, true),
            (&mut p.dev, true),
            (&mut p.corpus, true),
            (&mut p.bilm, true),
            (&mut p.embeddings, true),
            (&mut p.rules, true),
            (&mut p.out, false),
        ] {
            if let Some(rel) = slot.take() {
                let full = base.join(rel);
                if must_exist && !full.exists() {
                    return Err(CliError::Usage(format!(
                        "{}: referenced path {} does not exist",
                        path.display(),
                        full.display()
                    )));
                }
                *slot = Some(full);
            }
        }
        Ok(cfg)
    }
}

pub fn load_rules(path: &Path) -> Result<RuleConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn tokenizer(mode: Mode, rules: Option<&Path>) -> Result<TokenizerKind, CliError> {
    Ok(match mode {
        Mode::General => TokenizerKind::General,
        Mode::Chemical => TokenizerKind::Chemical(match rules {
            Some(p) => load_rules(p)?,
            None => RuleConfig::default(),
        }),
    })
}

//! Run configuration read from a TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::reader::ReaderConfig;
use crate::retriever::RetrieverConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
}

/// Everything a training run needs. `encoder.vocab_size` is replaced by the
/// size of the vocabulary built from the training data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub retriever: RetrieverConfig,
    pub reader: ReaderConfig,
    pub train: TrainConfig,
    pub data: DataPaths,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Validation(format!("config: {e}")))
    }

    /// Checks every section. The encoder is checked without its vocabulary
    /// size, which only the data decides.
    pub fn validate(&self) -> Result<()> {
        EncoderConfig { vocab_size: crate::textproc::SPECIALS.len(), ..self.encoder.clone() }.validate()?;
        self.retriever.validate()?;
        self.reader.validate()?;
        self.train.validate()
    }

    /// Every referenced data file must exist before anything runs.
    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.data.train, &self.data.dev].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::file(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
            }
        }
        Ok(())
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use point2vec::data::synthetic_dataset;
use point2vec::{Checkpoint, Dataset, Error, Result, Sample, Split};

use crate::config::RunConfig;

/// Settings shared by every command.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Run {
    /// Creates `out` if needed. `seed` overrides the configured seed.
    pub fn new(config: RunConfig, seed: Option<u64>, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Self {
            seed: seed.unwrap_or(config.seed),
            config,
            out: out.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Where data errors point: the manifest, or a synthetic placeholder.
    pub fn data_origin(&self) -> PathBuf {
        self.config
            .data
            .manifest
            .clone()
            .unwrap_or_else(|| PathBuf::from("<synthetic>"))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.config.data.manifest {
            Some(m) => Dataset::load(m),
            None => synthetic_dataset(&self.config.data.synthetic),
        }
    }

    pub fn data_error(&self, msg: impl Into<String>) -> Error {
        Error::Data {
            path: self.data_origin(),
            msg: msg.into(),
        }
    }

    /// The requested split, which must not be empty.
    pub fn split<'a>(&self, dataset: &'a Dataset, split: Split) -> Result<Vec<&'a Sample>> {
        let s = dataset.split(split);
        if s.is_empty() {
            return Err(self.data_error(format!("no {split:?} samples")));
        }
        Ok(s)
    }
}

pub fn load_checkpoint(path: Option<&Path>) -> Result<Option<Checkpoint>> {
    path.map(Checkpoint::load).transpose()
}

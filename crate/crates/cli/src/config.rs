//! Run configuration: one JSON document (with `//` comments allowed) that
//! covers every command.

use std::fs;
use std::path::{Path, PathBuf};

use point2vec::data::SyntheticDatasetSpec;
use point2vec::{
    ClassificationConfig, Error, MaskStrategy, ModelConfig, PartSegConfig, PretrainConfig, Result,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub classification: ClassificationConfig,
    pub part_segmentation: PartSegConfig,
    pub fewshot: FewShotConfig,
    pub analyze_mask: MaskAnalysisConfig,
}


/// A manifest on disk, or a synthetic dataset generated in memory when no
/// manifest is given.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Relative paths resolve against the config file's directory.
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticDatasetSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotConfig {
    pub way: usize,
    pub shot: usize,
    pub runs: usize,
    /// Fine-tuning epochs per episode; the classification setting when unset.
    pub epochs: Option<u64>,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 10,
            runs: 10,
            epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskAnalysisConfig {
    pub strategies: Vec<MaskStrategy>,
    pub ratios: Vec<f64>,
    pub samples: usize,
    pub points: usize,
    pub centers: usize,
    pub group_size: usize,
    /// Samples written out as colored point files, per strategy and ratio.
    pub exports: usize,
}

impl Default for MaskAnalysisConfig {
    fn default() -> Self {
        Self {
            strategies: vec![MaskStrategy::Random, MaskStrategy::Block],
            ratios: vec![0.65],
            samples: 16,
            points: 1024,
            centers: 64,
            group_size: 32,
            exports: 2,
        }
    }
}

/// Removes `//` comments outside string literals. Line structure is kept
/// so parse errors still point at the right line.
pub fn strip_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    let (mut in_string, mut escaped) = (false, false);
    while let Some(c) = chars.next() {
        if in_string {
            out.push(c);
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
        } else if c == '/' && chars.peek() == Some(&'/') {
            for c in chars.by_ref() {
                if c == '\n' {
                    out.push('\n');
                    break;
                }
            }
        } else {
            in_string = c == '"';
            out.push(c);
        }
    }
    out
}

fn config_error(key: impl Into<String>, msg: impl ToString) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.to_string(),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let clean = strip_comments(text);
        let de = &mut serde_json::Deserializer::from_str(&clean);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." {
                "<root>".to_string()
            } else {
                path
            };
            config_error(key, e.into_inner())
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and validates `path`, resolving a relative manifest path
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| config_error(path.display().to_string(), e))?;
        let mut config = Self::parse(&text)?;
        if let Some(m) = &config.data.manifest {
            if m.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                config.data.manifest = Some(base.join(m));
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| match e {
            Error::Config { .. } => e,
            other => config_error("model.encoder", other),
        })?;
        self.pretrain.validate(self.model.encoder.depth)?;
        self.classification
            .recipe(true)
            .validate()
            .map_err(|e| config_error("classification", e))?;
        if !(0.0..1.0).contains(&self.classification.label_smoothing) {
            return Err(config_error(
                "classification.label_smoothing",
                "must lie in [0, 1)",
            ));
        }
        self.part_segmentation
            .recipe()
            .validate()
            .map_err(|e| config_error("part_segmentation", e))?;
        let f = &self.fewshot;
        if f.way == 0 || f.shot == 0 || f.runs == 0 || f.epochs == Some(0) {
            return Err(config_error(
                "fewshot",
                "way, shot, runs and epochs must be positive",
            ));
        }
        let m = &self.analyze_mask;
        if m.centers < 2 || m.centers > m.points || m.group_size == 0 || m.group_size > m.points {
            return Err(config_error(
                "analyze_mask.centers",
                "need 2 <= centers <= points and 1 <= group_size <= points",
            ));
        }
        if let Some(r) = m.ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(config_error(
                "analyze_mask.ratios",
                format!("{r} outside (0, 1)"),
            ));
        }
        let s = &self.data.synthetic;
        if s.points == 0 || s.train_per_class + s.test_per_class == 0 {
            return Err(config_error("data.synthetic", "needs points and samples"));
        }
        Ok(())
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{load_part_labels, load_xyz, write_xyz};
use super::synthetic::{
    generate_synthetic_shape, height_bands, random_primitive, Primitive, SyntheticShapeSpec,
};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub classes: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn validate(&self, origin: &Path) -> Result<()> {
        let bad = |msg: String| Error::Data {
            path: origin.to_path_buf(),
            msg,
        };
        if self.version != MANIFEST_VERSION {
            return Err(bad(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        if self.classes.is_empty() {
            return Err(bad("manifest lists no classes".into()));
        }
        if let Some(s) = self.samples.iter().find(|s| s.label >= self.classes.len()) {
            return Err(bad(format!(
                "{}: label {} outside the {} listed classes",
                s.path.display(),
                s.label,
                self.classes.len()
            )));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        m.validate(path)?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub label: usize,
    pub split: Split,
}

/// A fully loaded dataset, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let samples = manifest
            .samples
            .iter()
            .map(|rec| {
                let path = root.join(&rec.path);
                let mut cloud = load_xyz(&path)?;
                if let Some(parts) = &rec.parts {
                    let ppath = root.join(parts);
                    let labels = load_part_labels(&ppath)?;
                    if labels.len() != cloud.len() {
                        return Err(Error::Data {
                            path: ppath,
                            msg: format!("{} part labels for {} points", labels.len(), cloud.len()),
                        });
                    }
                    cloud.labels = Some(labels);
                }
                Ok(Sample {
                    cloud,
                    label: rec.label,
                    split: rec.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes: manifest.classes,
            samples,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn has_part_labels(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.cloud.labels.is_some())
    }

    /// Number of distinct part labels, i.e. one past the largest.
    pub fn part_count(&self) -> usize {
        self.samples
            .iter()
            .filter_map(|s| s.cloud.labels.as_ref())
            .flatten()
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0)
    }
}

/// Recipe for the synthetic datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetSpec {
    pub kind: SyntheticKind,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Sphere, cube, cylinder, cone and torus with randomized sizes.
    Shapes,
    /// Cylinders with three axial part bands.
    BandedCylinders,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::Shapes,
            train_per_class: 200,
            test_per_class: 50,
            points: 8192,
            noise: 0.01,
            seed: 0,
        }
    }
}

pub const BANDS: u32 = 3;

/// Builds the dataset in memory: train samples first, class-major.
pub fn synthetic_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (classes, shape_classes): (Vec<String>, usize) = match spec.kind {
        SyntheticKind::Shapes => (Primitive::NAMES.iter().map(|s| s.to_string()).collect(), 5),
        SyntheticKind::BandedCylinders => (vec!["cylinder".into()], 1),
    };
    let mut samples = Vec::new();
    for (split, count) in [
        (Split::Train, spec.train_per_class),
        (Split::Test, spec.test_per_class),
    ] {
        for label in 0..shape_classes {
            for _ in 0..count {
                let primitive = match spec.kind {
                    SyntheticKind::Shapes => random_primitive(label, &mut rng),
                    SyntheticKind::BandedCylinders => Primitive::Cylinder {
                        radius: rng.random_range(0.3..0.6),
                        height: rng.random_range(1.2..2.0),
                    },
                };
                let mut cloud = generate_synthetic_shape(&SyntheticShapeSpec {
                    primitive,
                    noise: spec.noise,
                    points: spec.points,
                    seed: rng.random(),
                })?;
                if spec.kind == SyntheticKind::BandedCylinders {
                    cloud.labels = Some(height_bands(&cloud.points, BANDS)?);
                }
                samples.push(Sample {
                    cloud,
                    label,
                    split,
                });
            }
        }
    }
    Ok(Dataset { classes, samples })
}

/// Writes `dataset` as point files plus `manifest.json` under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(dataset.samples.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let split = match s.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let name = PathBuf::from(format!("{split}_{i:05}_{}.xyz", dataset.classes[s.label]));
        write_xyz(&dir.join(&name), &s.cloud)?;
        records.push(SampleRecord {
            path: name,
            label: s.label,
            split: s.split,
            parts: None,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        classes: dataset.classes.clone(),
        samples: records,
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_preserves_order() {
        let spec = SyntheticDatasetSpec {
            train_per_class: 2,
            test_per_class: 1,
            points: 40,
            ..Default::default()
        };
        let ds = synthetic_dataset(&spec).unwrap();
        assert_eq!(ds.samples.len(), 15);
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        assert_eq!(ds.split(Split::Test).len(), 5);
    }

    #[test]
    fn part_files_attach_labels() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.xyz"), "0 0 0\n1 1 1\n").unwrap();
        fs::write(dir.path().join("a.parts"), "3\n1\n").unwrap();
        let m = DatasetManifest {
            version: 1,
            classes: vec!["x".into()],
            samples: vec![SampleRecord {
                path: "a.xyz".into(),
                label: 0,
                split: Split::Train,
                parts: Some("a.parts".into()),
            }],
        };
        let mp = dir.path().join("m.json");
        m.write(&mp).unwrap();
        let ds = Dataset::load(&mp).unwrap();
        assert_eq!(ds.samples[0].cloud.labels, Some(vec![3, 1]));
        assert_eq!(ds.part_count(), 4);
    }

    #[test]
    fn invalid_manifests_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("m.json");
        fs::write(
            &mp,
            r#"{"version":1,"classes":["a"],"samples":[{"path":"x","label":1,"split":"train"}]}"#,
        )
        .unwrap();
        assert!(matches!(
            DatasetManifest::read(&mp),
            Err(Error::Data { .. })
        ));
        fs::write(&mp, r#"{"version":2,"classes":["a"],"samples":[]}"#).unwrap();
        assert!(DatasetManifest::read(&mp).is_err());
        fs::write(
            &mp,
            r#"{"version":1,"classes":["a"],"samples":[],"extra":0}"#,
        )
        .unwrap();
        assert!(DatasetManifest::read(&mp).is_err());
        fs::write(&mp, r#"{"version":1,"classes":["a"],"samples":[{"path":"missing.xyz","label":0,"split":"test"}]}"#).unwrap();
        assert!(Dataset::load(&mp).unwrap_err().is_data());
    }

    #[test]
    fn banded_cylinders_have_three_parts() {
        let spec = SyntheticDatasetSpec {
            kind: SyntheticKind::BandedCylinders,
            train_per_class: 2,
            test_per_class: 0,
            points: 300,
            ..Default::default()
        };
        let ds = synthetic_dataset(&spec).unwrap();
        assert!(ds.has_part_labels());
        assert_eq!(ds.part_count(), 3);
    }
}

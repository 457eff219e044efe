//! Point files, dataset manifests, synthetic shapes, and augmentation.

mod augment;
mod io;
mod manifest;
mod synthetic;

pub use augment::{augment, make_pretrain_sample, AugmentationSpec};
pub use io::{format_xyz, load_part_labels, load_xyz, parse_xyz, write_xyz};
pub use manifest::{
    synthetic_dataset, write_dataset, Dataset, DatasetManifest, Sample, SampleRecord, Split,
    SyntheticDatasetSpec, SyntheticKind, BANDS, MANIFEST_VERSION,
};
pub use synthetic::{
    generate_synthetic_shape, height_bands, random_primitive, Primitive, SyntheticShapeSpec,
};

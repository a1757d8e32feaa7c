// SPDX-License-Identifier: MIT OR Apache-2.0

//! Procedural images with patch-level ground truth and templated QA.

pub mod dataset;
pub mod image;
pub mod qa;
pub mod vocab;

pub use dataset::{
    generate_dataset, labels_from_text, labels_to_text, read_dataset, read_manifest, read_split,
    write_dataset, Dataset, Example, Manifest, Split,
};
pub use image::{ImageSpec, PatchLabelMap, SceneObject, SyntheticImage};
pub use qa::{QaPair, Template, PROMPT_LEN};

//! Ingestion: taxonomy labels, the JSON Lines manifest, crop/resize/side
//! normalisation and the synthetic dataset generator.

pub mod image;
pub mod label;
pub mod manifest;
pub mod synth;

pub use image::{crop_resize, decode_image, load_image, normalize_side, Augmentation, GrayImage};
pub use label::{FractureLabel, ParentClass};
pub use manifest::{class_histogram, load_manifest, load_sample, load_samples, BoundingBox, Manifest, Sample, Side};
pub use synth::{synth_generate, write_dataset, SynthDataset};

//! Biopsy filename grammar, manifests, splits, image loading, augmentation,
//! and procedural stand-in datasets.

mod augment;
mod filename;
mod image;
mod manifest;
mod split;
mod synthetic;

pub use augment::{apply_params, augment, sample_params, AugmentParams, AugmentationConfig};
pub use filename::{parse_breakhis_filename, BiopsyRecord, Magnification, Subtype, TumorClass};
pub use image::{load_image, resize_bilinear, save_image};
pub use manifest::{scan_directory, Manifest, Scan, Skipped, MANIFEST_HEADER};
pub use split::{balance_classes, patient_leakage, split_by_magnification, stratified_split, ClassKey};
pub use synthetic::{make_synthetic_dataset, write_synthetic_tree, SyntheticSet, MAX_SYNTHETIC_CLASSES};

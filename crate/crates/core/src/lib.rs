//! Attribute prediction (gender, race) from near-infrared ocular images
//! using tessellated texture-code histograms and a linear SVM.
//!
//! The pipeline is: [`align`] a raw image into the canonical frame, select a
//! region, compute a per-pixel code image with one of the [`descriptors`],
//! turn it into a [`features::FeatureVector`] of per-cell histograms, and
//! classify with [`svm`]. [`eval`] implements the subject-disjoint
//! experiment protocols on top of [`dataset`] manifests; [`synth`] renders
//! labelled synthetic data so every protocol can run without restricted
//! image collections.

pub mod align;
pub mod dataset;
pub mod descriptors;
pub mod eval;
pub mod features;
pub mod imgcore;
pub mod svm;
pub mod synth;

pub use align::{align_ocular, apply_region, AlignError, AlignParams, OcularGeometry, RegionSelector};
pub use dataset::{load_manifest, Attribute, DatasetManifest, SampleRecord};
pub use descriptors::{CodeImage, DescriptorConfig, FilterBank, LpqConfig};
pub use features::{extract_features, tessellate_histograms, FeatureVector};
pub use imgcore::{gaussian_blur, load_pgm, resize_bicubic, write_pgm, BlurConfig, GrayImage};

//! Data plumbing: class-foldered image corpora, manifests with seeded
//! train/holdout splits, image normalization, embedding extraction behind a
//! pluggable encoder with an on-disk cache, and annotation task export.

pub mod annotation;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod image_io;
pub mod manifest;
pub mod samples;
pub mod synthetic;

pub use annotation::{
    export_annotations, import_annotations, load_completed, AnnotationExport, AnnotationTask, ClassPlausibility, CompletedTask,
};
pub use embeddings::{extract_embeddings, Embeddings};
pub use encoder::{EncoderPort, EncoderSpec, MeanPixelEncoder, PooledGridEncoder};
pub use error::{DataError, Result};
pub use image_io::{denormalize, load_and_normalize, normalize, pixel_hash, save_png};
pub use manifest::{build_manifest, DatasetManifest, ImageRecord, Split};
pub use samples::{SampleEntry, SampleSet};

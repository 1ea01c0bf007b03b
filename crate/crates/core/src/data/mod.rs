//! Image ingestion, preprocessing, dataset manifests, batching and the
//! synthetic dataset generator.

pub mod image;
pub mod loader;
pub mod manifest;
pub mod preprocess;
pub mod synth;

pub use image::{read_image, RgbImage};
pub use loader::{batches, epoch_order, Batch, BatchStream, LoaderConfig};
pub use manifest::{
    compute_stats, load_dataset, scan_dataset, split, LabelMap, Manifest, Record, Split,
    StatsScope, CLASS_NAMES,
};
pub use preprocess::{preprocess, Normalization, Preprocess};
pub use synth::{synth_generate, SynthOutput};

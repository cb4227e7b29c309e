pub mod augment;
pub mod manifest;
pub mod resample;
pub mod synth;
pub mod tiling;

pub use manifest::{assign_patients, load_sample, split_by_patient, split_samples, DatasetManifest, LabeledSample, Magnification, SampleEntry, Split, SplitRatios};
pub use synth::{generate_in_memory, generate_synthetic, SynthConfig};
pub use tiling::TileGeometry;

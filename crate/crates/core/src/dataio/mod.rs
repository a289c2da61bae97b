//! Dataset layout on disk, preprocessing and the synthetic recording generator.

mod format;
mod preprocess;
mod synth;

pub(crate) use format::parse_manifest as parse_manifest_file;
pub use format::{load_dataset, read_f32, write_dataset, write_f32, Dataset, MouseRecord, Split};
pub use preprocess::{
    apply_standardizer, fit_standardizer, inverse_standardizer, prepare, preprocess_image,
    standardize_coordinates, PreparedData, PreparedMouse, Standardizer, StreamStats,
};
pub use synth::{generate_synthetic, write_synthetic, SynthConfig, SynthMouse, SynthNeuron};

/// Columns of the behavior matrix.
pub const BEHAVIOR_DIM: usize = 5;
pub const DILATION: usize = 0;
pub const DILATION_DERIVATIVE: usize = 1;
pub const PUPIL_X: usize = 2;
pub const PUPIL_Y: usize = 3;
pub const RUNNING_SPEED: usize = 4;

pub const FORMAT_VERSION: u32 = 1;

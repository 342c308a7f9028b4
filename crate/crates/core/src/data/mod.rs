//! Sequence files, preprocessing, windowing and the synthetic motion generator.

mod file;
mod synthetic;
mod window;

pub use file::{
    load_dataset, load_dir, load_sequence, parse_sequence, save_sequence, Dataset, LoadOptions, Repr, SequenceFile,
    SCHEMA,
};
pub use synthetic::{
    binary_tree, default_bands, dominant_frequency, generate_synthetic, oracle_classify, SyntheticSpec,
};
pub use window::{batch_of, downsample, make_windows, windows_of, Window, WindowSpec};

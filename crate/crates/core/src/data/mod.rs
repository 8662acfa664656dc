//! Motion representation, file I/O, synthetic corpora and window sampling.

pub mod dataset;
pub mod layout;
pub mod motion;
pub mod normalize;
pub mod synth;

pub use dataset::{batch_windows, draw_window, draw_window_len, DatasetIndex, MotionDataset, PaddedBatch, WindowSample, WindowSpan};
pub use layout::{FeatureLayout, SliceKind};
pub use normalize::FeatureNormalizer;
pub use motion::{read_motion_file, write_motion_file, MotionSequence, STANDARD_FPS};

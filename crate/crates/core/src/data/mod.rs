//! On-disk formats, the synthetic generator and batch iteration.

pub mod annotations;
pub mod container;
pub mod dataset;
pub mod synth;

pub use annotations::{
    FullAnnotation, PredictionRow, Vocabulary, WeakAnnotation, LLP_CATEGORIES,
};
pub use container::{read_container, write_container, Container, Dtype};
pub use dataset::{batch_indices, Dataset, VideoRecord};
pub use synth::{gen_synthetic, gen_video, Prototypes, SyntheticSpec, SyntheticVideo};

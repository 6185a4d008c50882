//! Data preparation, optimization, training and inference.

pub mod config;
pub mod data;
pub mod infer;
pub mod optim;
pub mod train;

pub use config::{parse_kv, TrainConfig};
pub use data::{
    checksum, dihedral, ingest_corpus, make_patches, mix_seed, read_gray, synthetic_scene, write_pgm, Corpus,
};
pub use infer::{despeckle, despeckle_subbands};
pub use optim::{cosine_lr, Adam};
pub use train::{train, EpochLog, TrainOutcome};

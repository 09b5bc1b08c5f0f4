//! Retrieval-augmented multimodal sentiment regression.
//!
//! Each sample carries text, visual and acoustic feature sequences and a
//! real-valued sentiment label in `[-3, 3]`. The model enriches every
//! modality with two kinds of generated context (one from the sample's own
//! modalities, one from retrieved same-polarity neighbours), fuses the
//! enhanced streams and regresses the label. Training adds a triplet-style
//! contrastive term on the shared retrieval space.

pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod metrics;
pub mod modality;
pub mod nn;
pub mod objective;
pub mod parallel;
pub mod prompts;
pub mod retrieval;
pub mod training;

pub use config::{Ablation, ContrastiveVariant, ModelConfig};
pub use dataset::{Dataset, Dims, FeatureSequence, Sample, SeqShape, Split};
pub use error::{Error, Result};
pub use metrics::{evaluate, Acc2Convention, EvalReport};
pub use modality::{Modality, PerModality};
pub use parallel::Parallelism;
pub use training::{train, Checkpoint, Model, TrainOptions, TrainOutcome, Trainer};

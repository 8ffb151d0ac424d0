//! Variational self-attention for headline/body stance detection.
//!
//! The crate bundles a small reverse-mode autodiff tape, the variational
//! building blocks, the attention encoder with its two baselines, training,
//! checkpointing, FNC-1 data handling and evaluation metrics.

pub mod checkpoint;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod variational;

pub use checkpoint::Checkpoint;
pub use data::{
    class_stats, encode_examples, load_fnc1, make_synthetic, synthetic_embeddings, ClassStats, Dataset, Split,
    Stance, StanceExample,
};
pub use embeddings::{
    embed, load_pretrained, tokenize, EmbeddedSentence, EmbeddingMatrix, PretrainedEmbeddings,
    SentenceBatch, Vocabulary, PAD, UNK,
};
pub use error::{Error, Result};
pub use model::{
    ElboReport, EncodedExample, ModelConfig, ModelKind, PredictMode, Prediction, VsamParameters,
};
pub use metrics::{evaluate, evaluate_with_classes, MetricsReport};
pub use optim::Adam;
pub use tensor::{finite_difference_check, relative_error, Tape, Tensor, Var};
pub use train::{predict_all, train_step, EpochLog, StepOptions, TrainConfig, Trainer};
pub use variational::{DiagonalGaussian, Gaussian, NoiseGenerator, NoiseSource, ZeroNoise};

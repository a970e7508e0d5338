//! Training, evaluation and adaptation experiments.

mod adapt;
mod bleu;
mod optim;
mod retrieval;
pub mod synthetic;
mod train;

pub use adapt::{adapt_nonparametric, finetune, NonParametricAdapter};
pub use bleu::corpus_bleu;
pub use optim::{adam_step, lr_schedule, AdamConfig, AdamState};
pub use retrieval::{retrieve_examples, ModelEmbedding, RetrievalIndex, RetrievalStrategy, Retriever, RetrieverConfig};
pub use train::{
    batch_loss, evaluate_loss, examples_with_neighbors, select_checkpoint, token_accuracy, train, CheckpointRecord,
    Example, MetricRow, TrainConfig, TrainOutcome,
};

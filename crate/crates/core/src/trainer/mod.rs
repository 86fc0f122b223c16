//! Desk-scale training: byte corpus, batching, Adam, perplexity and
//! checkpoints.

mod adam;
mod batch;
mod checkpoint;
mod corpus;
mod train;

pub use adam::{clip_global_norm, global_norm, Adam, AdamConfig, StepStats};
pub use batch::{batch_iter, chunk_starts, make_batch, Batch, Batches};
pub use checkpoint::{
    assemble, decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_as, save_checkpoint, MAGIC,
    VERSION,
};
pub use corpus::{decode, encode, load_corpus, Corpus, BYTE_VOCAB};
pub use train::{cross_entropy_sum, evaluate, loss_and_grads, train, EpochLog, TrainConfig, TrainLog, LOG_HEADER};

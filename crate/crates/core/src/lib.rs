//! Text-bridged cross-modal distillation.
//!
//! A student audio embedding is trained to match a frozen teacher text space
//! with a contrastive loss; because the teacher's text space is shared with
//! its image encoder, audio-to-image retrieval emerges without any
//! audio-image pairs. The crate ships a synthetic benchmark world, the loss
//! with exact gradients, the trainer, retrieval/classification metrics, three
//! baselines, a binary embedding format, and an experiment pipeline.

pub mod baselines;
pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod io;
pub mod objective;
pub mod pipeline;
pub mod rng;
pub mod trainer;
pub mod world;

pub use embedding::{cosine_similarity, normalize_rows, similarity_matrix, Embedding, EmbeddingSet, Matrix, Modality};
pub use config::{parse_config, RunConfig};
pub use error::{Error, Result};
pub use io::{read_embedding_set, write_embedding_set};
pub use pipeline::{run_experiment, Summary};
pub use objective::{distill_loss, distill_loss_symbolic_check, LossOutput, Temperature};
pub use trainer::{forward_student, init_params, train_adapter, AdapterMode, AdapterParams, TrainConfig, TrainReport};
pub use world::{generate_world, world_split, TaxonLabel, World, WorldConfig, WorldView};

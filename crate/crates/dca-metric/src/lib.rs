//! Distribution-context-aware metric learning.
//!
//! This crate implements a distance-metric toolkit built around a blended
//! pairwise distance: plain Euclidean distances are combined with a soft
//! Jaccard "context" distance computed from each sample's Gaussian-kernel
//! similarity to the rest of its batch. On top of that sit triplet hinge
//! losses (batch-hard and batch-all, over either distance), their analytic
//! gradients, a small MLP embedder trained with Adam, retrieval evaluation
//! (mAP and CMC, with an optional context re-ranking mode), a synthetic
//! clustered-data generator, and fixed binary formats for embeddings and
//! checkpoints.
//!
//! Determinism is a design goal throughout: random streams are seeded
//! ChaCha8, file formats are pure functions of their contents, and the sums
//! behind context distances, loss averaging, and mAP use exact accumulation
//! so results are invariant under batch permutations.
//!
//! ```
//! use dca_metric::{
//!     generate, train, EmbeddingBatch, LossConfig, LossVariant, MlpModel, PkSpec, SynthSpec,
//!     TrainConfig,
//! };
//!
//! let data = generate(&SynthSpec::new(4, 8, 6, 10.0, 1.0, 42).unwrap());
//! let model = MlpModel::new(&[6, 16, 8], 42).unwrap();
//! let config = TrainConfig::new(
//!     LossConfig::new(LossVariant::DcaBatchHard),
//!     PkSpec::new(3, 3, 42).unwrap(),
//! )
//! .with_steps(10);
//! let result = train(&data, model, &config).unwrap();
//! assert_eq!(result.loss_history.len(), 10);
//! ```

pub mod batch;
pub mod data;
pub mod error;
pub mod eval;
pub mod grad;
pub mod loss;
pub mod metric;
pub mod mining;
pub mod mlp;
pub mod numeric;
pub mod optim;
pub mod train;

pub use batch::EmbeddingBatch;
pub use data::{
    generate, read_csv_dataset, read_embeddings, split_queries, write_embeddings, Dataset,
    SynthSpec, EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use error::{DcaError, Result};
pub use eval::{evaluate, EvalMode, RetrievalReport};
pub use grad::{finite_difference_check, loss_backward, FdReport, GradientBuffer};
pub use loss::{
    hinge, loss_forward, loss_forward_frozen, LossConfig, LossOutput, LossVariant, DEFAULT_LAMBDA,
    DEFAULT_MARGIN,
};
pub use metric::{
    cross_distances, dca_distances, gaussian_similarity, jaccard_distances, pairwise_distances,
    DcaDistances, JACCARD_DENOM_FLOOR, SIM_EXPONENT_CLAMP,
};
pub use mining::{
    enumerate_batch_all, mine_batch_hard, pk_sample, validate_triplet_structure, MiningVariant,
    PkSpec, Triplet, TripletSet,
};
pub use mlp::{
    load_checkpoint, save_checkpoint, Layer, MlpCache, MlpGradients, MlpModel, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use numeric::{exact_mean, exact_sum};
pub use optim::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON};
pub use train::{
    default_milestones, embed_dataset, learning_rate_at, train, TrainConfig, TrainResult,
};

//! Kolmogorov-Arnold networks with pluggable node aggregation functions.
//!
//! Edges carry trainable B-spline activations ([`spline`]); each node reduces
//! its incoming edge activations with one of nine [`Aggregator`]s. The crate
//! also contains a small training loop, a tabular preprocessing pipeline and
//! the rank/significance statistics used to compare configurations.

pub mod aggregate;
pub mod data;
pub mod error;
pub mod network;
pub mod spline;
pub mod stats;
pub mod training;

pub use aggregate::{aggregate, aggregate_backward, Aggregator};
pub use data::{
    load_table, preprocess, synthetic_dataset, Dataset, DatasetManifest, PreprocessOptions, RawTable, SyntheticKind,
};
pub use error::{KanError, Result};
pub use network::{layer_norm, range_adherence, AdherenceTally, ForwardTrace, Network, NetworkConfig};
pub use spline::{EdgeActivation, KnotGrid};
pub use stats::{average_rank, rank_with_ties, wilcoxon_signed_rank, RankTable, WilcoxonResult};
pub use training::{adam_step, backward, evaluate, softmax_cross_entropy, train, AdamState, Head, TrainConfig, TrainReport};

//! Seller GMV forecasting on an e-commerce graph.
//!
//! The crate holds a small reverse-mode autodiff engine ([`tensor`]), the seller
//! graph and ego-subgraph sampler ([`graph`]), the feature fusion and temporal
//! encoders ([`encoder`]), the temporal-shift aware graph layer ([`ita`]), the
//! assembled model ([`model`]), a synthetic data generator ([`synth`]) and the
//! training/evaluation loop ([`train`]).

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod inspect;
pub mod ita;
pub mod model;
pub mod params;
pub mod selfcheck;
pub mod synth;
pub mod tensor;
pub mod train;

pub use dataset::{Dataset, Normalization, TruthRecord};
pub use error::{GaiaError, Result};
pub use graph::{extract_ego, extract_ego_at, ESellerGraph, Edge, EgoSubgraph, Relation, SellerNode};
pub use model::{Ablation, EgoInputs, GaiaModel, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use synth::{generate, split, Splits, SynthOutput, SynthSpec};
pub use tensor::{Tape, Tensor, TensorError, Var};
pub use train::{Checkpoint, Evaluation, Metrics, TrainConfig, Trainer};

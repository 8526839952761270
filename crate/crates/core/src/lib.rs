//! One-shot human parsing with dual metric spaces and momentum prototypes.
//!
//! Every tensor is `f64` in `[C, H, W]` layout. Training runs on a small
//! reverse-mode tape ([`autograd::Tape`]).

pub mod autograd;
pub mod dual_metric;
pub mod embedding;
pub mod episodic_data;
pub mod error;
pub mod evaluation;
pub mod labels;
pub mod objectives;
pub mod params;
pub mod prototypes;
pub mod tensor;
pub mod trainer;

pub use embedding::{EncoderConfig, MetricSpace};
pub use episodic_data::{Dataset, DatasetManifest, Episode, FoldSpec, Phase, Split, TestPair, Way};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, MetaTestScores, OneShotParser};
pub use labels::{derive_binary_mask, LabelMap, BACKGROUND};
pub use objectives::{LossReport, LossWeights};
pub use prototypes::{Prototype, PrototypeBank};
pub use tensor::Tensor;
pub use trainer::{Checkpoint, Model, TrainConfig, Trainer};

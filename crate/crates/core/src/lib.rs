//! Cross-modal face/voice embedding alignment.
//!
//! Two small encoders map face-channel and voice-channel features into a
//! common embedding space. Training combines per-modality identity
//! cross-entropy through a (optionally shared) classifier with an explicit
//! alignment penalty between paired embeddings. Verification scores are
//! cosine similarities; evaluation reports equal error rates under matched
//! and shifted language conditions, and several systems can be combined by
//! z-normalized score fusion.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod training;

pub use checkpoint::Checkpoint;
pub use codec::FileError;
pub use config::FlatConfig;
pub use data::{generate_dataset, Condition, Dataset, SyntheticConfig, TrialList};
pub use error::{Error, Result};
pub use eval::{compute_eer, fuse_scores, make_report, overall_score, score_trials, EvalReport, ScoreFile};
pub use model::{HeadMode, ModelState, Modality};
pub use objective::{total_loss, AlignMetric, LossBreakdown};
pub use training::{run_training, TrainingConfig};

//! Speaker-embedding anonymization toolkit.
//!
//! Two anonymizers share one evaluation harness:
//!
//! - [`pool`]: pick the `k` nearest or farthest speakers from an external
//!   pool and average them into a pseudo-speaker.
//! - [`reprogram`]: add one trained, masked perturbation `θ` to every
//!   speaker-level embedding, keeping a frozen synthesis proxy
//!   ([`proxy`]) satisfied while moving away from the original under an
//!   MAE budget.
//!
//! [`eval`] scores original and anonymized embeddings with cosine similarity
//! and reports the equal error rate under the OO, OA and AA attack
//! scenarios.

pub mod embedding;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod pool;
pub mod proxy;
pub mod reprogram;
pub mod seed;

pub use embedding::{
    cosine_distance, load_embeddings, save_embeddings, speaker_level_average, EmbeddingPool, EmbeddingSet,
    SpeakerLevelEmbedding, UtteranceEmbedding,
};
pub use error::{Error, Result};
pub use eval::{compute_eer, run_scenario, score_trial, Anonymizer, IdentityAnonymizer, Scenario, ScenarioResult, ScoreSet, Trial};
pub use pool::{anonymize_baseline, rank_candidates, BaselineAnonymizer, Direction, SelectionConfig};
pub use proxy::{forward, grad_wrt_input, load_proxy, loss, ProxyModel, ProxyTarget};
pub use reprogram::{
    anonymize_reprogram, apply, mae_masked, objective, optimize, project, OptimizationTrace, OptimizerConfig,
    ReprogramAnonymizer, ReprogramParams, TrainingSet,
};

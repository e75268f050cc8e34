//! Seeded synthetic data: Gaussian speaker clusters and the default frozen
//! proxy model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embedding::{EmbeddingPool, EmbeddingSet, UtteranceEmbedding, DEFAULT_DIM};
use crate::error::Result;
use crate::eval::{all_pairs_trials, Trial};
use crate::proxy::ProxyModel;
use crate::seed::derive_seed;

pub const DEFAULT_COND_DIM: usize = 8;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_OUTPUT_DIM: usize = 32;
pub const DEFAULT_PROXY_SEED: u64 = 20230;

/// The desk-scale proxy: `512 + 8 -> 64 (tanh) -> 32`.
pub fn default_proxy() -> ProxyModel {
    ProxyModel::seeded_mlp(
        DEFAULT_DIM,
        DEFAULT_COND_DIM,
        &[DEFAULT_HIDDEN],
        DEFAULT_OUTPUT_DIM,
        DEFAULT_PROXY_SEED,
    )
    .expect("static dimensions chain")
}

/// Speaker `i` has centre `c_i ~ N(0, center_std² I)`; each utterance is
/// `c_i + n` with `n ~ N(0, noise_std² I)`. Conditioning vectors are
/// standard normal per utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub prefix: String,
    pub speakers: usize,
    pub utterances: usize,
    pub dim: usize,
    pub cond_dim: usize,
    pub center_std: f64,
    pub noise_std: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            prefix: "spk".into(),
            speakers: 20,
            utterances: 10,
            dim: DEFAULT_DIM,
            cond_dim: DEFAULT_COND_DIM,
            center_std: 0.01,
            noise_std: 0.01,
        }
    }
}

pub fn synthetic_clusters(spec: &ClusterSpec, seed: u64) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = Normal::new(0.0, spec.center_std).expect("finite std");
    let noise = Normal::new(0.0, spec.noise_std).expect("finite std");
    let std_normal = Normal::new(0.0, 1.0).expect("unit std");
    let mut utts = Vec::with_capacity(spec.speakers * spec.utterances);
    for s in 0..spec.speakers {
        let c: Vec<f64> = (0..spec.dim).map(|_| center.sample(&mut rng)).collect();
        let speaker_id = format!("{}{s:03}", spec.prefix);
        for u in 0..spec.utterances {
            let vector = c.iter().map(|x| x + noise.sample(&mut rng)).collect();
            let cond = (0..spec.cond_dim).map(|_| std_normal.sample(&mut rng)).collect();
            utts.push(UtteranceEmbedding::new(&speaker_id, format!("{speaker_id}-u{u:02}"), vector).with_cond(cond));
        }
    }
    EmbeddingSet::new(spec.dim, utts).expect("generated records are consistent")
}

/// Everything one attack-scenario run needs.
#[derive(Debug, Clone)]
pub struct ScenarioFixture {
    pub train: EmbeddingSet,
    pub enroll: EmbeddingSet,
    pub trial: EmbeddingSet,
    pub pool: EmbeddingPool,
    pub trials: Vec<Trial>,
}

/// 20 evaluation speakers with 10 utterances each, split 5/5 into
/// enrollment and trial; 10 disjoint training speakers; a 40-speaker
/// external pool; all-pairs trials.
pub fn standard_scenario_fixture(seed: u64) -> Result<ScenarioFixture> {
    let eval = synthetic_clusters(&ClusterSpec::default(), derive_seed(seed, "fixture-eval"));
    let train = synthetic_clusters(
        &ClusterSpec {
            prefix: "train".into(),
            speakers: 10,
            ..ClusterSpec::default()
        },
        derive_seed(seed, "fixture-train"),
    );
    let pool_set = synthetic_clusters(
        &ClusterSpec {
            prefix: "pool".into(),
            speakers: 40,
            utterances: 4,
            ..ClusterSpec::default()
        },
        derive_seed(seed, "fixture-pool"),
    );
    let (enroll, trial) = split_utterances(&eval, 5)?;
    let ids: Vec<String> = eval.by_speaker().keys().map(|s| s.to_string()).collect();
    Ok(ScenarioFixture {
        train,
        enroll,
        trial,
        pool: EmbeddingPool::from_set(&pool_set)?,
        trials: all_pairs_trials(&ids, &ids),
    })
}

/// First `n` utterances of every speaker go to the first set, the rest to
/// the second.
pub fn split_utterances(set: &EmbeddingSet, n: usize) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let mut first = Vec::new();
    let mut second = Vec::new();
    for utts in set.by_speaker().into_values() {
        for (j, u) in utts.into_iter().enumerate() {
            if j < n {
                first.push(u.clone());
            } else {
                second.push(u.clone());
            }
        }
    }
    Ok((EmbeddingSet::new(set.dim(), first)?, EmbeddingSet::new(set.dim(), second)?))
}

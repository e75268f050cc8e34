//! Selection-based baseline anonymizer: rank an external pool by distance
//! from the source speaker and average the `k` nearest or farthest
//! candidates into a pseudo-speaker vector.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_distance, EmbeddingPool, SpeakerLevelEmbedding};
use crate::error::{Error, Result};
use crate::eval::Anonymizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Near,
    Far,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Metric::Cosine => cosine_distance(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub k: usize,
    pub direction: Direction,
    #[serde(default)]
    pub metric: Metric,
}

impl SelectionConfig {
    pub fn new(k: usize, direction: Direction) -> Self {
        Self {
            k,
            direction,
            metric: Metric::Cosine,
        }
    }
}

/// Candidates as `(index, distance)` sorted by ascending distance, ties by
/// ascending index.
pub fn rank_candidates(
    source: &SpeakerLevelEmbedding,
    pool: &EmbeddingPool,
    metric: Metric,
) -> Result<Vec<(usize, f64)>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut ranking = pool
        .candidates()
        .iter()
        .enumerate()
        .map(|(i, c)| metric.distance(&source.vector, &c.vector).map(|d| (i, d)))
        .collect::<Result<Vec<_>>>()?;
    ranking.sort_by(|a, b| match a.1.total_cmp(&b.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        ord => ord,
    });
    Ok(ranking)
}

/// Indices of the selected candidates, in ascending index order.
///
/// `Near` takes the first `k` entries of [`rank_candidates`], `Far` the last
/// `k`.
pub fn select_candidates(
    source: &SpeakerLevelEmbedding,
    pool: &EmbeddingPool,
    cfg: &SelectionConfig,
) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if cfg.k == 0 {
        return Err(Error::ZeroK);
    }
    if cfg.k > pool.pool_size() {
        return Err(Error::KTooLarge {
            k: cfg.k,
            pool_size: pool.pool_size(),
        });
    }
    let ranking = rank_candidates(source, pool, cfg.metric)?;
    let chosen = match cfg.direction {
        Direction::Near => &ranking[..cfg.k],
        Direction::Far => &ranking[ranking.len() - cfg.k..],
    };
    let mut idx: Vec<usize> = chosen.iter().map(|&(i, _)| i).collect();
    idx.sort_unstable();
    Ok(idx)
}

/// Pseudo-speaker vector: mean of the selected candidates, summed in
/// ascending candidate index order.
pub fn anonymize_baseline(
    source: &SpeakerLevelEmbedding,
    pool: &EmbeddingPool,
    cfg: &SelectionConfig,
) -> Result<Vec<f64>> {
    let idx = select_candidates(source, pool, cfg)?;
    let candidates = pool.candidates();
    let mut mean = vec![0.0; candidates[0].dim()];
    for &i in &idx {
        for (m, x) in mean.iter_mut().zip(&candidates[i].vector) {
            *m += x;
        }
    }
    let k = idx.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(mean)
}

/// A pool and a selection rule bundled as an [`Anonymizer`].
#[derive(Debug, Clone)]
pub struct BaselineAnonymizer {
    pub pool: EmbeddingPool,
    pub cfg: SelectionConfig,
}

impl BaselineAnonymizer {
    pub fn new(pool: EmbeddingPool, cfg: SelectionConfig) -> Self {
        Self { pool, cfg }
    }

    /// An independently instantiated anonymizer of the same kind, as an
    /// attacker would build it: selection runs over a seeded random half of
    /// the reshuffled pool with `k` scaled by the same ratio (at least 1).
    /// Different seeds give different pseudo-speakers for the same source.
    pub fn reinstantiate(&self, seed: u64) -> Self {
        let size = self.pool.pool_size().div_ceil(2).max(1);
        let pool = self.pool.subsample(seed, size);
        let k = (self.cfg.k * size).div_ceil(self.pool.pool_size().max(1)).clamp(1, size);
        Self {
            pool,
            cfg: SelectionConfig { k, ..self.cfg },
        }
    }
}

impl Anonymizer for BaselineAnonymizer {
    fn anonymize(&self, speaker: &SpeakerLevelEmbedding) -> Result<Vec<f64>> {
        anonymize_baseline(speaker, &self.pool, &self.cfg)
    }
}

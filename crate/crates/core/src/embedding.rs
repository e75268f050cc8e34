//! Embedding types, distances, speaker-level aggregation and the
//! line-oriented embedding file format.
//!
//! An embedding file is UTF-8 text. The first line is a header object
//! `{"dim": D}`; every following line is one record:
//!
//! ```text
//! {"dim":4}
//! {"speaker_id":"s1","utterance_id":"u1","vector":[0.1,0.2,0.3,0.4]}
//! {"speaker_id":"s1","utterance_id":"u2","vector":[0.1,0.2,0.3,0.5],"cond":[1.0]}
//! ```
//!
//! Numbers are written with shortest round-trip formatting, so a
//! save/load cycle reproduces every finite value bit for bit.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Embedding width used when nothing else is declared.
pub const DEFAULT_DIM: usize = 512;

/// Norms below this are treated as zero by the cosine functions.
pub const ZERO_NORM_THRESHOLD: f64 = 1e-12;

/// One utterance's speech representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEmbedding {
    pub speaker_id: String,
    pub utterance_id: String,
    pub vector: Vec<f64>,
    /// Opaque conditioning features fed to the synthesis proxy alongside the
    /// embedding. Empty when absent.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cond: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
}

impl UtteranceEmbedding {
    pub fn new(
        speaker_id: impl Into<String>,
        utterance_id: impl Into<String>,
        vector: Vec<f64>,
    ) -> Self {
        Self {
            speaker_id: speaker_id.into(),
            utterance_id: utterance_id.into(),
            vector,
            cond: Vec::new(),
            gender: None,
        }
    }

    pub fn with_cond(mut self, cond: Vec<f64>) -> Self {
        self.cond = cond;
        self
    }
}

/// Mean of one speaker's utterance vectors; the unit of anonymization.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerLevelEmbedding {
    pub speaker_id: String,
    pub vector: Vec<f64>,
    pub utterance_count: usize,
}

impl SpeakerLevelEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// A validated dataset: every record shares the declared dimension and
/// `(speaker_id, utterance_id)` pairs are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    utterances: Vec<UtteranceEmbedding>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, utterances: Vec<UtteranceEmbedding>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut cond_dim = None;
        for (i, u) in utterances.iter().enumerate() {
            let line = i + 2;
            if u.vector.len() != dim {
                return Err(Error::DimensionMismatchAt {
                    line,
                    expected: dim,
                    found: u.vector.len(),
                });
            }
            let expected_cond = *cond_dim.get_or_insert(u.cond.len());
            if u.cond.len() != expected_cond {
                return Err(Error::DimensionMismatchAt {
                    line,
                    expected: expected_cond,
                    found: u.cond.len(),
                });
            }
            if !all_finite(&u.vector) || !all_finite(&u.cond) {
                return Err(Error::Parse {
                    line,
                    message: "non-finite value".into(),
                });
            }
            if !seen.insert((u.speaker_id.as_str(), u.utterance_id.as_str())) {
                return Err(Error::DuplicateUtterance {
                    line,
                    speaker_id: u.speaker_id.clone(),
                    utterance_id: u.utterance_id.clone(),
                });
            }
        }
        Ok(Self { dim, utterances })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            utterances: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Width of the conditioning vectors (0 when the set carries none).
    pub fn cond_dim(&self) -> usize {
        self.utterances.first().map_or(0, |u| u.cond.len())
    }

    pub fn utterances(&self) -> &[UtteranceEmbedding] {
        &self.utterances
    }

    pub fn into_utterances(self) -> Vec<UtteranceEmbedding> {
        self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Utterances grouped by speaker, speakers in lexicographic order and
    /// utterances in file order.
    pub fn by_speaker(&self) -> BTreeMap<&str, Vec<&UtteranceEmbedding>> {
        let mut groups: BTreeMap<&str, Vec<&UtteranceEmbedding>> = BTreeMap::new();
        for u in &self.utterances {
            groups.entry(u.speaker_id.as_str()).or_default().push(u);
        }
        groups
    }

    /// One speaker-level embedding per speaker, in lexicographic id order.
    pub fn speaker_levels(&self) -> Result<Vec<SpeakerLevelEmbedding>> {
        self.by_speaker()
            .into_iter()
            .map(|(id, utts)| speaker_level_average(utts, id))
            .collect()
    }
}

/// Candidate speakers for selection-based anonymization.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPool {
    candidates: Vec<SpeakerLevelEmbedding>,
}

impl EmbeddingPool {
    pub fn new(candidates: Vec<SpeakerLevelEmbedding>) -> Result<Self> {
        let mut ids = HashSet::new();
        if let Some(first) = candidates.first() {
            let dim = first.dim();
            for c in &candidates {
                if c.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: c.dim(),
                    });
                }
                if !ids.insert(c.speaker_id.as_str()) {
                    return Err(Error::DuplicateCandidate(c.speaker_id.clone()));
                }
            }
        }
        Ok(Self { candidates })
    }

    /// Builds a pool from a dataset, averaging multiple records of the same
    /// speaker into one candidate.
    pub fn from_set(set: &EmbeddingSet) -> Result<Self> {
        Self::new(set.speaker_levels()?)
    }

    pub fn candidates(&self) -> &[SpeakerLevelEmbedding] {
        &self.candidates
    }

    /// Number of candidates (the `M` of the selection baseline).
    pub fn pool_size(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.candidates.first().map(SpeakerLevelEmbedding::dim)
    }

    /// Same candidates in a seeded random order.
    pub fn reshuffled(&self, seed: u64) -> Self {
        let mut candidates = self.candidates.clone();
        candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { candidates }
    }

    /// A seeded random subset of `size` candidates, kept in their drawn order.
    pub fn subsample(&self, seed: u64, size: usize) -> Self {
        let mut pool = self.reshuffled(seed);
        pool.candidates.truncate(size);
        pool
    }
}

/// `1 - a·b / (‖a‖‖b‖)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let sa: f64 = a.iter().map(|x| x * x).sum();
    let sb: f64 = b.iter().map(|x| x * x).sum();
    if sa.sqrt() < ZERO_NORM_THRESHOLD || sb.sqrt() < ZERO_NORM_THRESHOLD {
        return Err(Error::ZeroNorm {
            threshold: ZERO_NORM_THRESHOLD,
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // sqrt(sa * sb) keeps identical inputs at exactly 1
    Ok((dot / (sa * sb).sqrt()).clamp(-1.0, 1.0))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Coordinate-wise mean of one speaker's utterance vectors.
pub fn speaker_level_average<'a, I>(utterances: I, speaker_id: &str) -> Result<SpeakerLevelEmbedding>
where
    I: IntoIterator<Item = &'a UtteranceEmbedding>,
{
    let mut sum: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for u in utterances {
        if u.speaker_id != speaker_id {
            return Err(Error::MixedSpeakers {
                expected: speaker_id.to_string(),
                found: u.speaker_id.clone(),
            });
        }
        let acc = sum.get_or_insert_with(|| vec![0.0; u.vector.len()]);
        if acc.len() != u.vector.len() {
            return Err(Error::DimensionMismatch {
                expected: acc.len(),
                found: u.vector.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(&u.vector) {
            *a += x;
        }
        count += 1;
    }
    let mut vector = sum.ok_or(Error::EmptyInput)?;
    let n = count as f64;
    vector.iter_mut().for_each(|a| *a /= n);
    Ok(SpeakerLevelEmbedding {
        speaker_id: speaker_id.to_string(),
        vector,
        utterance_count: count,
    })
}

pub(crate) fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[derive(Deserialize)]
struct Header {
    dim: usize,
}

/// Reads an embedding file. An empty file yields an empty set of
/// [`DEFAULT_DIM`].
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(file))
}

pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_embeddings(set, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings<R: BufRead>(reader: R) -> Result<EmbeddingSet> {
    let mut dim = None;
    let mut utterances = Vec::new();
    let mut seen = HashSet::new();
    let mut cond_dim = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(dim) = dim else {
            let header: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                message: format!("bad header: {e}"),
            })?;
            dim = Some(header.dim);
            continue;
        };
        let rec: UtteranceEmbedding = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if rec.vector.len() != dim {
            return Err(Error::DimensionMismatchAt {
                line: lineno,
                expected: dim,
                found: rec.vector.len(),
            });
        }
        let expected_cond = *cond_dim.get_or_insert(rec.cond.len());
        if rec.cond.len() != expected_cond {
            return Err(Error::DimensionMismatchAt {
                line: lineno,
                expected: expected_cond,
                found: rec.cond.len(),
            });
        }
        if !seen.insert((rec.speaker_id.clone(), rec.utterance_id.clone())) {
            return Err(Error::DuplicateUtterance {
                line: lineno,
                speaker_id: rec.speaker_id,
                utterance_id: rec.utterance_id,
            });
        }
        utterances.push(rec);
    }
    Ok(EmbeddingSet {
        dim: dim.unwrap_or(DEFAULT_DIM),
        utterances,
    })
}

pub fn write_embeddings<W: Write>(set: &EmbeddingSet, w: W) -> std::io::Result<()> {
    write_embeddings_with_header(set, &serde_json::Map::new(), w)
}

/// Like [`write_embeddings`], with extra fields (provenance, config) merged
/// into the header line. Readers ignore them.
pub fn write_embeddings_with_header<W: Write>(
    set: &EmbeddingSet,
    extra: &serde_json::Map<String, serde_json::Value>,
    mut w: W,
) -> std::io::Result<()> {
    let mut header = extra.clone();
    header.insert("dim".into(), set.dim.into());
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for u in &set.utterances {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes speaker-level vectors as an embedding file with one record per
/// speaker. The utterance id of each record is the speaker id.
pub fn speaker_levels_to_set(dim: usize, speakers: &[SpeakerLevelEmbedding]) -> Result<EmbeddingSet> {
    EmbeddingSet::new(
        dim,
        speakers
            .iter()
            .map(|s| UtteranceEmbedding::new(&s.speaker_id, &s.speaker_id, s.vector.clone()))
            .collect(),
    )
}

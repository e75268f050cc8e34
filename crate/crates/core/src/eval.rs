//! Privacy evaluation: cosine trial scoring, EER, and the OO/OA/AA attack
//! scenarios.
//!
//! - `OO`: original enrollment vs original trial (reference).
//! - `OA`: original enrollment vs anonymized trial (ignorant attacker).
//! - `AA`: enrollment anonymized by an independently instantiated anonymizer
//!   vs trial anonymized by the experiment's anonymizer (lazy-informed
//!   attacker; the two sides carry different pseudo-speakers).
//!
//! Scoring is speaker-level on both sides.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_distance, EmbeddingSet, SpeakerLevelEmbedding};
use crate::error::{Error, Result};

/// Maps a speaker-level embedding to its pseudo-speaker vector.
pub trait Anonymizer {
    fn anonymize(&self, speaker: &SpeakerLevelEmbedding) -> Result<Vec<f64>>;
}

/// Returns the input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityAnonymizer;

impl Anonymizer for IdentityAnonymizer {
    fn anonymize(&self, speaker: &SpeakerLevelEmbedding) -> Result<Vec<f64>> {
        Ok(speaker.vector.clone())
    }
}

impl<A: Anonymizer + ?Sized> Anonymizer for &A {
    fn anonymize(&self, speaker: &SpeakerLevelEmbedding) -> Result<Vec<f64>> {
        (**self).anonymize(speaker)
    }
}

impl<A: Anonymizer + ?Sized> Anonymizer for Box<A> {
    fn anonymize(&self, speaker: &SpeakerLevelEmbedding) -> Result<Vec<f64>> {
        (**self).anonymize(speaker)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Genuine,
    Impostor,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Genuine => f.write_str("genuine"),
            Label::Impostor => f.write_str("impostor"),
        }
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "genuine" => Ok(Label::Genuine),
            "impostor" => Ok(Label::Impostor),
            other => Err(format!("label must be genuine or impostor, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub enrollment_speaker_id: String,
    pub trial_speaker_id: String,
    pub label: Label,
}

impl Trial {
    /// Label follows from whether the two ids match.
    pub fn new(enrollment_speaker_id: impl Into<String>, trial_speaker_id: impl Into<String>) -> Self {
        let enrollment_speaker_id = enrollment_speaker_id.into();
        let trial_speaker_id = trial_speaker_id.into();
        let label = if enrollment_speaker_id == trial_speaker_id {
            Label::Genuine
        } else {
            Label::Impostor
        };
        Self {
            enrollment_speaker_id,
            trial_speaker_id,
            label,
        }
    }
}

/// Every (enrollment, trial) speaker pair.
pub fn all_pairs_trials<S: AsRef<str>>(enrollment_ids: &[S], trial_ids: &[S]) -> Vec<Trial> {
    enrollment_ids
        .iter()
        .flat_map(|e| trial_ids.iter().map(move |t| Trial::new(e.as_ref(), t.as_ref())))
        .collect()
}

/// Keeps trials whose enrollment speaker carries `gender` in `set`.
pub fn filter_trials_by_gender(trials: &[Trial], set: &EmbeddingSet, gender: &str) -> Vec<Trial> {
    let genders: BTreeMap<&str, &str> = set
        .utterances()
        .iter()
        .filter_map(|u| u.gender.as_deref().map(|g| (u.speaker_id.as_str(), g)))
        .collect();
    trials
        .iter()
        .filter(|t| genders.get(t.enrollment_speaker_id.as_str()) == Some(&gender))
        .cloned()
        .collect()
}

pub fn load_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trials(BufReader::new(file))
}

/// Parses `enrollment<TAB>trial<TAB>genuine|impostor` lines.
pub fn read_trials<R: BufRead>(reader: R) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let parse_err = |message: String| Error::Parse { line: lineno, message };
        let line = line.map_err(|e| parse_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [e, t, label] = fields[..] else {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        if e.is_empty() || t.is_empty() {
            return Err(parse_err("empty speaker id".into()));
        }
        let label: Label = label.trim_end().parse().map_err(parse_err)?;
        let trial = Trial::new(e, t);
        if trial.label != label {
            return Err(parse_err(format!("label {label} contradicts speaker ids {e:?} / {t:?}")));
        }
        trials.push(trial);
    }
    Ok(trials)
}

pub fn write_trials<W: Write>(trials: &[Trial], mut w: W) -> std::io::Result<()> {
    for t in trials {
        writeln!(w, "{}\t{}\t{}", t.enrollment_speaker_id, t.trial_speaker_id, t.label)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Self {
        Self { genuine, impostor }
    }
}

/// Cosine similarity, `1 - cosine_distance`; higher means "same speaker".
pub fn score_trial(enrollment: &[f64], trial: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_distance(enrollment, trial)?)
}

/// Equal error rate and the threshold at which it occurs.
///
/// Thresholds sweep the sorted union of all scores plus one point just above
/// the maximum. At threshold `t`, `FAR(t)` is the fraction of impostor
/// scores `≥ t` and `FRR(t)` the fraction of genuine scores `< t`. The first
/// threshold where `FAR = FRR` is returned directly; otherwise the crossing is
/// linearly interpolated between the two thresholds bracketing the sign
/// change of `FAR - FRR`.
pub fn compute_eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    if scores.genuine.is_empty() || scores.impostor.is_empty() {
        return Err(Error::EmptyScores);
    }
    if scores.genuine.iter().chain(&scores.impostor).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let mut genuine = scores.genuine.clone();
    let mut impostor = scores.impostor.clone();
    genuine.sort_by(f64::total_cmp);
    impostor.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = genuine.iter().chain(&impostor).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(thresholds.last().expect("nonempty").next_up());

    let ng = genuine.len();
    let ni = impostor.len();
    // genuine[..g_below] < t, impostor[..i_below] < t
    let (mut g_below, mut i_below) = (0usize, 0usize);
    let mut prev: Option<(f64, usize, usize)> = None;
    for &t in &thresholds {
        while g_below < ng && genuine[g_below] < t {
            g_below += 1;
        }
        while i_below < ni && impostor[i_below] < t {
            i_below += 1;
        }
        let far_count = ni - i_below;
        let frr_count = g_below;
        // sign of FAR - FRR in exact integer arithmetic
        let lhs = far_count as u128 * ng as u128;
        let rhs = frr_count as u128 * ni as u128;
        if lhs == rhs {
            return Ok((far_count as f64 / ni as f64, t));
        }
        if lhs < rhs {
            let (t1, far1, frr1) = prev.expect("FAR > FRR at the lowest threshold");
            let (far1, frr1) = (far1 as f64 / ni as f64, frr1 as f64 / ng as f64);
            let (far2, frr2) = (far_count as f64 / ni as f64, frr_count as f64 / ng as f64);
            return Ok(interpolate_crossing((t1, far1, frr1), (t, far2, frr2)));
        }
        prev = Some((t, far_count, frr_count));
    }
    unreachable!("FAR = 0 < FRR = 1 above the maximum score")
}

/// Point where the segment between two `(threshold, FAR, FRR)` operating
/// points crosses `FAR = FRR`. Requires `FAR > FRR` at the first and
/// `FAR < FRR` at the second.
pub fn interpolate_crossing(a: (f64, f64, f64), b: (f64, f64, f64)) -> (f64, f64) {
    let d1 = a.1 - a.2;
    let d2 = b.1 - b.2;
    let alpha = d1 / (d1 - d2);
    (a.1 + alpha * (b.1 - a.1), a.0 + alpha * (b.0 - a.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    OO,
    OA,
    AA,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::OO, Scenario::OA, Scenario::AA];
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::OO => "OO",
            Scenario::OA => "OA",
            Scenario::AA => "AA",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub eer: f64,
    pub threshold: f64,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

/// Scores every trial under `scenario` and returns its EER.
///
/// `anonymizer` is the experiment's anonymizer, applied to trial speakers in
/// OA and AA. `attacker` is the independently instantiated anonymizer the
/// lazy-informed attacker applies to enrollment speakers in AA; it is unused
/// for OO and OA.
pub fn run_scenario(
    scenario: Scenario,
    enroll: &EmbeddingSet,
    trial: &EmbeddingSet,
    anonymizer: &dyn Anonymizer,
    attacker: &dyn Anonymizer,
    trials: &[Trial],
) -> Result<ScenarioResult> {
    let enroll_levels = speaker_map(enroll)?;
    let trial_levels = speaker_map(trial)?;

    let mut enroll_vecs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut trial_vecs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for t in trials {
        let e_id = t.enrollment_speaker_id.as_str();
        if !enroll_vecs.contains_key(e_id) {
            let spk = enroll_levels
                .get(e_id)
                .ok_or_else(|| Error::UnknownSpeaker(e_id.to_string()))?;
            let v = match scenario {
                Scenario::OO | Scenario::OA => spk.vector.clone(),
                Scenario::AA => attacker.anonymize(spk)?,
            };
            enroll_vecs.insert(e_id, v);
        }
        let t_id = t.trial_speaker_id.as_str();
        if !trial_vecs.contains_key(t_id) {
            let spk = trial_levels
                .get(t_id)
                .ok_or_else(|| Error::UnknownSpeaker(t_id.to_string()))?;
            let v = match scenario {
                Scenario::OO => spk.vector.clone(),
                Scenario::OA | Scenario::AA => anonymizer.anonymize(spk)?,
            };
            trial_vecs.insert(t_id, v);
        }
    }

    let mut scores = ScoreSet::default();
    for t in trials {
        let s = score_trial(
            &enroll_vecs[t.enrollment_speaker_id.as_str()],
            &trial_vecs[t.trial_speaker_id.as_str()],
        )?;
        match t.label {
            Label::Genuine => scores.genuine.push(s),
            Label::Impostor => scores.impostor.push(s),
        }
    }
    let (eer, threshold) = compute_eer(&scores)?;
    Ok(ScenarioResult {
        scenario,
        eer,
        threshold,
        n_genuine: scores.genuine.len(),
        n_impostor: scores.impostor.len(),
    })
}

fn speaker_map(set: &EmbeddingSet) -> Result<BTreeMap<String, SpeakerLevelEmbedding>> {
    Ok(set
        .speaker_levels()?
        .into_iter()
        .map(|s| (s.speaker_id.clone(), s))
        .collect())
}

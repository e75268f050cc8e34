//! Constrained additive reprogramming of speaker embeddings.
//!
//! A single trainable vector `w` and a binary mask `m` define the
//! perturbation `θ = w ⊙ m`; an embedding `x` is reprogrammed to
//! `x' = x + θ`. Training minimizes
//!
//! ```text
//! J(w) = mean_r L(f(x_r + θ, cond_r), z_r)  -  λ · mae(θ)
//! subject to mae(θ) = (1/D) Σ_d |θ_d| ≤ ε
//! ```
//!
//! with the frozen proxy `f` and its MSE loss `L`. The first term keeps the
//! reprogrammed embedding a valid synthesis input, the second pushes it away
//! from the original, and the MAE budget caps how far it may move. The
//! optimizer is projected gradient descent; the feasible set is an L1 ball of
//! radius `ε·D` over the masked coordinates, so every iterate satisfies the
//! budget by construction.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSet, SpeakerLevelEmbedding};
use crate::error::{Error, Result};
use crate::eval::Anonymizer;
use crate::proxy::{forward, loss_and_grad, ProxyModel, ProxyTarget};
use crate::seed::derive_seed;

/// Default MAE budget.
pub const DEFAULT_EPSILON: f64 = 0.1;

/// Default weight of the distance term.
pub const DEFAULT_LAMBDA_DIST: f64 = 1.0;

/// Half-width of the default uniform initialization of `w`. A nonzero start
/// makes the optimizer seed matter, so two runs with different seeds land on
/// different perturbations.
pub const DEFAULT_INIT_SCALE: f64 = 0.01;

/// Slack allowed on the MAE budget after projection (floating-point rounding).
pub const FEASIBILITY_SLACK: f64 = 1e-9;

/// Trainable perturbation `w`, its mask and the MAE budget.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprogramParams {
    w: Vec<f64>,
    mask: Vec<bool>,
    epsilon: f64,
}

impl ReprogramParams {
    pub fn new(w: Vec<f64>, mask: Vec<bool>, epsilon: f64) -> Result<Self> {
        if w.len() != mask.len() {
            return Err(Error::DimensionMismatch {
                expected: mask.len(),
                found: w.len(),
            });
        }
        if w.is_empty() {
            return Err(Error::InvalidParams("zero-dimensional parameters".into()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidParams("mask selects no coordinate".into()));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParams(format!("epsilon must be positive, got {epsilon}")));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParams("non-finite weight".into()));
        }
        Ok(Self { w, mask, epsilon })
    }

    /// `w = 0` with an all-ones mask.
    pub fn zeros(dim: usize, epsilon: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![true; dim], epsilon)
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Number of scalars the optimizer may change.
    pub fn trainable_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.mask)
            .map(|(&w, &m)| if m { w } else { 0.0 })
            .collect()
    }

    fn with_w(&self, w: Vec<f64>) -> Self {
        Self {
            w,
            mask: self.mask.clone(),
            epsilon: self.epsilon,
        }
    }
}

/// `x + w ⊙ mask`.
pub fn apply(x: &[f64], params: &ReprogramParams) -> Result<Vec<f64>> {
    if x.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            found: x.len(),
        });
    }
    Ok(x.iter()
        .zip(params.w.iter().zip(&params.mask))
        .map(|(&x, (&w, &m))| if m { x + w } else { x })
        .collect())
}

/// `(1/D) Σ_d |w_d · mask_d|`.
pub fn mae_masked(params: &ReprogramParams) -> f64 {
    masked_l1(params) / params.dim() as f64
}

fn masked_l1(params: &ReprogramParams) -> f64 {
    params
        .w
        .iter()
        .zip(&params.mask)
        .filter(|(_, &m)| m)
        .map(|(w, _)| w.abs())
        .sum()
}

/// Euclidean projection onto `{mae_masked ≤ ε}`. Masked-out coordinates are
/// left as they are; a feasible input is returned unchanged.
pub fn project(params: &ReprogramParams) -> ReprogramParams {
    if mae_masked(params) <= params.epsilon {
        return params.clone();
    }
    let radius = params.epsilon * params.dim() as f64;
    let active: Vec<f64> = params
        .w
        .iter()
        .zip(&params.mask)
        .filter(|(_, &m)| m)
        .map(|(&w, _)| w)
        .collect();
    let projected = project_l1_ball(&active, radius);
    let mut w = params.w.clone();
    let mut it = projected.into_iter();
    for (wd, &m) in w.iter_mut().zip(&params.mask) {
        if m {
            *wd = it.next().expect("one value per active coordinate");
        }
    }
    params.with_w(w)
}

/// Sort-based projection onto `{v : ‖v‖₁ ≤ radius}`: soft-threshold every
/// coordinate by the smallest `τ ≥ 0` that makes the result feasible.
pub fn project_l1_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= radius {
        return v.to_vec();
    }
    if radius <= 0.0 {
        return vec![0.0; v.len()];
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - radius) / (j + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        } else {
            break;
        }
    }
    v.iter().map(|&x| x.signum() * (x.abs() - tau).max(0.0)).collect()
}

/// One training example: a speaker-level embedding, the conditioning
/// features of one utterance and that utterance's synthesis target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub speaker_level: SpeakerLevelEmbedding,
    pub cond: Vec<f64>,
    pub target: ProxyTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    records: Vec<TrainingRecord>,
}

impl TrainingSet {
    pub fn new(records: Vec<TrainingRecord>) -> Result<Self> {
        let first = records.first().ok_or(Error::EmptyTrainingSet)?;
        let (dim, cond_dim, out_dim) = (first.speaker_level.dim(), first.cond.len(), first.target.target.len());
        for r in &records {
            for (expected, found) in [
                (dim, r.speaker_level.dim()),
                (cond_dim, r.cond.len()),
                (out_dim, r.target.target.len()),
            ] {
                if expected != found {
                    return Err(Error::DimensionMismatch { expected, found });
                }
            }
        }
        Ok(Self { records })
    }

    /// One record per utterance: the speaker's mean embedding paired with the
    /// utterance's conditioning, targeting the proxy output of the original
    /// utterance embedding `f(x_ij, cond_ij)`.
    pub fn from_embeddings(set: &EmbeddingSet, model: &ProxyModel) -> Result<Self> {
        let mut records = Vec::with_capacity(set.len());
        for (id, utts) in set.by_speaker() {
            let level = crate::embedding::speaker_level_average(utts.iter().copied(), id)?;
            for u in utts {
                let target = ProxyTarget::new(forward(model, &u.vector, &u.cond)?);
                records.push(TrainingRecord {
                    speaker_level: level.clone(),
                    cond: u.cond.clone(),
                    target,
                });
            }
        }
        Self::new(records)
    }

    pub fn records(&self) -> &[TrainingRecord] {
        &self.records
    }

    pub fn dim(&self) -> usize {
        self.records[0].speaker_level.dim()
    }

    /// Records of one speaker, in original order.
    pub fn for_speaker(&self, speaker_id: &str) -> Option<Self> {
        let records: Vec<_> = self
            .records
            .iter()
            .filter(|r| r.speaker_level.speaker_id == speaker_id)
            .cloned()
            .collect();
        (!records.is_empty()).then_some(Self { records })
    }

    pub fn speaker_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.speaker_level.speaker_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub synthesis_loss: f64,
    pub mae: f64,
    /// Gradient with respect to `w`; zero on masked-out coordinates.
    pub grad: Vec<f64>,
}

/// Objective value and exact gradient with respect to `w`. The subgradient
/// of `|w_d|` at zero is taken as zero.
pub fn objective(
    params: &ReprogramParams,
    training: &TrainingSet,
    model: &ProxyModel,
    lambda_dist: f64,
) -> Result<ObjectiveValue> {
    if training.records.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let d = params.dim();
    if training.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: training.dim(),
        });
    }
    let mut total_loss = 0.0;
    let mut grad = vec![0.0; d];
    for r in &training.records {
        let x_prime = apply(&r.speaker_level.vector, params)?;
        let (l, g) = loss_and_grad(model, &x_prime, &r.cond, &r.target)?;
        total_loss += l;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    let n = training.records.len() as f64;
    let synthesis_loss = total_loss / n;
    let mae = mae_masked(params);
    let dist_scale = lambda_dist / d as f64;
    for ((gd, &m), &w) in grad.iter_mut().zip(&params.mask).zip(&params.w) {
        *gd = if m { *gd / n - dist_scale * sign(w) } else { 0.0 };
    }
    Ok(ObjectiveValue {
        value: synthesis_loss - lambda_dist * mae,
        synthesis_loss,
        mae,
        grad,
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Zeros,
    SeededUniform { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Stop once an iteration improves the objective by less than this.
    pub tol: f64,
    pub init: Init,
    /// Halve the step until the objective does not increase.
    pub backtracking: bool,
    pub max_backtracks: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_size: 4.0,
            max_iters: 200,
            seed: 0,
            tol: 1e-12,
            init: Init::SeededUniform { scale: DEFAULT_INIT_SCALE },
            backtracking: true,
            max_backtracks: 30,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!("step_size must be positive, got {}", self.step_size)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::InvalidConfig(format!("tol must be nonnegative, got {}", self.tol)));
        }
        if let Init::SeededUniform { scale } = self.init {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::InvalidConfig(format!("init scale must be positive, got {scale}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub objective: f64,
    pub synthesis_loss: f64,
    /// `λ · mae`, the amount subtracted from the synthesis loss.
    pub distance_term: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizationTrace {
    pub entries: Vec<TraceEntry>,
}

impl OptimizationTrace {
    pub fn iters_run(&self) -> usize {
        self.entries.len()
    }

    pub fn objectives(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.objective)
    }

    /// Tab-separated, one line per iteration after a header line.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration\tobjective\tsynthesis_loss\tdistance_term\tmae")?;
        for e in &self.entries {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                e.iteration, e.objective, e.synthesis_loss, e.distance_term, e.mae
            )?;
        }
        Ok(())
    }
}

/// Projected gradient descent with an all-ones mask.
pub fn optimize(
    training: &TrainingSet,
    model: &ProxyModel,
    cfg: &OptimizerConfig,
    epsilon: f64,
    lambda_dist: f64,
) -> Result<(ReprogramParams, OptimizationTrace)> {
    let dim = training.records.first().ok_or(Error::EmptyTrainingSet)?.speaker_level.dim();
    optimize_masked(training, model, cfg, vec![true; dim], epsilon, lambda_dist)
}

pub fn optimize_masked(
    training: &TrainingSet,
    model: &ProxyModel,
    cfg: &OptimizerConfig,
    mask: Vec<bool>,
    epsilon: f64,
    lambda_dist: f64,
) -> Result<(ReprogramParams, OptimizationTrace)> {
    cfg.validate()?;
    if !lambda_dist.is_finite() {
        return Err(Error::InvalidConfig(format!("lambda_dist must be finite, got {lambda_dist}")));
    }
    let dim = mask.len();
    if training.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: training.dim(),
        });
    }
    let w0 = match cfg.init {
        Init::Zeros => vec![0.0; dim],
        Init::SeededUniform { scale } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let dist = Uniform::new_inclusive(-scale, scale).expect("validated scale");
            mask.iter()
                .map(|&m| {
                    let v = dist.sample(&mut rng);
                    if m {
                        v
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    let mut params = project(&ReprogramParams::new(w0, mask, epsilon)?);
    let mut current = objective(&params, training, model, lambda_dist)?;
    if !current.value.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: 0 });
    }

    let mut trace = OptimizationTrace::default();
    for iteration in 1..=cfg.max_iters {
        let attempts = if cfg.backtracking { cfg.max_backtracks + 1 } else { 1 };
        let mut step = cfg.step_size;
        let mut accepted = None;
        for _ in 0..attempts {
            let w: Vec<f64> = params
                .w
                .iter()
                .zip(&current.grad)
                .map(|(w, g)| w - step * g)
                .collect();
            let candidate = project(&params.with_w(w));
            let eval = objective(&candidate, training, model, lambda_dist)?;
            if !cfg.backtracking {
                if !eval.value.is_finite() {
                    return Err(Error::NonFiniteObjective { iteration });
                }
                accepted = Some((candidate, eval));
                break;
            }
            if eval.value <= current.value {
                accepted = Some((candidate, eval));
                break;
            }
            step *= 0.5;
        }
        let improvement = match accepted {
            Some((candidate, eval)) => {
                let improvement = current.value - eval.value;
                params = candidate;
                current = eval;
                improvement
            }
            None => 0.0,
        };
        trace.entries.push(TraceEntry {
            iteration,
            objective: current.value,
            synthesis_loss: current.synthesis_loss,
            distance_term: lambda_dist * current.mae,
            mae: current.mae,
        });
        if improvement < cfg.tol {
            break;
        }
    }
    Ok((params, trace))
}

/// Trains one θ per speaker on that speaker's records only. Each speaker's
/// optimizer seed is derived from `cfg.seed` and the speaker id.
pub fn optimize_per_speaker(
    training: &TrainingSet,
    model: &ProxyModel,
    cfg: &OptimizerConfig,
    mask: &[bool],
    epsilon: f64,
    lambda_dist: f64,
) -> Result<BTreeMap<String, (ReprogramParams, OptimizationTrace)>> {
    let mut out = BTreeMap::new();
    for id in training.speaker_ids() {
        let subset = training.for_speaker(&id).expect("id taken from the set");
        let speaker_cfg = OptimizerConfig {
            seed: derive_seed(cfg.seed, &format!("speaker:{id}")),
            ..cfg.clone()
        };
        let trained = optimize_masked(&subset, model, &speaker_cfg, mask.to_vec(), epsilon, lambda_dist)?;
        out.insert(id, trained);
    }
    Ok(out)
}

/// Pseudo-speaker vector for one speaker under trained parameters.
pub fn anonymize_reprogram(speaker: &SpeakerLevelEmbedding, params: &ReprogramParams) -> Result<Vec<f64>> {
    apply(&speaker.vector, params)
}

/// Trained parameters as an [`Anonymizer`]: either one global θ or one θ per
/// known speaker.
#[derive(Debug, Clone, PartialEq)]
pub enum ReprogramAnonymizer {
    Global(ReprogramParams),
    PerSpeaker(BTreeMap<String, ReprogramParams>),
}

impl Anonymizer for ReprogramAnonymizer {
    fn anonymize(&self, speaker: &SpeakerLevelEmbedding) -> Result<Vec<f64>> {
        match self {
            ReprogramAnonymizer::Global(p) => anonymize_reprogram(speaker, p),
            ReprogramAnonymizer::PerSpeaker(map) => {
                let p = map
                    .get(&speaker.speaker_id)
                    .ok_or_else(|| Error::UnknownSpeaker(speaker.speaker_id.clone()))?;
                anonymize_reprogram(speaker, p)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTheta {
    pub speaker_id: String,
    pub w: Vec<f64>,
    pub iters_run: usize,
}

/// On-disk form of trained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaCheckpoint {
    pub dim: usize,
    pub epsilon: f64,
    pub mask: Vec<u8>,
    pub w: Vec<f64>,
    pub seed: u64,
    pub iters_run: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speakers: Option<Vec<SpeakerTheta>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl ThetaCheckpoint {
    pub fn global(params: &ReprogramParams, seed: u64, iters_run: usize) -> Self {
        Self {
            dim: params.dim(),
            epsilon: params.epsilon,
            mask: params.mask.iter().map(|&m| u8::from(m)).collect(),
            w: params.w.clone(),
            seed,
            iters_run,
            speakers: None,
            config: None,
        }
    }

    fn mask_bools(&self) -> Result<Vec<bool>> {
        self.mask
            .iter()
            .map(|&m| match m {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::InvalidParams(format!("mask entry {other} is not 0 or 1"))),
            })
            .collect()
    }

    pub fn params(&self) -> Result<ReprogramParams> {
        if self.w.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: self.w.len(),
            });
        }
        ReprogramParams::new(self.w.clone(), self.mask_bools()?, self.epsilon)
    }

    pub fn anonymizer(&self) -> Result<ReprogramAnonymizer> {
        match &self.speakers {
            None => Ok(ReprogramAnonymizer::Global(self.params()?)),
            Some(list) => {
                let mask = self.mask_bools()?;
                list.iter()
                    .map(|s| {
                        ReprogramParams::new(s.w.clone(), mask.clone(), self.epsilon)
                            .map(|p| (s.speaker_id.clone(), p))
                    })
                    .collect::<Result<_>>()
                    .map(ReprogramAnonymizer::PerSpeaker)
            }
        }
    }
}

pub fn save_checkpoint(ckpt: &ThetaCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(ckpt).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ThetaCheckpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anonvec_core::embedding::{speaker_levels_to_set, write_embeddings_with_header, EmbeddingPool, EmbeddingSet};
use anonvec_core::eval::{filter_trials_by_gender, load_trials, write_trials, Trial};
use anonvec_core::fixtures::{default_proxy, standard_scenario_fixture};
use anonvec_core::proxy::save_proxy;
use anonvec_core::reprogram::{
    load_checkpoint, optimize_masked, optimize_per_speaker, save_checkpoint, OptimizationTrace, SpeakerTheta,
    ThetaCheckpoint, TrainingSet,
};
use anonvec_core::seed::{derive_seed, AA_ENROLLMENT, POOL_SHUFFLE, THETA_INIT};
use anonvec_core::{
    load_embeddings, load_proxy, run_scenario, Anonymizer, BaselineAnonymizer, Direction, IdentityAnonymizer,
    ProxyModel, Scenario, SelectionConfig,
};
use log::{debug, info};
use serde_json::{Map, Value};

use crate::config::{AnonymizerKind, ExperimentConfig, ThetaScope};
use crate::error::CliError;
use crate::report::{Report, ReportRow};

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("config key `{key}` is required for this command")))
}

fn read_set(path: &Path, what: &str) -> Result<EmbeddingSet, CliError> {
    let set = load_embeddings(path).map_err(CliError::core(format!("{what} embeddings {}", path.display())))?;
    debug!("loaded {} utterances of dim {} from {}", set.len(), set.dim(), path.display());
    Ok(set)
}

fn read_proxy(cfg: &ExperimentConfig) -> Result<ProxyModel, CliError> {
    let path = required(&cfg.proxy, "proxy")?;
    load_proxy(path).map_err(CliError::core("proxy model"))
}

fn read_trials(cfg: &ExperimentConfig, enroll: &EmbeddingSet) -> Result<Vec<Trial>, CliError> {
    let path = required(&cfg.trials, "trials")?;
    let trials = load_trials(path).map_err(CliError::core(format!("trial list {}", path.display())))?;
    Ok(match &cfg.gender {
        Some(g) => filter_trials_by_gender(&trials, enroll, g),
        None => trials,
    })
}

fn ensure_out(cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::Internal(format!("{}: {e}", cfg.out.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

fn provenance(cfg: &ExperimentConfig) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("seed".into(), cfg.seed.into());
    m.insert("config".into(), cfg.echo());
    m
}

/// Trains θ on the configured training set. `seed_name` selects the sub-seed,
/// so the AA attacker can train an independent instance.
fn train(cfg: &ExperimentConfig, seed_name: &str) -> Result<(ThetaCheckpoint, String), CliError> {
    let train = read_set(required(&cfg.train, "train")?, "training")?;
    let model = read_proxy(cfg)?;
    let ts = TrainingSet::from_embeddings(&train, &model).map_err(CliError::core("building training set"))?;
    let opt = cfg.optimizer.with_seed(derive_seed(cfg.seed, seed_name));
    let mask = vec![true; ts.dim()];
    info!(
        "training theta ({:?} scope, dim {}, {} records, seed {})",
        cfg.theta_scope,
        ts.dim(),
        ts.records().len(),
        opt.seed
    );
    let trained = match cfg.theta_scope {
        ThetaScope::Global => {
            let (params, trace) = optimize_masked(&ts, &model, &opt, mask, cfg.epsilon, cfg.lambda_dist)
                .map_err(CliError::core("training"))?;
            let mut ckpt = ThetaCheckpoint::global(&params, cfg.seed, trace.iters_run());
            ckpt.config = Some(cfg.echo());
            (ckpt, trace_tsv(&[(None, &trace)]))
        }
        ThetaScope::PerSpeaker => {
            let per = optimize_per_speaker(&ts, &model, &opt, &mask, cfg.epsilon, cfg.lambda_dist)
                .map_err(CliError::core("training"))?;
            let dim = ts.dim();
            let mut ckpt = ThetaCheckpoint::global(
                &anonvec_core::ReprogramParams::new(vec![0.0; dim], vec![true; dim], cfg.epsilon)
                    .map_err(CliError::core("training"))?,
                cfg.seed,
                per.values().map(|(_, t)| t.iters_run()).max().unwrap_or(0),
            );
            ckpt.speakers = Some(
                per.iter()
                    .map(|(id, (p, t))| SpeakerTheta {
                        speaker_id: id.clone(),
                        w: p.w().to_vec(),
                        iters_run: t.iters_run(),
                    })
                    .collect(),
            );
            ckpt.config = Some(cfg.echo());
            let traces: Vec<(Option<&str>, &OptimizationTrace)> =
                per.iter().map(|(id, (_, t))| (Some(id.as_str()), t)).collect();
            (ckpt, trace_tsv(&traces))
        }
    };
    info!("training done after {} iterations", trained.0.iters_run);
    Ok(trained)
}

fn trace_tsv(traces: &[(Option<&str>, &OptimizationTrace)]) -> String {
    let per_speaker = traces.iter().any(|(id, _)| id.is_some());
    let mut buf = Vec::new();
    if per_speaker {
        writeln!(buf, "speaker_id\titeration\tobjective\tsynthesis_loss\tdistance_term\tmae").unwrap();
        for (id, t) in traces {
            for e in &t.entries {
                writeln!(
                    buf,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    id.unwrap_or(""),
                    e.iteration,
                    e.objective,
                    e.synthesis_loss,
                    e.distance_term,
                    e.mae
                )
                .unwrap();
            }
        }
    } else {
        traces[0].1.write_tsv(&mut buf).unwrap();
    }
    String::from_utf8(buf).expect("ascii output")
}

pub fn train_theta(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (ckpt, trace) = train(cfg, THETA_INIT)?;
    ensure_out(cfg)?;
    let ckpt_path = cfg.checkpoint_path();
    if let Some(parent) = ckpt_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Internal(format!("{}: {e}", parent.display())))?;
    }
    save_checkpoint(&ckpt, &ckpt_path).map_err(|e| CliError::Internal(e.to_string()))?;
    let header = format!(
        "# seed {} config {}\n",
        cfg.seed,
        serde_json::to_string(&cfg.echo()).expect("config serializes")
    );
    let trace_path = cfg.out.join("trace.tsv");
    write_file(&trace_path, format!("{header}{trace}").as_bytes())?;
    info!("wrote {} and {}", ckpt_path.display(), trace_path.display());
    Ok(())
}

fn baseline(cfg: &ExperimentConfig, direction: Direction) -> Result<BaselineAnonymizer, CliError> {
    let path = required(&cfg.pool, "pool")?;
    let pool_set = read_set(path, "pool")?;
    let pool = EmbeddingPool::from_set(&pool_set).map_err(CliError::core(format!("pool {}", path.display())))?;
    if pool.is_empty() {
        return Err(CliError::Input(format!("pool {} has no speakers", path.display())));
    }
    let k = cfg.k.unwrap_or((pool.pool_size() / 2).max(1));
    if k > pool.pool_size() {
        return Err(CliError::Usage(format!("k = {k} exceeds pool size {}", pool.pool_size())));
    }
    Ok(BaselineAnonymizer::new(pool, SelectionConfig::new(k, direction)))
}

fn checkpoint_anonymizer(cfg: &ExperimentConfig) -> Result<Box<dyn Anonymizer>, CliError> {
    let path = cfg.checkpoint_path();
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path));
    }
    let ckpt = load_checkpoint(&path).map_err(CliError::core("checkpoint"))?;
    let anon = ckpt.anonymizer().map_err(CliError::core(format!("checkpoint {}", path.display())))?;
    Ok(Box::new(anon))
}

type DynAnonymizer = Box<dyn Anonymizer>;

/// The experiment's anonymizer.
fn anonymizer(cfg: &ExperimentConfig) -> Result<DynAnonymizer, CliError> {
    Ok(match cfg.anonymizer {
        AnonymizerKind::Identity => Box::new(IdentityAnonymizer),
        AnonymizerKind::BaselineNear => Box::new(baseline(cfg, Direction::Near)?),
        AnonymizerKind::BaselineFar => Box::new(baseline(cfg, Direction::Far)?),
        AnonymizerKind::Reprogram => checkpoint_anonymizer(cfg)?,
    })
}

/// The experiment's anonymizer and the independently seeded instance the
/// lazy-informed attacker applies to enrollment data.
fn anonymizer_pair(cfg: &ExperimentConfig) -> Result<(DynAnonymizer, DynAnonymizer), CliError> {
    Ok(match cfg.anonymizer {
        AnonymizerKind::Identity => (Box::new(IdentityAnonymizer), Box::new(IdentityAnonymizer)),
        AnonymizerKind::BaselineNear | AnonymizerKind::BaselineFar => {
            let dir = if cfg.anonymizer == AnonymizerKind::BaselineNear {
                Direction::Near
            } else {
                Direction::Far
            };
            let base = baseline(cfg, dir)?;
            let attacker = base.reinstantiate(derive_seed(cfg.seed, POOL_SHUFFLE));
            (Box::new(base), Box::new(attacker))
        }
        AnonymizerKind::Reprogram => {
            let own = checkpoint_anonymizer(cfg)?;
            let (ckpt, _) = train(cfg, AA_ENROLLMENT)?;
            let attacker = ckpt.anonymizer().map_err(CliError::core("attacker checkpoint"))?;
            (own, Box::new(attacker))
        }
    })
}

pub fn anonymize(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let input_path = cfg
        .input
        .as_deref()
        .or(cfg.trial.as_deref())
        .ok_or_else(|| CliError::Usage("config key `input` (or `trial`) is required for anonymize".into()))?;
    let input = read_set(input_path, "input")?;
    let anon = anonymizer(cfg)?;
    let levels = input
        .speaker_levels()
        .map_err(CliError::core(format!("input {}", input_path.display())))?;
    let mut out = Vec::with_capacity(levels.len());
    for mut spk in levels {
        spk.vector = anon
            .anonymize(&spk)
            .map_err(CliError::core(format!("anonymizing speaker {:?}", spk.speaker_id)))?;
        out.push(spk);
    }
    let set = speaker_levels_to_set(input.dim(), &out).map_err(CliError::core("anonymized output"))?;
    ensure_out(cfg)?;
    let mut header = provenance(cfg);
    header.insert("anonymizer".into(), cfg.anonymizer.to_string().into());
    let mut buf = Vec::new();
    write_embeddings_with_header(&set, &header, &mut buf).expect("writing to memory");
    let path = cfg.out.join("anonymized.jsonl");
    write_file(&path, &buf)?;
    info!("wrote {} speakers to {}", out.len(), path.display());
    Ok(())
}

pub fn evaluate(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let enroll = read_set(required(&cfg.enroll, "enroll")?, "enrollment")?;
    let trial = read_set(required(&cfg.trial, "trial")?, "trial")?;
    let trials = read_trials(cfg, &enroll)?;
    let (anon, attacker) = anonymizer_pair(cfg)?;
    let mut results = Vec::new();
    for scenario in Scenario::ALL {
        let r = run_scenario(scenario, &enroll, &trial, anon.as_ref(), attacker.as_ref(), &trials)
            .map_err(CliError::core(format!("scenario {scenario}")))?;
        info!("{scenario}: EER {:.6}", r.eer);
        results.push(ReportRow::from(&r));
    }
    let report = Report {
        anonymizer: cfg.anonymizer,
        seed: cfg.seed,
        results,
        config: cfg.echo(),
    };
    ensure_out(cfg)?;
    write_file(&cfg.out.join("report.json"), report.to_json().as_bytes())?;
    write_file(&cfg.out.join("report.txt"), report.to_text().as_bytes())?;
    Ok(report)
}

pub fn read_report(path: &Path) -> Result<Report, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: not a report: {e}", path.display())))
}

/// Writes the seeded synthetic scenario (train/enroll/trial/pool embeddings,
/// trial list, default proxy) and a config pointing at it.
pub fn synth(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let fx = standard_scenario_fixture(cfg.seed).map_err(CliError::core("generating fixture"))?;
    ensure_out(cfg)?;
    let out = &cfg.out;
    for (name, set) in [
        ("train.jsonl", &fx.train),
        ("enroll.jsonl", &fx.enroll),
        ("trial.jsonl", &fx.trial),
    ] {
        let mut buf = Vec::new();
        write_embeddings_with_header(set, &provenance(cfg), &mut buf).expect("writing to memory");
        write_file(&out.join(name), &buf)?;
    }
    let pool_set = speaker_levels_to_set(fx.train.dim(), fx.pool.candidates()).map_err(CliError::core("pool"))?;
    let mut buf = Vec::new();
    write_embeddings_with_header(&pool_set, &provenance(cfg), &mut buf).expect("writing to memory");
    write_file(&out.join("pool.jsonl"), &buf)?;
    let mut buf = Vec::new();
    write_trials(&fx.trials, &mut buf).expect("writing to memory");
    write_file(&out.join("trials.tsv"), &buf)?;
    save_proxy(&default_proxy(), out.join("proxy.json")).map_err(|e| CliError::Internal(e.to_string()))?;

    let experiment = ExperimentConfig {
        train: Some(out.join("train.jsonl")),
        enroll: Some(out.join("enroll.jsonl")),
        trial: Some(out.join("trial.jsonl")),
        pool: Some(out.join("pool.jsonl")),
        trials: Some(out.join("trials.tsv")),
        proxy: Some(out.join("proxy.json")),
        ..cfg.clone()
    };
    let mut text = serde_json::to_string_pretty(&experiment).expect("config serializes");
    text.push('\n');
    let path = out.join("config.json");
    write_file(&path, text.as_bytes())?;
    info!("wrote synthetic scenario to {}", out.display());
    Ok(path)
}

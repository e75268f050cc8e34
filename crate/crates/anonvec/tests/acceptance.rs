//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Built with `harness = false` so the lines
//! always show up in `cargo test` output.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use anonvec::{commands, ExperimentConfig, Overrides, Report};
use anonvec_core::embedding::{cosine_distance, DEFAULT_DIM};
use anonvec_core::eval::{compute_eer, ScoreSet};
use anonvec_core::fixtures::{default_proxy, standard_scenario_fixture};
use anonvec_core::proxy::{grad_wrt_input, loss, ProxyModel, ProxyTarget};
use anonvec_core::reprogram::{
    mae_masked, objective, optimize, optimize_masked, project, Init, OptimizerConfig, ReprogramParams,
    TrainingRecord, TrainingSet,
};
use anonvec_core::{anonymize_baseline, Direction, EmbeddingPool, SelectionConfig, SpeakerLevelEmbedding};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
}

fn random_model(rng: &mut ChaCha8Rng) -> ProxyModel {
    let embed = rng.random_range(2..=10);
    let cond = rng.random_range(0..=3);
    let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=8)).collect();
    let out = rng.random_range(1..=5);
    ProxyModel::seeded_mlp(embed, cond, &hidden, out, rng.random()).expect("chained dims")
}

fn random_training(rng: &mut ChaCha8Rng, model: &ProxyModel, max_records: usize) -> TrainingSet {
    let records = rng.random_range(1..=max_records);
    let recs = (0..records)
        .map(|i| TrainingRecord {
            speaker_level: SpeakerLevelEmbedding {
                speaker_id: format!("s{i}"),
                vector: uniform_vec(rng, model.embed_dim(), 1.0),
                utterance_count: 1,
            },
            cond: uniform_vec(rng, model.cond_dim(), 1.0),
            target: ProxyTarget::new(uniform_vec(rng, model.output_dim(), 1.0)),
        })
        .collect();
    TrainingSet::new(recs).expect("consistent records")
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-6;
    let draws = 100;
    let mut worst: f64 = 0.0;
    for draw in 0..draws {
        let model = random_model(&mut rng);

        let x = uniform_vec(&mut rng, model.embed_dim(), 1.0);
        let cond = uniform_vec(&mut rng, model.cond_dim(), 1.0);
        let target = ProxyTarget::new(uniform_vec(&mut rng, model.output_dim(), 1.0));
        let g = grad_wrt_input(&model, &x, &cond, &target).map_err(|e| e.to_string())?;
        let fd = central_diff(&x, h, |p| loss(&model, p, &cond, &target).unwrap());
        let e = rel_err(&g, &fd);
        worst = worst.max(e);
        check(e < 1e-5, || format!("draw {draw}: proxy gradient rel err {e:e}"))?;

        let ts = random_training(&mut rng, &model, 3);
        let d = model.embed_dim();
        // keep every coordinate clear of the |w| kink at 0
        let w: Vec<f64> = (0..d)
            .map(|_| {
                let mag = rng.random_range(0.01..0.5);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let mut mask: Vec<bool> = (0..d).map(|_| rng.random_bool(0.7)).collect();
        mask[rng.random_range(0..d)] = true;
        let lambda = rng.random_range(0.0..3.0);
        let params = ReprogramParams::new(w.clone(), mask.clone(), 0.1).map_err(|e| e.to_string())?;
        let g = objective(&params, &ts, &model, lambda).map_err(|e| e.to_string())?.grad;
        let fd = central_diff(&w, h, |p| {
            let q = ReprogramParams::new(p.to_vec(), mask.clone(), 0.1).unwrap();
            objective(&q, &ts, &model, lambda).unwrap().value
        });
        let e = rel_err(&g, &fd);
        worst = worst.max(e);
        check(e < 1e-5, || format!("draw {draw}: objective gradient rel err {e:e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, || format!("took {secs:.2}s"))?;
    Ok(format!(
        "{draws} draws x (proxy, objective), h = 1e-6, worst rel err {worst:.2e} < 1e-5, {secs:.2}s < 10s"
    ))
}

fn constraint_satisfaction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for c in 0..20 {
        let model = random_model(&mut rng);
        let ts = random_training(&mut rng, &model, 6);
        let d = model.embed_dim();
        let mut mask: Vec<bool> = (0..d).map(|_| rng.random_bool(0.8)).collect();
        mask[rng.random_range(0..d)] = true;
        let cfg = OptimizerConfig {
            step_size: rng.random_range(0.1..8.0),
            max_iters: rng.random_range(5..80),
            seed: rng.random(),
            init: Init::SeededUniform {
                scale: rng.random_range(0.0..1.0),
            },
            backtracking: rng.random_bool(0.5),
            ..OptimizerConfig::default()
        };
        let lambda = rng.random_range(0.0..10.0);
        let (p, _) = optimize_masked(&ts, &model, &cfg, mask, 0.1, lambda).map_err(|e| format!("config {c}: {e}"))?;
        let mae = mae_masked(&p);
        worst = worst.max(mae);
        check(mae <= 0.1 + 1e-9, || format!("config {c}: mae {mae}"))?;
    }
    Ok(format!("20 configs, epsilon = 0.1, max mae {worst:.12} <= 0.1 + 1e-9"))
}

fn parameter_budget() -> Outcome {
    let fx = standard_scenario_fixture(0).map_err(|e| e.to_string())?;
    let model = default_proxy();
    let ts = TrainingSet::from_embeddings(&fx.train, &model).map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig::default();
    let opt = OptimizerConfig {
        max_iters: 1,
        ..cfg.optimizer.with_seed(0)
    };
    let (p, _) = optimize(&ts, &model, &opt, cfg.epsilon, cfg.lambda_dist).map_err(|e| e.to_string())?;
    check(DEFAULT_DIM == 512, || format!("default dim {DEFAULT_DIM}"))?;
    check(p.w().len() == 512, || format!("w has {} entries", p.w().len()))?;
    check(p.trainable_count() == 512, || format!("{} trainable", p.trainable_count()))?;
    Ok("default config trains w with 512 entries, 512 unmasked".into())
}

/// Exact Euclidean projection of `v` onto `{ Σ|p| ≤ r }` by checking every
/// support: on a support S the minimizer soft-thresholds by a common τ.
fn face_enumeration_projection(v: &[f64], r: f64) -> Vec<f64> {
    if v.iter().map(|x| x.abs()).sum::<f64>() <= r {
        return v.to_vec();
    }
    let n = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for support in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| support & (1 << i) != 0).collect();
        let tau = (idx.iter().map(|&i| v[i].abs()).sum::<f64>() - r) / idx.len() as f64;
        if tau < 0.0 || idx.iter().any(|&i| v[i].abs() < tau) {
            continue;
        }
        let mut p = vec![0.0; n];
        for &i in &idx {
            p[i] = v[i].signum() * (v[i].abs() - tau);
        }
        let dist: f64 = p.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, p));
        }
    }
    best.expect("some support is feasible").1
}

fn projection_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 8;
    let mut worst: f64 = 0.0;
    let mut active = 0;
    for inst in 0..50 {
        let scale = rng.random_range(0.05..2.0);
        let w = uniform_vec(&mut rng, d, scale);
        let mut mask: Vec<bool> = (0..d).map(|_| rng.random_bool(0.75)).collect();
        mask[rng.random_range(0..d)] = true;
        let eps = rng.random_range(0.01..0.4);
        let params = ReprogramParams::new(w.clone(), mask.clone(), eps).map_err(|e| e.to_string())?;
        let got = project(&params);

        let masked: Vec<usize> = (0..d).filter(|&i| mask[i]).collect();
        let sub: Vec<f64> = masked.iter().map(|&i| w[i]).collect();
        let proj = face_enumeration_projection(&sub, eps * d as f64);
        let mut expected = w.clone();
        for (&i, p) in masked.iter().zip(proj) {
            expected[i] = p;
        }
        if expected != w {
            active += 1;
        }
        let dist = got.w().iter().zip(&expected).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(dist);
        check(dist <= 1e-6, || format!("instance {inst}: distance {dist:e}"))?;
    }
    Ok(format!(
        "50 instances at D = 8 ({active} with active constraint), max distance {worst:.2e} <= 1e-6"
    ))
}

fn baseline_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid_vec = |rng: &mut ChaCha8Rng, dim: usize| loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-2i32..=2) as f64).collect();
        if v.iter().any(|x| *x != 0.0) {
            break v;
        }
    };
    for case in 0..100 {
        let n = rng.random_range(1..=20usize);
        let dim = rng.random_range(2..=4);
        let k = rng.random_range(1..=n);
        let direction = if rng.random_bool(0.5) { Direction::Near } else { Direction::Far };
        let candidates: Vec<SpeakerLevelEmbedding> = (0..n)
            .map(|i| SpeakerLevelEmbedding {
                speaker_id: format!("p{i:02}"),
                vector: grid_vec(&mut rng, dim),
                utterance_count: 1,
            })
            .collect();
        let source = SpeakerLevelEmbedding {
            speaker_id: "src".into(),
            vector: grid_vec(&mut rng, dim),
            utterance_count: 1,
        };
        let dist: Vec<f64> = candidates
            .iter()
            .map(|c| cosine_distance(&source.vector, &c.vector).unwrap())
            .collect();
        // a preferred over b: strictly closer (farther), equal distance broken
        // towards the lower (higher) index
        let preferred = |a: usize, b: usize| match direction {
            Direction::Near => dist[a] < dist[b] || (dist[a] == dist[b] && a < b),
            Direction::Far => dist[a] > dist[b] || (dist[a] == dist[b] && a > b),
        };
        let mut winners = Vec::new();
        for subset in 0u32..(1 << n) {
            if subset.count_ones() as usize != k {
                continue;
            }
            let inside = |i: usize| subset & (1 << i) != 0;
            let valid = (0..n)
                .filter(|&i| inside(i))
                .all(|i| (0..n).filter(|&j| !inside(j)).all(|j| preferred(i, j)));
            if valid {
                winners.push(subset);
            }
        }
        check(winners.len() == 1, || format!("case {case}: {} admissible subsets", winners.len()))?;
        let mut expected = vec![0.0; dim];
        for i in (0..n).filter(|&i| winners[0] & (1 << i) != 0) {
            for (e, x) in expected.iter_mut().zip(&candidates[i].vector) {
                *e += x;
            }
        }
        expected.iter_mut().for_each(|e| *e /= k as f64);

        let pool = EmbeddingPool::new(candidates).map_err(|e| e.to_string())?;
        let got = anonymize_baseline(&source, &pool, &SelectionConfig::new(k, direction)).map_err(|e| e.to_string())?;
        check(got == expected, || format!("case {case}: {got:?} != {expected:?}"))?;
    }
    Ok("100 random pools (size <= 20, tie-prone grid) equal subset enumeration exactly".into())
}

fn sweep_oracle(genuine: &[f64], impostor: &[f64]) -> (f64, f64) {
    let mut ts: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.push(ts.last().unwrap().next_up());
    let mut prev: Option<(f64, f64, f64)> = None;
    for &t in &ts {
        let far = impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
        let frr = genuine.iter().filter(|&&s| s < t).count() as f64 / genuine.len() as f64;
        if far == frr {
            return (far, t);
        }
        if far < frr {
            let (t0, far0, frr0) = prev.unwrap();
            let a = (far0 - frr0) / ((far0 - frr0) - (far - frr));
            return (far0 + a * (far - far0), t0 + a * (t - t0));
        }
        prev = Some((t, far, frr));
    }
    unreachable!("FAR < FRR above the largest score")
}

fn eer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..200 {
        let total = rng.random_range(2..=200usize);
        let ng = rng.random_range(1..total);
        let ni = total - ng;
        let coarse = rng.random_bool(0.5);
        let shift = rng.random_range(0.0..1.5);
        let mut draw = |offset: f64| {
            let s: f64 = rng.random_range(-1.0..1.0) + offset;
            if coarse {
                (s * 4.0).round() / 4.0
            } else {
                s
            }
        };
        let genuine: Vec<f64> = (0..ng).map(|_| draw(shift)).collect();
        let impostor: Vec<f64> = (0..ni).map(|_| draw(0.0)).collect();
        let got = compute_eer(&ScoreSet::new(genuine.clone(), impostor.clone())).map_err(|e| e.to_string())?;
        let expected = sweep_oracle(&genuine, &impostor);
        check(got == expected, || format!("case {case}: {got:?} != {expected:?}"))?;
    }
    let separable = compute_eer(&ScoreSet::new(vec![0.9, 0.8, 0.95], vec![0.1, 0.2])).map_err(|e| e.to_string())?;
    check(separable.0 == 0.0, || format!("separable EER {}", separable.0))?;
    let same = vec![0.3, -0.2, 0.9, 0.1, 0.1];
    let identical = compute_eer(&ScoreSet::new(same.clone(), same)).map_err(|e| e.to_string())?;
    check(identical.0 == 0.5, || format!("identical-lists EER {}", identical.0))?;
    Ok("200 random score sets (n <= 200) equal the sweep oracle exactly; separable = 0, identical = 0.5".into())
}

fn scenario_eers(dir: &Path, seed: u64, set: &[&str]) -> Result<Report, String> {
    let out = dir.join(format!("seed{seed}"));
    let base = Overrides {
        seed: Some(seed),
        out: Some(out.clone()),
        set: vec![],
    };
    let cfg = ExperimentConfig::resolve(None, &base).map_err(|e| e.to_string())?;
    let config_path = commands::synth(&cfg).map_err(|e| e.to_string())?;
    let ov = Overrides {
        set: set.iter().map(|s| s.to_string()).collect(),
        ..base
    };
    let cfg = ExperimentConfig::resolve(Some(&config_path), &ov).map_err(|e| e.to_string())?;
    if cfg.anonymizer == anonvec::AnonymizerKind::Reprogram {
        commands::train_theta(&cfg).map_err(|e| e.to_string())?;
    }
    commands::evaluate(&cfg).map_err(|e| e.to_string())
}

fn directional_privacy() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    for seed in 0..3 {
        for (name, set) in [
            ("baseline_far", &["anonymizer=baseline_far", "k=20"][..]),
            ("reprogram", &["anonymizer=reprogram", "epsilon=0.1"][..]),
        ] {
            let report = scenario_eers(dir.path(), seed, set)?;
            let eer = |s: &str| report.row(s).expect("scenario present").eer;
            let (oo, oa, aa) = (eer("OO"), eer("OA"), eer("AA"));
            check(oo < 0.05, || format!("seed {seed} {name}: OO {oo}"))?;
            check(oa > oo, || format!("seed {seed} {name}: OA {oa} <= OO {oo}"))?;
            check(aa > oo, || format!("seed {seed} {name}: AA {aa} <= OO {oo}"))?;
            lines.push(format!("{name}@{seed} OO {oo:.3} OA {oa:.3} AA {aa:.3}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{}; {secs:.1}s < 60s", lines.join(", ")))
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_anonvec");
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let steps: [&[&str]; 4] = [
        &["synth", "--seed", "7", "--out", "data"],
        &["train-theta", "--config", "data/config.json", "--out", "run", "--set", "optimizer.max_iters=60"],
        &["anonymize", "--config", "data/config.json", "--out", "run", "--set", "optimizer.max_iters=60"],
        &["evaluate", "--config", "data/config.json", "--out", "run", "--set", "optimizer.max_iters=60"],
    ];
    for run in ["a", "b"] {
        let cwd = root.path().join(run);
        fs::create_dir_all(&cwd).map_err(|e| e.to_string())?;
        for args in steps {
            let o = Command::new(bin)
                .current_dir(&cwd)
                .env("ANONVEC_LOG", "error")
                .args(args)
                .output()
                .map_err(|e| e.to_string())?;
            check(o.status.success(), || {
                format!("{args:?} failed: {}", String::from_utf8_lossy(&o.stderr))
            })?;
        }
    }
    let files = ["run/report.json", "run/report.txt", "run/theta.json", "run/trace.tsv", "run/anonymized.jsonl"];
    for f in files {
        let a = fs::read(root.path().join("a").join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(root.path().join("b").join(f)).map_err(|e| e.to_string())?;
        check(a == b, || format!("{f} differs between runs"))?;
    }
    Ok(format!("two CLI runs (synth, train-theta, anonymize, evaluate) byte-identical: {}", files.join(", ")))
}

fn monotone_descent() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut steps = 0;
    for c in 0..20 {
        let model = random_model(&mut rng);
        let ts = random_training(&mut rng, &model, 6);
        let d = model.embed_dim();
        let mut mask: Vec<bool> = (0..d).map(|_| rng.random_bool(0.8)).collect();
        mask[rng.random_range(0..d)] = true;
        let cfg = OptimizerConfig {
            // deliberately large steps so backtracking has work to do
            step_size: rng.random_range(0.5..50.0),
            max_iters: rng.random_range(10..100),
            seed: rng.random(),
            tol: 0.0,
            init: Init::SeededUniform {
                scale: rng.random_range(0.0..0.5),
            },
            backtracking: true,
            ..OptimizerConfig::default()
        };
        let eps = rng.random_range(0.05..0.5);
        let lambda = rng.random_range(0.0..5.0);
        let (_, trace) = optimize_masked(&ts, &model, &cfg, mask, eps, lambda).map_err(|e| format!("config {c}: {e}"))?;
        let obj: Vec<f64> = trace.objectives().collect();
        steps += obj.len();
        for (i, pair) in obj.windows(2).enumerate() {
            check(pair[1] <= pair[0], || format!("config {c}: iteration {} rose {} -> {}", i + 2, pair[0], pair[1]))?;
        }
    }
    Ok(format!("20 configs, {steps} traced iterations, objective never increases"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradient_correctness),
        ("constraint satisfaction", constraint_satisfaction),
        ("parameter budget", parameter_budget),
        ("projection optimality", projection_optimality),
        ("baseline oracle equivalence", baseline_oracle),
        ("EER oracle equivalence", eer_oracle),
        ("directional privacy", directional_privacy),
        ("determinism", determinism),
        ("monotone descent", monotone_descent),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Oracles here are written independently of the library code.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cocoba::corpus::{Label, PoolState, Split};
use cocoba::density::{auto_bandwidth, ParzenEstimator};
use cocoba::embeddings::EmbeddingSnapshot;
use cocoba::engine::{majority_vote, Engine, EngineConfig, QuerySource};
use cocoba::harness::{
    make_synthetic_dataset, run_cell, run_experiment, summarize, write_curve_csv, Curve, ExperimentSpec, SynthSpec,
};
use cocoba::learner::{LearnerConfig, LinearLearner};
use cocoba::strategy::{build_learner, Strategy};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { name, pass, detail: detail.into() }
}

fn conf(w: &[f64], b: f64, x: &[f64]) -> f64 {
    let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b;
    2.0 / (1.0 + (-z).exp()) - 1.0
}

fn kernel_mean(points: &[&[f64]], x: &[f64], h: f64) -> f64 {
    let mut total = 0.0;
    for p in points {
        let mut sq = 0.0;
        for k in 0..x.len() {
            sq += (x[k] - p[k]) * (x[k] - p[k]);
        }
        let u = sq.sqrt() / h;
        if u < 1.0 {
            total += 1.0 - u;
        }
    }
    total / points.len() as f64
}

fn contention_score_oracle() -> Outcome {
    let start = Instant::now();
    let (ds, snap) = make_synthetic_dataset(&SynthSpec { n: 300, seed: 11, ..SynthSpec::default() }).unwrap();
    let gold = ds.gold_labels();
    let ids: Vec<String> = gold.keys().cloned().collect();
    let mut pool = PoolState::default();
    for (i, id) in ids.iter().enumerate() {
        match i {
            _ if i < 60 => {
                pool.labeled.insert(id.clone(), gold[id]);
            }
            _ if i < 260 => {
                pool.unlabeled.insert(id.clone());
            }
            _ => {
                pool.test.insert(id.clone());
            }
        }
    }
    let config = EngineConfig { estimators: 5, rng_seed: 3, ..EngineConfig::default() };
    let mut engine = Engine::new(&snap, pool.clone(), config.clone()).unwrap();
    let ranked: BTreeMap<String, f64> =
        engine.ranked_candidates().unwrap().iter().map(|c| (c.id.clone(), c.aggregate)).collect();

    let mut expected: BTreeMap<String, f64> = BTreeMap::new();
    for bag in engine.bags() {
        let pair = bag.learners().unwrap();
        let mut contention: Vec<(&String, f64, f64)> = Vec::new();
        for id in &pool.unlabeled {
            let v = snap.get(id).unwrap();
            let cd = conf(pair.doc.weights(), pair.doc.bias(), &v.doc);
            let cw = conf(pair.word.weights(), pair.word.bias(), &v.word);
            if (cd >= 0.0) != (cw >= 0.0) {
                contention.push((id, cd, cw));
            }
        }
        let docs: Vec<&[f64]> = contention.iter().map(|(id, _, _)| snap.get(id).unwrap().doc.as_slice()).collect();
        let words: Vec<&[f64]> = contention.iter().map(|(id, _, _)| snap.get(id).unwrap().word.as_slice()).collect();
        for (id, cd, cw) in &contention {
            let v = snap.get(id).unwrap();
            let pd = kernel_mean(&docs, &v.doc, config.bandwidth_doc);
            let pw = kernel_mean(&words, &v.word, config.bandwidth_word);
            *expected.entry((*id).clone()).or_default() += pd * cd.abs() + pw * cw.abs();
        }
    }
    let same_set = expected.keys().eq(ranked.keys());
    let max_err = expected
        .iter()
        .map(|(id, e)| ranked.get(id).map_or(f64::INFINITY, |a| (a - e).abs()))
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    outcome(
        "contention-score-oracle",
        same_set && max_err <= 1e-9 && elapsed < Duration::from_secs(10) && !expected.is_empty(),
        format!("{} candidates, max abs err {max_err:.2e}, {:.2}s", expected.len(), elapsed.as_secs_f64()),
    )
}

fn parzen_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 12;
    let pts: Vec<Vec<f64>> = (0..500).map(|_| (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
    let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
    let h = 25.0;
    let est = ParzenEstimator::fit(refs.iter().copied(), h).unwrap();
    let mut density_err: f64 = 0.0;
    for _ in 0..1000 {
        let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-12.0..12.0)).collect();
        density_err = density_err.max((est.density(&q).unwrap() - kernel_mean(&refs, &q, h)).abs());
    }

    let big: Vec<Vec<f64>> = (0..2000).map(|_| (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
    let big_refs: Vec<&[f64]> = big.iter().map(Vec::as_slice).collect();
    let mut sum = 0.0;
    for i in 0..big.len() {
        for j in 0..big.len() {
            if i != j {
                sum += big[i].iter().zip(&big[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            }
        }
    }
    let exhaustive = sum / (big.len() * (big.len() - 1)) as f64;
    let bw_err = (auto_bandwidth(&big_refs, 9).unwrap() - exhaustive).abs();
    outcome(
        "parzen-oracle",
        density_err <= 1e-9 && bw_err <= 1e-6,
        format!("max density err {density_err:.2e} over 1000 queries, bandwidth err {bw_err:.2e} on 2000 points"),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.gen_range(1..12);
        let n = rng.gen_range(1..40);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let ys: Vec<Label> = (0..n).map(|_| if rng.gen_bool(0.4) { Label::Positive } else { Label::Negative }).collect();
        let ex: Vec<(&[f64], Label)> = xs.iter().map(Vec::as_slice).zip(ys.iter().copied()).collect();
        let config = LearnerConfig { l2: rng.gen_range(0.0..0.1), ..LearnerConfig::default() };
        let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = rng.gen_range(-1.0..1.0);
        let analytic = LinearLearner::from_parts(w.clone(), b, config).gradient(&ex).unwrap();

        let eps = 1e-5;
        let mut numeric = Vec::with_capacity(dim + 1);
        for k in 0..=dim {
            let shifted = |delta: f64| {
                let (mut w2, mut b2) = (w.clone(), b);
                if k < dim {
                    w2[k] += delta;
                } else {
                    b2 += delta;
                }
                LinearLearner::from_parts(w2, b2, config).loss(&ex).unwrap()
            };
            numeric.push((shifted(eps) - shifted(-eps)) / (2.0 * eps));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-8);
        worst = worst.max(rel);
    }
    outcome("gradient-check", worst < 1e-4, format!("worst relative error {worst:.2e} over 100 instances"))
}

fn majority_vote_tables() -> Outcome {
    // (conf_doc, conf_word) per bag
    let table = |positive_bags: usize, k: usize| -> Vec<(f64, f64)> {
        (0..k).map(|b| if b < positive_bags { (0.6, -0.2) } else { (-0.5, 0.1) }).collect()
    };
    let vote = |t: &[(f64, f64)]| majority_vote(t.iter().map(|(d, w)| d + w));
    let cases = [
        (table(1, 1), Label::Positive),
        (table(0, 1), Label::Negative),
        (vec![(0.25, -0.25)], Label::Positive),
        (table(8, 15), Label::Positive),
        (table(7, 15), Label::Negative),
        (table(15, 15), Label::Positive),
        (table(0, 15), Label::Negative),
    ];
    let wrong: Vec<usize> = cases.iter().enumerate().filter(|(_, (t, want))| vote(t) != *want).map(|(i, _)| i).collect();
    outcome(
        "majority-vote",
        wrong.is_empty(),
        format!("{} tables (K=1, K=15 with 7 and 8 positive bags), mismatches {wrong:?}", cases.len()),
    )
}

fn determinism() -> Outcome {
    let (ds, snap) = make_synthetic_dataset(&SynthSpec { n: 600, seed: 3, ..SynthSpec::default() }).unwrap();
    let spec = ExperimentSpec { budget_frac: 0.3, eval_every: 5, ..ExperimentSpec::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut identical = true;
    let mut bytes = 0;
    for s in [Strategy::Cocoba, Strategy::Uncertainty, Strategy::Random] {
        let mut files = Vec::new();
        for run in 0..2 {
            let curve = run_cell(&ds, std::slice::from_ref(&snap), &spec, s, 7).unwrap();
            let path = dir.path().join(format!("{s}-{run}.csv"));
            write_curve_csv(&path, &curve).unwrap();
            files.push(fs::read(&path).unwrap());
        }
        bytes += files[0].len();
        identical &= files[0] == files[1];
    }
    outcome(
        "determinism",
        identical,
        format!("cocoba/uncertainty/random curve.csv pairs byte-identical: {identical} ({bytes} bytes); single platform"),
    )
}

struct Grid {
    means: BTreeMap<Strategy, f64>,
    elapsed: Duration,
    completed: BTreeSet<Strategy>,
}

fn synthetic_grid() -> Grid {
    let start = Instant::now();
    let (ds, snap) = make_synthetic_dataset(&SynthSpec::default()).unwrap();
    let spec = ExperimentSpec {
        strategies: Strategy::ALL.to_vec(),
        seeds: (1..=5).collect(),
        budget_frac: 0.25,
        fractions: vec![0.25],
        ..ExperimentSpec::default()
    };
    let curves: Vec<Curve> = run_experiment(&ds, std::slice::from_ref(&snap), &spec).unwrap();
    let summary = summarize(&curves, &spec.fractions).unwrap();
    let target = (0.25 * curves[0].train_size as f64).round() as usize;
    let completed = Strategy::ALL
        .into_iter()
        .filter(|s| {
            let cs: Vec<&Curve> = curves.iter().filter(|c| c.strategy == *s).collect();
            cs.len() == 5 && cs.iter().all(|c| c.records.last().is_some_and(|r| r.budget == target))
        })
        .collect();
    let means = Strategy::ALL.into_iter().map(|s| (s, summary.mean_at(s, 0.25).unwrap())).collect();
    Grid { means, elapsed: start.elapsed(), completed }
}

fn relative_ordering(g: &Grid) -> Outcome {
    let (c, u, r) = (g.means[&Strategy::Cocoba], g.means[&Strategy::Uncertainty], g.means[&Strategy::Random]);
    let pass = c >= u && u >= r && c - r > 0.03 && g.elapsed < Duration::from_secs(30 * 60);
    outcome(
        "relative-ordering",
        pass,
        format!(
            "F1@25%: cocoba {c:.4}, uncertainty {u:.4}, random {r:.4}; cocoba-random {:+.4}; grid {:.0}s",
            c - r,
            g.elapsed.as_secs_f64()
        ),
    )
}

fn ablation_direction(g: &Grid) -> Outcome {
    let m = |s: Strategy| g.means[&s];
    let c = m(Strategy::Cocoba);
    let mut flags = Vec::new();
    for s in [Strategy::Coba, Strategy::Coco] {
        if c < m(s) {
            flags.push(format!("cocoba < {s} by {:.4}", m(s) - c));
        }
    }
    if !g.completed.contains(&Strategy::Cotesting) {
        flags.push("cotesting did not complete".into());
    } else if c <= m(Strategy::Cotesting) {
        flags.push(format!("cotesting not below cocoba ({:.4} vs {c:.4})", m(Strategy::Cotesting)));
    }
    outcome(
        "ablation-direction",
        flags.is_empty(),
        format!(
            "F1@25%: cocoba {c:.4}, coba {:.4}, coco {:.4}, cotesting {:.4}; violations: {}",
            m(Strategy::Coba),
            m(Strategy::Coco),
            m(Strategy::Cotesting),
            if flags.is_empty() { "none".to_string() } else { flags.join("; ") }
        ),
    )
}

fn pool_conservation_and_fallback() -> Outcome {
    let (ds, snap): (_, EmbeddingSnapshot) =
        make_synthetic_dataset(&SynthSpec { n: 240, noise: 0.0, seed: 2, ..SynthSpec::default() }).unwrap();
    let gold = ds.gold_labels();
    let pool = cocoba::corpus::cold_start_split(&ds, 20, 1).unwrap();
    let total = pool.pool_size();
    let test = pool.test.clone();
    let config = EngineConfig { rng_seed: 4, ..EngineConfig::default() };
    let mut learner = build_learner(&snap, pool, config).unwrap();
    let (mut fallback, mut contention, mut conserved) = (0, 0, true);
    while !learner.pool().unlabeled.is_empty() {
        let q = learner.next_query().unwrap();
        match q.source {
            QuerySource::Fallback => fallback += 1,
            QuerySource::Contention => contention += 1,
            _ => {}
        }
        learner.commit_label(&q.id, gold[&q.id]).unwrap();
        let p = learner.pool();
        conserved &= p.labeled.len() + p.unlabeled.len() == total && p.test == test && p.is_partition();
    }
    let train = ds.split_ids(Split::Train).len();
    outcome(
        "pool-conservation-and-fallback",
        conserved && fallback > 0 && learner.pool().labeled.len() == train,
        format!("{} queries: {contention} contention, {fallback} fallback; |L|+|U|={total} held: {conserved}", contention + fallback),
    )
}

fn main() {
    let mut results = vec![contention_score_oracle(), parzen_oracle(), gradient_check(), majority_vote_tables(), determinism()];
    let grid = synthetic_grid();
    results.push(relative_ordering(&grid));
    results.push(ablation_direction(&grid));
    results.push(pool_conservation_and_fallback());

    for r in &results {
        println!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

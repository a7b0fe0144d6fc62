//! Acceptance criteria 2 through 9, one PASS/FAIL line each.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{bench_data, bench_hyper, end_to_end_error, nearest_class_mean_accuracy, random_tensor};
use oad_core::dataset::{gen_synthetic, FeatureDataset, FeatureSequence, Split, SyntheticConfig};
use oad_core::dynamic_branch::forward_dynamic;
use oad_core::evaluation::{average_precision, calibrated_ap, evaluate_with, frame_accuracy, EvalReport};
use oad_core::exemplars::{build_bank_with, kmeans, ExemplarBank, KMeansParams};
use oad_core::model::{ModelHyper, ModelParams};
use oad_core::numeric::{Rng, Tensor};
use oad_core::static_branch::forward_static;
use oad_core::streaming::{detect_dataset, detect_video, write_predictions, PredictionRecord};
use oad_core::training::{train_with, TrainConfig};
use oad_core::Exec;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let worst = (0..100u64).map(end_to_end_error).fold(0.0, f64::max);
    let t = start.elapsed();
    check(worst < 1e-6 && within(t, 60), format!("max rel err {worst:.2e} over 100 instances in {t:.1?}"))
}

/// Pairwise-rank brute force for both metrics.
fn brute_metrics(scores: &[f64], pos: &[bool], w: f64) -> (f64, f64, f64) {
    let n = scores.len();
    let mut at = vec![0; n];
    for i in 0..n {
        let rank = (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count();
        at[rank] = i;
    }
    let tp = |k: usize| (0..=k).filter(|&r| pos[at[r]]).count();
    let npos = pos.iter().filter(|&&p| p).count() as f64;
    let (mut ap, mut cap, mut plain) = (0.0, 0.0, 0.0);
    for k in 0..n {
        if !pos[at[k]] {
            continue;
        }
        ap += (k..n)
            .map(|j| tp(j) as f64 / (j + 1) as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        let wtp = w * tp(k) as f64;
        cap += wtp / (wtp + (k + 1 - tp(k)) as f64);
        plain += tp(k) as f64 / (k + 1) as f64;
    }
    (ap / npos, cap / npos, plain / npos)
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let mut failures = 0;
    let mut worst_unit_w: f64 = 0.0;
    for case in 0..1000 {
        let n = rng.int_inclusive(1, 50);
        let tied = case % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| if tied { rng.int_inclusive(0, 5) as f64 } else { rng.uniform() })
            .collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
        let forced = rng.index(n);
        pos[forced] = true;
        let w = rng.uniform_range(0.05, 6.0);
        let (ap, cap, plain) = brute_metrics(&scores, &pos, w);
        if average_precision(&scores, &pos).unwrap() != ap || calibrated_ap(&scores, &pos, w).unwrap() != cap {
            failures += 1;
        }
        worst_unit_w = worst_unit_w.max((calibrated_ap(&scores, &pos, 1.0).unwrap() - plain).abs());
    }
    let t = start.elapsed();
    check(
        failures == 0 && worst_unit_w <= 1e-12 && within(t, 30),
        format!("{failures} mismatches in 1000 instances, |cAP(w=1) - AP| <= {worst_unit_w:.1e}, {t:.1?}"),
    )
}

fn causality() -> Outcome {
    let start = Instant::now();
    let cfg = SyntheticConfig {
        frames_per_video: 100,
        videos: 50,
        ..common::bench_config()
    };
    let ds = gen_synthetic(&cfg, Split::Test, &mut Rng::new(31)).unwrap();
    let mut rng = Rng::new(32);
    let model = ModelParams::init(bench_hyper(), 3, 16, &mut rng).unwrap();
    let bank = ExemplarBank::new(3, 8, random_tensor(32, 16, &mut rng)).unwrap();
    let mut broken = 0;
    for seq in &ds.sequences {
        let full = detect_video(seq, &model, &bank, 0.3).unwrap();
        for _ in 0..10 {
            let t = rng.index(seq.len());
            let cut = FeatureSequence::from_labels("cut", seq.frames.slice_rows(0, t + 1), seq.labels[..=t].to_vec(), 3).unwrap();
            let part = detect_video(&cut, &model, &bank, 0.3).unwrap();
            let same = part
                .as_slice()
                .iter()
                .zip(full.slice_rows(0, t + 1).as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            broken += usize::from(!same);
        }
    }
    let t = start.elapsed();
    check(broken == 0 && within(t, 60), format!("{broken} of 500 truncations changed earlier rows, {t:.1?}"))
}

struct Artifacts {
    report: EvalReport,
    dynamic_report: EvalReport,
    accuracy: f64,
    elapsed: Duration,
}

/// Bank, training, streaming detection and evaluation; files land in `dir`.
fn pipeline(train: &FeatureDataset, test: &FeatureDataset, lambda: f64, exec: Exec, dir: &Path) -> Artifacts {
    let start = Instant::now();
    let hyper = ModelHyper { lambda, ..bench_hyper() };
    let bank = build_bank_with(train, hyper.exemplars, &mut Rng::new(common::BENCH_TRAIN_SEED), KMeansParams::default(), exec).unwrap();
    let outcome = train_with(train, &bank, hyper, &TrainConfig::default(), exec).unwrap();
    let preds = detect_dataset(test, &outcome.params, &bank, hyper.beta, exec).unwrap();
    let report = evaluate_with(&preds, test, exec).unwrap();
    let elapsed = start.elapsed();
    bank.save(&dir.join("bank.clrb")).unwrap();
    outcome.params.save(&dir.join("model.clrc")).unwrap();
    write_predictions(&dir.join("pred.jsonl"), &preds).unwrap();
    std::fs::write(dir.join("report.json"), report.to_json()).unwrap();
    let dynamic: Vec<PredictionRecord> = preds
        .iter()
        .map(|r| PredictionRecord { scores: r.s_d.clone(), ..r.clone() })
        .collect();
    Artifacts {
        dynamic_report: evaluate_with(&dynamic, test, exec).unwrap(),
        accuracy: frame_accuracy(&preds, test).unwrap(),
        report,
        elapsed,
    }
}

fn kmeans_behaviour() -> Outcome {
    let start = Instant::now();
    let mut violations = 0;
    for seed in 0..100u64 {
        let mut rng = Rng::new(seed);
        let n = rng.int_inclusive(5, 120);
        let k = rng.int_inclusive(1, n.min(10));
        let dim = rng.int_inclusive(1, 6);
        let mut points = random_tensor(n, dim, &mut rng);
        if seed % 5 == 0 {
            // Duplicated points exercise empty-cluster repair.
            for i in (1..n).step_by(2) {
                let prev = points.row(i - 1).to_vec();
                points.row_mut(i).copy_from_slice(&prev);
            }
        }
        let run = kmeans(&points, k, &mut rng, KMeansParams::default()).unwrap();
        violations += run.history.windows(2).filter(|w| w[1] > w[0]).count();
    }
    let mut unrecovered = 0;
    for seed in 0..20u64 {
        let mut rng = Rng::new(1000 + seed);
        let n = rng.int_inclusive(1, 12);
        let points = random_tensor(n, 3, &mut rng);
        let run = kmeans(&points, n, &mut rng, KMeansParams::default()).unwrap();
        let mut got: Vec<Vec<u64>> = run.centroids.iter_rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        let mut want: Vec<Vec<u64>> = points.iter_rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        got.sort();
        want.sort();
        unrecovered += usize::from(got != want);
    }
    let t = start.elapsed();
    check(
        violations == 0 && unrecovered == 0 && within(t, 30),
        format!("{violations} objective increases in 100 runs, {unrecovered} of 20 N == M runs not exact, {t:.1?}"),
    )
}

fn attention_invariants() -> Outcome {
    let mut rng = Rng::new(77);
    let mut worst_sum: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    for _ in 0..1000 {
        let classes = rng.int_inclusive(1, 4);
        let dim = rng.int_inclusive(2, 6);
        let hidden = rng.int_inclusive(2, 8);
        let m = rng.int_inclusive(1, 4);
        let window = rng.int_inclusive(1, 6);
        let hyper = ModelHyper { window, hidden, exemplars: m, ..Default::default() };
        let params = ModelParams::init(hyper, classes, dim, &mut rng).unwrap();
        let bank = ExemplarBank::new(classes, m, random_tensor((classes + 1) * m, dim, &mut rng)).unwrap();
        let frames = random_tensor(rng.int_inclusive(1, window + 1), dim, &mut rng);
        let d = forward_dynamic(&frames, &params.dynamic).unwrap();
        worst_sum = worst_sum.max((d.attention.iter().sum::<f64>() - 1.0).abs());
        let frame = frames.row(frames.rows() - 1);
        let s = forward_static(frame, &bank, &params.static_).unwrap();
        for row in s.exemplar_attention.iter_rows() {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        worst_sum = worst_sum.max((s.category_weights.iter().sum::<f64>() - 1.0).abs());

        let mut rows: Vec<Vec<f64>> = bank.exemplars.iter_rows().map(<[f64]>::to_vec).collect();
        for class in rows.chunks_mut(m) {
            rng.shuffle(class);
        }
        let permuted = ExemplarBank::new(classes, m, Tensor::from_rows(&rows).unwrap()).unwrap();
        let p = forward_static(frame, &permuted, &params.static_).unwrap();
        for (a, b) in s.logits.iter().zip(&p.logits) {
            worst_perm = worst_perm.max((a - b).abs());
        }
    }
    check(
        worst_sum <= 1e-9 && worst_perm <= 1e-9,
        format!("max |attention sum - 1| {worst_sum:.1e}, max permutation drift {worst_perm:.1e}"),
    )
}

fn files_identical(a: &Path, b: &Path) -> Vec<&'static str> {
    ["bank.clrb", "model.clrc", "pred.jsonl", "report.json"]
        .into_iter()
        .filter(|name| std::fs::read(a.join(name)).unwrap() != std::fs::read(b.join(name)).unwrap())
        .collect()
}

fn report(results: &mut Vec<bool>, id: u32, name: &str, outcome: Outcome) {
    let verdict = if outcome.pass { "PASS" } else { "FAIL" };
    println!("criterion {id} ({name}): {verdict}  {}", outcome.detail);
    results.push(outcome.pass);
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    report(&mut results, 2, "gradient fidelity", gradient_fidelity());
    report(&mut results, 3, "metric oracles", metric_oracles());
    report(&mut results, 4, "causality", causality());

    let (train, test) = bench_data();
    let ncm = nearest_class_mean_accuracy(&train, &test);
    let first = tempfile::tempdir().unwrap();
    let main_run = pipeline(&train, &test, 1.0, Exec::default(), first.path());
    let map = main_run.report.map.unwrap_or(0.0);
    report(
        &mut results,
        5,
        "synthetic convergence",
        check(
            main_run.accuracy >= 0.95 && map >= 0.95 && ncm >= 0.99 && within(main_run.elapsed, 600),
            format!(
                "fused accuracy {:.4}, mAP {map:.4}, nearest-mean oracle {ncm:.4}, {:.1?}",
                main_run.accuracy, main_run.elapsed
            ),
        ),
    );

    let no_cons_dir = tempfile::tempdir().unwrap();
    let no_cons = pipeline(&train, &test, 0.0, Exec::default(), no_cons_dir.path());
    let dyn_map = main_run.dynamic_report.map.unwrap_or(0.0);
    let no_cons_map = no_cons.report.map.unwrap_or(0.0);
    report(
        &mut results,
        6,
        "fusion ablation",
        check(
            map >= dyn_map - 0.01 && map >= no_cons_map - 0.01,
            format!("fused {map:.4} vs dynamic-only {dyn_map:.4}; lambda 1 {map:.4} vs lambda 0 {no_cons_map:.4}"),
        ),
    );

    report(&mut results, 7, "k-means", kmeans_behaviour());

    let second = tempfile::tempdir().unwrap();
    pipeline(&train, &test, 1.0, Exec::Sequential, second.path());
    let differing = files_identical(first.path(), second.path());
    report(
        &mut results,
        8,
        "determinism",
        check(differing.is_empty(), format!("differing files: {differing:?} (parallel run vs sequential rerun)")),
    );

    report(&mut results, 9, "attention invariants", attention_invariants());

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

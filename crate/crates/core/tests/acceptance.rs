//! Acceptance gate. Every criterion runs in sequence and prints one
//! `[PASS]` or `[FAIL]` line; the process fails if any criterion fails.
//!
//! Pass substrings as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- invariance`.

use std::collections::BTreeMap;
use std::fs;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use riconv::data::{make_dataset, DatasetSpec, PartScheme, ShapeClass};
use riconv::diagnostics::gradcheck_suite;
use riconv::geom::{apply_rigid, centroid, sample_rotation_so3, Point3, PointCloud, RigidTransform};
use riconv::model::{
    evaluate, run_experiment, train, write_history_csv, write_metrics_csv, ClassOutput, ClassifierMode, Model,
    NetworkConfig, Prediction, RotationRegime, Task, TrainConfig, CSV_SCHEMA,
};
use riconv::rif::{bin_assign, build_frame, rif_features};
use riconv::riconv::{FeatureMode, Geometry, RIConvConfig, RIConvLayer};
use riconv::sampling::{farthest_point_sampling, knn};
use riconv::autodiff::{Mode, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_rigid(rng: &mut ChaCha8Rng) -> RigidTransform {
    let t = Point3::new(
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
    );
    sample_rotation_so3(rng).with_translation(t)
}

/// Uniform samples in the unit ball: tie-free with probability one.
fn ball_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let p = Point3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if p.norm() <= 1.0 {
            pts.push(p);
        }
    }
    PointCloud::new(pts).unwrap()
}

fn class_outputs(model: &Model, clouds: &[PointCloud]) -> Vec<ClassOutput> {
    model
        .predict(clouds)
        .unwrap()
        .into_iter()
        .map(|p| match p {
            Prediction::Class(o) => o,
            Prediction::Parts { .. } => panic!("classification model expected"),
        })
        .collect()
}

fn part_labels(model: &Model, clouds: &[PointCloud]) -> Vec<Vec<usize>> {
    model
        .predict(clouds)
        .unwrap()
        .into_iter()
        .map(|p| match p {
            Prediction::Parts { labels, .. } => labels,
            Prediction::Class(_) => panic!("segmentation model expected"),
        })
        .collect()
}

fn classification_set(per_train: usize, per_test: usize, n_points: usize, seed: u64) -> (Vec<PointCloud>, Vec<PointCloud>) {
    let ds = make_dataset(&DatasetSpec {
        classes: ShapeClass::ALL.to_vec(),
        per_class_train: per_train,
        per_class_test: per_test,
        n_points,
        jitter_sigma: 0.01,
        part_scheme: None,
        seed,
    })
    .unwrap();
    (ds.train, ds.test)
}

fn feature_invariance() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (k, n_bins) = (32, 4);
    let mut worst: f64 = 0.0;
    let mut bin_mismatch = 0;
    let mut compared = 0usize;
    for _ in 0..100 {
        let cloud = ball_cloud(&mut rng, 256);
        let centers: Vec<usize> = (0..256).step_by(16).collect();
        let base: Vec<_> = centers
            .iter()
            .map(|&c| {
                let f = build_frame(cloud.points(), c, k).unwrap();
                (rif_features(&f), bin_assign(&f, n_bins).unwrap())
            })
            .collect();
        for _ in 0..10 {
            let moved = apply_rigid(&cloud, &random_rigid(&mut rng));
            for (&c, (feats, bins)) in centers.iter().zip(&base) {
                let f = build_frame(moved.points(), c, k).unwrap();
                for (a, b) in rif_features(&f).iter().zip(feats) {
                    for (x, y) in a.to_array().iter().zip(b.to_array()) {
                        worst = worst.max((x - y).abs());
                        compared += 1;
                    }
                }
                if bin_assign(&f, n_bins).unwrap() != *bins {
                    bin_mismatch += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-6 && elapsed < Duration::from_secs(30),
        format!(
            "{compared} components over 100 clouds x 10 rigid transforms, max abs deviation {worst:.2e} (limit 1e-6), \
             {bin_mismatch} bin assignments changed, {elapsed:.1?} (limit 30 s)"
        ),
    )
}

/// Counts clouds whose logits match within `rel_tol` relative and whose
/// predictions agree.
fn invariant_count(model: &Model, clouds: &[PointCloud], rng: &mut ChaCha8Rng, rel_tol: f64) -> (usize, f64) {
    let moved: Vec<PointCloud> = clouds.iter().map(|c| apply_rigid(c, &random_rigid(rng))).collect();
    let a = class_outputs(model, clouds);
    let b = class_outputs(model, &moved);
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(&b) {
        let scale = x.mean_logits.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let diff = x
            .mean_logits
            .iter()
            .zip(&y.mean_logits)
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        let rel = diff / scale;
        worst = worst.max(rel);
        if rel <= rel_tol && x.prediction == y.prediction {
            ok += 1;
        }
    }
    (ok, worst)
}

fn network_invariance() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let cfg = NetworkConfig::classification(512, 3, 5).unwrap();
    let (train_set, test_set) = classification_set(16, 20, 512, 7);
    let untrained = Model::new(cfg.clone(), 3).unwrap();
    let tcfg = TrainConfig {
        epochs: 4,
        seed: 3,
        rotation_regime: RotationRegime::So3So3,
        ..TrainConfig::for_task(Task::Classification)
    };
    let trained = train(Model::new(cfg, 3).unwrap(), &tcfg, &train_set).unwrap().model;
    let (ok_u, worst_u) = invariant_count(&untrained, &test_set, &mut rng, 1e-4);
    let (ok_t, worst_t) = invariant_count(&trained, &test_set, &mut rng, 1e-4);
    let elapsed = start.elapsed();
    outcome(
        ok_u >= 99 && ok_t >= 99 && elapsed < Duration::from_secs(120),
        format!(
            "untrained {ok_u}/100 (max rel {worst_u:.1e}), trained {ok_t}/100 (max rel {worst_t:.1e}) \
             invariant under SO(3)+translation (need >= 99, rel 1e-4), {elapsed:.1?} (limit 2 min)"
        ),
    )
}

fn permutation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let model = Model::new(NetworkConfig::classification(256, 3, 5).unwrap(), 5).unwrap();
    let clouds: Vec<PointCloud> = (0..100).map(|_| ball_cloud(&mut rng, 256)).collect();
    let shuffled: Vec<PointCloud> = clouds
        .iter()
        .map(|c| {
            let mut perm: Vec<usize> = (0..c.len()).collect();
            perm.shuffle(&mut rng);
            c.permuted(&perm).unwrap()
        })
        .collect();
    let a = class_outputs(&model, &clouds);
    let b = class_outputs(&model, &shuffled);
    let mut worst: f64 = 0.0;
    let mut ok = 0;
    for (x, y) in a.iter().zip(&b) {
        let d = x
            .mean_logits
            .iter()
            .zip(&y.mean_logits)
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        worst = worst.max(d);
        if d <= 1e-9 {
            ok += 1;
        }
    }
    outcome(
        ok == 100,
        format!("{ok}/100 permuted clouds within 1e-9, max abs logit change {worst:.1e}"),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let entries = gradcheck_suite(0).unwrap();
    let elapsed = start.elapsed();
    let all = entries.iter().all(|e| e.passed());
    let parts: Vec<String> = entries
        .iter()
        .map(|e| format!("{} {:.1e}/{:.0e}", e.report.name, e.report.max_relative_error, e.tolerance))
        .collect();
    outcome(
        all && elapsed < Duration::from_secs(120),
        format!("{}; {elapsed:.1?} (limit 2 min)", parts.join(", ")),
    )
}

fn brute_fps(points: &[Point3], n: usize) -> Vec<usize> {
    let c = centroid(points).unwrap();
    let mut first = 0;
    for i in 1..points.len() {
        if points[i].distance_squared(c) > points[first].distance_squared(c) {
            first = i;
        }
    }
    let mut chosen = vec![first];
    while chosen.len() < n {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&j| points[i].distance_squared(points[j]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(b, _)| d > b) {
                best = Some((d, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

fn brute_knn(points: &[Point3], q: Point3, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (p.distance_squared(q), i)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

fn sampling_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut fps_checks, mut knn_checks, mut mismatches) = (0, 0, 0);
    for _ in 0..50 {
        let cloud = ball_cloud(&mut rng, 64);
        let pts = cloud.points();
        for n in [1, 2, 8, 16, 32, 64] {
            fps_checks += 1;
            if farthest_point_sampling(pts, n).unwrap().indices() != brute_fps(pts, n).as_slice() {
                mismatches += 1;
            }
        }
        for k in [1, 4, 16, 64] {
            for qi in (0..64).step_by(8) {
                knn_checks += 1;
                if knn(pts, pts[qi], k).unwrap().indices() != brute_knn(pts, pts[qi], k).as_slice() {
                    mismatches += 1;
                }
            }
            let q = Point3::new(rng.random(), rng.random(), rng.random());
            knn_checks += 1;
            if knn(pts, q, k).unwrap().indices() != brute_knn(pts, q, k).as_slice() {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{fps_checks} FPS and {knn_checks} kNN queries on 50 clouds of 64 points, {mismatches} mismatches"),
    )
}

fn consistency_experiment() -> Outcome {
    let start = Instant::now();
    let (train_set, test_set) = classification_set(40, 20, 512, 606);
    let cfg = NetworkConfig::classification(512, 3, 5).unwrap();
    let tcfg = TrainConfig {
        seed: 606,
        ..TrainConfig::for_task(Task::Classification)
    };
    let result = run_experiment(&cfg, &tcfg, &train_set, &test_set, &RotationRegime::TABLE).unwrap();
    let elapsed = start.elapsed();
    let acc: Vec<String> = result
        .rows
        .iter()
        .map(|r| format!("{} {:.3}", r.regime, r.metrics.overall_accuracy))
        .collect();
    let all_high = result.rows.iter().all(|r| r.metrics.overall_accuracy >= 0.85);
    let gap = result.max_gap();
    // two trainings (z and SO3 training sides) for three regimes
    let per_run = elapsed / 2;
    outcome(
        all_high && gap <= 0.03 && per_run < Duration::from_secs(15 * 60),
        format!(
            "200/100 clouds x 512 points, 50 epochs: {} (need >= 0.85), max gap {gap:.3} (limit 0.03), \
             acc std {:.4}, {per_run:.0?} per training run (limit 15 min)",
            acc.join(", "),
            result.accuracy_std
        ),
    )
}

fn negative_control() -> Outcome {
    let (train_set, test_set) = classification_set(40, 20, 512, 606);
    let cfg = NetworkConfig::classification(512, 3, 5)
        .unwrap()
        .with_feature_mode(FeatureMode::RawXyz);
    let tcfg = TrainConfig {
        seed: 606,
        ..TrainConfig::for_task(Task::Classification)
    };
    let regimes = [RotationRegime::ZZ, RotationRegime::ZSo3];
    let result = run_experiment(&cfg, &tcfg, &train_set, &test_set, &regimes).unwrap();
    let zz = result.accuracy(RotationRegime::ZZ).unwrap();
    let zso3 = result.accuracy(RotationRegime::ZSo3).unwrap();
    outcome(
        zz - zso3 >= 0.15,
        format!("raw_xyz z/z {zz:.3}, z/SO3 {zso3:.3}, drop {:.3} (need >= 0.15)", zz - zso3),
    )
}

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let tcfg = TrainConfig {
        epochs: 3,
        seed: 808,
        rotation_regime: RotationRegime::ZSo3,
        ..TrainConfig::for_task(Task::Classification)
    };
    let base = |n_points: usize, layers: usize| NetworkConfig::classification(n_points, layers, 5).unwrap();
    let mut variants: Vec<(String, NetworkConfig)> = vec![
        ("full".into(), base(256, 3)),
        ("distances_only".into(), base(256, 3).with_feature_mode(FeatureMode::DistancesOnly)),
        ("angles_only".into(), base(256, 3).with_feature_mode(FeatureMode::AnglesOnly)),
        ("no_lift_mlp".into(), base(256, 3).with_lift_mlp(false)),
        ("single_vector".into(), base(256, 3).with_classifier_mode(ClassifierMode::SingleVector)),
        ("multi_vector".into(), base(256, 3).with_classifier_mode(ClassifierMode::MultiVector)),
    ];
    for layers in 1..=4 {
        variants.push((format!("layers_{layers}"), base(256, layers)));
    }
    for n in [128, 256, 512, 1024] {
        variants.push((format!("points_{n}"), base(n, 3)));
    }
    let mut sets: BTreeMap<usize, (Vec<PointCloud>, Vec<PointCloud>)> = BTreeMap::new();
    let mut report = Vec::new();
    let mut written = 0;
    for (name, cfg) in &variants {
        let (train_set, test_set) = sets
            .entry(cfg.n_points)
            .or_insert_with(|| classification_set(12, 6, cfg.n_points, 808));
        let outcome = match train(Model::new(cfg.clone(), 808).unwrap(), &tcfg, train_set) {
            Ok(o) => o,
            Err(e) => return outcome(false, format!("{name} failed to train: {e}")),
        };
        let metrics = evaluate(&outcome.model, test_set, tcfg.rotation_regime, 808).unwrap();
        let mpath = dir.path().join(format!("{name}_metrics.csv"));
        let hpath = dir.path().join(format!("{name}_history.csv"));
        write_metrics_csv(tcfg.rotation_regime, &metrics, fs::File::create(&mpath).unwrap()).unwrap();
        write_history_csv(&outcome.history, fs::File::create(&hpath).unwrap()).unwrap();
        for p in [&mpath, &hpath] {
            if fs::read_to_string(p).unwrap().starts_with(CSV_SCHEMA) {
                written += 1;
            }
        }
        report.push(format!("{name} {:.2}", metrics.overall_accuracy));
    }
    outcome(
        written == 2 * variants.len(),
        format!(
            "{} variants ran and wrote {written} CSVs; z/SO3 accuracy after 3 epochs on 60 clouds (orderings reported only): {}",
            variants.len(),
            report.join(", ")
        ),
    )
}

/// A neighborhood designed to stress the frame: symmetric, coincident or
/// collinear. Point 0 is the center.
fn adversarial_neighborhood(i: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let center = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let frame = sample_rotation_so3(rng);
    let local = |p: Point3| frame.apply(p) + center;
    let mut pts = vec![center];
    match i % 5 {
        // regular polygon around the center
        0 => {
            let n = 3 + i % 10;
            let r = rng.random_range(0.01..1.0);
            for j in 0..n {
                let a = std::f64::consts::TAU * j as f64 / n as f64;
                pts.push(local(Point3::new(r * a.cos(), r * a.sin(), 0.0)));
            }
        }
        // every point on the center
        1 => pts.extend(std::iter::repeat_n(center, 4 + i % 6)),
        // symmetric collinear set
        2 => {
            let d = Point3::new(1.0, 0.0, 0.0);
            for j in 1..=(2 + i % 4) {
                let t = 0.1 * j as f64;
                pts.push(local(d * t));
                pts.push(local(d * -t));
            }
        }
        // duplicates of the center plus one other point
        3 => {
            pts.extend(std::iter::repeat_n(center, 3 + i % 4));
            pts.push(local(Point3::new(0.0, 0.0, rng.random_range(0.1..1.0))));
        }
        // regular polygon with coincident copies of each vertex
        _ => {
            let n = 4 + i % 5;
            for j in 0..n {
                let a = std::f64::consts::TAU * j as f64 / n as f64;
                let v = local(Point3::new(a.cos(), a.sin(), 0.0));
                pts.push(v);
                pts.push(v);
            }
        }
    }
    pts
}

fn degeneracy_fuzzing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let (mut fallbacks, mut nulls, mut failures) = (0, 0, Vec::new());
    for i in 0..1000 {
        let pts = adversarial_neighborhood(i, &mut rng);
        let n = pts.len();
        let cfg = RIConvConfig::new(n, n, 2, 8);
        let layer = RIConvLayer::new(cfg, 3, &mut rng).unwrap();
        let geom = match layer.geometry(&pts) {
            Ok(g) => g,
            Err(e) => {
                failures.push(format!("#{i}: geometry failed: {e}"));
                continue;
            }
        };
        fallbacks += geom.fallback_frames();
        nulls += geom.null_frames();
        if geom.features().iter().any(|v| !v.is_finite()) {
            failures.push(format!("#{i}: non-finite features"));
        }
        let prev = Tensor::from_vec(&[n, 3], (0..3 * n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
        for mode in [Mode::Training, Mode::Inference] {
            match layer.forward(&[&geom as &Geometry], Some(&prev), mode) {
                Ok((y, _)) if y.all_finite() => {}
                Ok(_) => failures.push(format!("#{i}: non-finite activations")),
                Err(e) => failures.push(format!("#{i}: forward failed: {e}")),
            }
        }
    }
    outcome(
        failures.is_empty() && fallbacks > 0,
        format!(
            "1000 neighborhoods: {} failures{}, farthest-point fallback fired {fallbacks} times, {nulls} null frames",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

fn segmentation_smoke() -> Outcome {
    let start = Instant::now();
    let ds = make_dataset(&DatasetSpec {
        classes: vec![ShapeClass::Cylinder],
        per_class_train: 64,
        per_class_test: 20,
        n_points: 2048,
        jitter_sigma: 0.01,
        part_scheme: Some(PartScheme::CapBody),
        seed: 1010,
    })
    .unwrap();
    let cfg = NetworkConfig::segmentation(2048, 2).unwrap();
    let encoder: Vec<usize> = cfg.layer_configs.iter().map(|l| l.n_representatives).collect();
    let tcfg = TrainConfig {
        epochs: 30,
        seed: 1010,
        rotation_regime: RotationRegime::So3So3,
        ..TrainConfig::for_task(Task::Segmentation)
    };
    let model = train(Model::new(cfg, 1010).unwrap(), &tcfg, &ds.train).unwrap().model;
    let metrics = evaluate(&model, &ds.test, RotationRegime::So3So3, 1010).unwrap();
    let miou = metrics.mean_per_class_iou.unwrap_or(0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1011);
    let clouds = &ds.test[..20];
    let moved: Vec<PointCloud> = clouds.iter().map(|c| apply_rigid(c, &random_rigid(&mut rng))).collect();
    let same = part_labels(&model, clouds)
        .iter()
        .zip(part_labels(&model, &moved))
        .filter(|(a, b)| **a == *b)
        .count();
    let elapsed = start.elapsed();
    outcome(
        miou >= 0.80 && same == 20 && elapsed < Duration::from_secs(20 * 60),
        format!(
            "encoder 2048 -> {encoder:?}, 30 epochs on 64 cylinders: test mIoU {miou:.3} (need >= 0.80), \
             {same}/20 clouds with identical labels after a rigid transform, {elapsed:.0?} (limit 20 min)"
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    ("feature invariance", feature_invariance),
    ("network invariance", network_invariance),
    ("permutation invariance", permutation_invariance),
    ("gradient correctness", gradient_correctness),
    ("sampling oracles", sampling_oracles),
    ("rotation consistency experiment", consistency_experiment),
    ("raw xyz negative control", negative_control),
    ("ablation harness", ablation_harness),
    ("degeneracy fuzzing", degeneracy_fuzzing),
    ("segmentation smoke", segmentation_smoke),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {name}: {} [{:.1?}]", result.detail, start.elapsed());
        if !result.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

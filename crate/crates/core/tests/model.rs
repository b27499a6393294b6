use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use riconv::autodiff::{Adam, AdamConfig, Checkpoint};
use riconv::data::{format_xyz, gen_shape, load_xyz, make_dataset, parse_xyz, write_xyz, DatasetSpec, ShapeClass, ShapeSpec};
use riconv::geom::{Point3, PointCloud};
use riconv::model::{argmax, Model, NetworkConfig, Prediction};

fn shape(class: ShapeClass, n: usize, seed: u64) -> PointCloud {
    gen_shape(&ShapeSpec {
        shape_class: class,
        n_points: n,
        jitter_sigma: 0.01,
        part_scheme: None,
        seed,
    })
    .unwrap()
}

fn small_set() -> Vec<PointCloud> {
    make_dataset(&DatasetSpec {
        classes: ShapeClass::ALL.to_vec(),
        per_class_train: 2,
        per_class_test: 1,
        n_points: 128,
        jitter_sigma: 0.01,
        part_scheme: None,
        seed: 3,
    })
    .unwrap()
    .train
}

fn class_outputs(model: &Model, clouds: &[PointCloud]) -> Vec<riconv::model::ClassOutput> {
    model
        .predict(clouds)
        .unwrap()
        .into_iter()
        .map(|p| match p {
            Prediction::Class(c) => c,
            Prediction::Parts { .. } => panic!("classification model returned parts"),
        })
        .collect()
}

#[test]
fn prediction_is_the_mean_of_per_vector_logits() {
    let model = Model::new(NetworkConfig::classification(128, 3, 5).unwrap(), 11).unwrap();
    for out in class_outputs(&model, &small_set()) {
        let l = &out.per_vector_logits;
        let rows = l.shape()[0];
        for c in 0..out.mean_logits.len() {
            let mean = (0..rows).map(|r| l.row(r)[c]).sum::<f64>() / rows as f64;
            assert!((mean - out.mean_logits[c]).abs() < 1e-12);
        }
        assert_eq!(out.prediction, argmax(&out.mean_logits));
    }
}

#[test]
fn same_seed_gives_identical_models_and_training() {
    let cfg = NetworkConfig::classification(128, 2, 5).unwrap();
    let data = small_set();
    let run = || {
        let mut model = Model::new(cfg.clone(), 5).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        let losses: Vec<f64> = (0..3).map(|_| model.train_step(&data, &mut opt).unwrap().loss).collect();
        (losses, model.checkpoint(BTreeMap::new()).to_json())
    };
    let (la, ca) = run();
    let (lb, cb) = run();
    assert_eq!(la, lb);
    assert!(ca == cb);
    let mut other = Model::new(cfg, 6).unwrap();
    assert!(other.checkpoint(BTreeMap::new()).to_json() != ca);
}

#[test]
fn training_steps_reduce_the_loss() {
    let mut model = Model::new(NetworkConfig::classification(128, 2, 5).unwrap(), 1).unwrap();
    let data = small_set();
    let mut opt = Adam::new(AdamConfig::default());
    let first = model.train_step(&data, &mut opt).unwrap().loss;
    let mut last = first;
    for _ in 0..15 {
        last = model.train_step(&data, &mut opt).unwrap().loss;
        assert!(last.is_finite());
    }
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::new(NetworkConfig::classification(128, 3, 5).unwrap(), 2).unwrap();
    let data = small_set();
    let mut opt = Adam::new(AdamConfig::default());
    model.train_step(&data, &mut opt).unwrap();
    let path = dir.path().join("ckpt.json");
    model.checkpoint(BTreeMap::from([("note".into(), "x".into())])).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.metadata["note"], "x");
    let restored = Model::from_checkpoint(&loaded).unwrap();
    let a = class_outputs(&model, &data);
    let b = class_outputs(&restored, &data);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.mean_logits, y.mean_logits);
    }
}

#[test]
fn segmentation_labels_every_point() {
    let cfg = NetworkConfig::segmentation(256, 3).unwrap();
    let model = Model::new(cfg, 4).unwrap();
    let cloud = shape(ShapeClass::Cylinder, 256, 9);
    match &model.predict(std::slice::from_ref(&cloud)).unwrap()[0] {
        Prediction::Parts { logits, labels } => {
            assert_eq!(logits.shape(), &[256, 3]);
            assert_eq!(labels.len(), 256);
            assert!(labels.iter().all(|&l| l < 3));
        }
        Prediction::Class(_) => panic!("segmentation model returned a class"),
    }
}

#[test]
fn xyz_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let points: Vec<Point3> = (0..100)
        .map(|_| Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random::<f64>() * 1e-7))
        .collect();
    let cloud = PointCloud::new(points).unwrap();
    let text = format_xyz(&cloud);
    assert_eq!(parse_xyz(&text, "mem").unwrap().points(), cloud.points());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.xyz");
    write_xyz(&cloud, &path).unwrap();
    assert_eq!(load_xyz(&path).unwrap().points(), cloud.points());
}

#[test]
fn malformed_xyz_is_rejected() {
    assert!(parse_xyz("1 2\n", "mem").is_err());
    assert!(parse_xyz("1 2 nan\n", "mem").is_err());
    assert!(parse_xyz("", "mem").is_err());
}

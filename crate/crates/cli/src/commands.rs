use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use riconv::autodiff::Checkpoint;
use riconv::data::{load_dataset, load_xyz, make_dataset, write_dataset, Dataset, DatasetSpec};
use riconv::diagnostics::gradcheck_suite;
use riconv::model::{
    evaluate, run_experiment, train as fit, write_file, write_history_csv, write_metrics_csv, Metrics, Model,
    RotationRegime, Task, CSV_SCHEMA,
};

use crate::config::RunConfig;
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

fn require_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} not found: {}", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

/// File-name form of a regime: `z/SO3` becomes `z_SO3`.
fn slug(regime: RotationRegime) -> String {
    regime.name().replace('/', "_")
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let ds = match &cfg.dataset.dir {
        Some(dir) => {
            require_exists(dir, "dataset directory")?;
            load_dataset(dir)?
        }
        None => make_dataset(&DatasetSpec {
            classes: cfg.dataset.classes.clone(),
            per_class_train: cfg.dataset.per_class_train,
            per_class_test: cfg.dataset.per_class_test,
            n_points: cfg.n_points(),
            jitter_sigma: cfg.dataset.jitter_sigma,
            part_scheme: cfg.dataset.part_scheme,
            seed: cfg.dataset.seed,
        })?,
    };
    if ds.train.is_empty() || ds.test.is_empty() {
        return Err(CliError::Config("dataset needs both train and test clouds".into()));
    }
    if cfg.network.task == Task::Segmentation && ds.part_names.is_empty() {
        return Err(CliError::Config("segmentation needs a dataset with part labels".into()));
    }
    Ok(ds)
}

fn n_points_of(ds: &Dataset) -> Result<usize, CliError> {
    let n = ds.train[0].len();
    if ds.train.iter().chain(&ds.test).any(|c| c.len() != n) {
        return Err(CliError::Config("every cloud in the dataset must have the same number of points".into()));
    }
    Ok(n)
}

fn print_metrics(regime: RotationRegime, m: &Metrics) {
    match m.mean_per_class_iou {
        Some(iou) => println!("{:<8} accuracy {:.4}  mIoU {:.4}  ({} clouds)", regime.name(), m.overall_accuracy, iou, m.samples),
        None => println!("{:<8} accuracy {:.4}  ({} clouds)", regime.name(), m.overall_accuracy, m.samples),
    }
}

pub fn gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let dir = out.unwrap_or_else(|| cfg.output.dir.join("data"));
    let ds = load_data(cfg)?;
    create_dir(&dir)?;
    write_dataset(&ds, &dir)?;
    println!(
        "wrote {} train and {} test clouds ({} classes) to {}",
        ds.train.len(),
        ds.test.len(),
        ds.class_names.len(),
        dir.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_data(cfg)?;
    let net = cfg.network_config(n_points_of(&ds)?, ds.class_names.len(), ds.part_names.len())?;
    let tcfg = cfg.train_config();
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    let outcome = fit(Model::new(net, tcfg.seed)?, &tcfg, &ds.train)?;
    let metrics = evaluate(&outcome.model, &ds.test, tcfg.rotation_regime, tcfg.seed)?;

    let mut model = outcome.model;
    let meta = BTreeMap::from([
        ("best_epoch".to_string(), outcome.best_epoch.to_string()),
        ("regime".to_string(), tcfg.rotation_regime.name().to_string()),
        ("seed".to_string(), tcfg.seed.to_string()),
    ]);
    model.checkpoint(meta).save(&dir.join(CHECKPOINT_FILE))?;
    write_file(&dir.join("history.csv"), |w| write_history_csv(&outcome.history, w))?;
    write_file(&dir.join("metrics.csv"), |w| write_metrics_csv(tcfg.rotation_regime, &metrics, w))?;
    println!("trained {} epochs, best epoch {}", outcome.history.len(), outcome.best_epoch);
    print_metrics(tcfg.rotation_regime, &metrics);
    println!("outputs in {}", dir.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let path = checkpoint.unwrap_or_else(|| cfg.output.dir.join(CHECKPOINT_FILE));
    require_exists(&path, "checkpoint")?;
    let model = Model::from_checkpoint(&Checkpoint::load(&path)?)?;
    let ds = load_data(cfg)?;
    if n_points_of(&ds)? != model.config().n_points {
        return Err(CliError::Config(format!(
            "checkpoint {} expects {} points per cloud, the dataset has {}",
            path.display(),
            model.config().n_points,
            n_points_of(&ds)?
        )));
    }
    let regime = cfg.train.regime;
    let metrics = evaluate(&model, &ds.test, regime, cfg.train.seed)?;
    create_dir(&cfg.output.dir)?;
    let out = cfg.output.dir.join(format!("eval_{}.csv", slug(regime)));
    write_file(&out, |w| write_metrics_csv(regime, &metrics, w))?;
    print_metrics(regime, &metrics);
    println!("metrics in {}", out.display());
    Ok(())
}

pub fn experiment(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_data(cfg)?;
    let net = cfg.network_config(n_points_of(&ds)?, ds.class_names.len(), ds.part_names.len())?;
    let tcfg = cfg.train_config();
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    let result = run_experiment(&net, &tcfg, &ds.train, &ds.test, &cfg.experiment.regimes)?;
    write_file(&dir.join("table.csv"), |w| result.write_table_csv(w))?;
    for row in &result.rows {
        let s = slug(row.regime);
        write_file(&dir.join(format!("experiment_{s}_metrics.csv")), |w| {
            write_metrics_csv(row.regime, &row.metrics, w)
        })?;
        write_file(&dir.join(format!("experiment_{s}_history.csv")), |w| {
            write_history_csv(&row.history, w)
        })?;
    }
    for row in &result.rows {
        print_metrics(row.regime, &row.metrics);
    }
    println!("acc std  {:.4}", result.accuracy_std);
    println!("table in {}", dir.join("table.csv").display());
    Ok(())
}

pub fn features(input: &Path, layer: usize, checkpoint: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    require_exists(input, "input cloud")?;
    require_exists(checkpoint, "checkpoint")?;
    let model = Model::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let depth = model.encoder().len();
    if layer == 0 || layer > depth {
        return Err(CliError::Config(format!("--layer must be between 1 and {depth}, got {layer}")));
    }
    let cloud = load_xyz(input)?;
    let out_layer = model.encoder_features(&cloud, layer - 1)?;

    let mut buf = Vec::new();
    let io = |e: std::io::Error| CliError::Runtime(riconv::Error::InvalidInput(format!("writing features: {e}")));
    writeln!(buf, "{CSV_SCHEMA} features").map_err(io)?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let channels = out_layer.features.cols();
        let mut header = vec!["rep".to_string(), "x".into(), "y".into(), "z".into()];
        header.extend((0..channels).map(|c| format!("f{c}")));
        w.write_record(&header).map_err(riconv::Error::from)?;
        for (r, p) in out_layer.representative_cloud.points().iter().enumerate() {
            let mut rec = vec![r.to_string(), p.x.to_string(), p.y.to_string(), p.z.to_string()];
            rec.extend(out_layer.features.row(r).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(riconv::Error::from)?;
        }
        w.flush().map_err(io)?;
    }
    match out {
        Some(path) => {
            fs::write(&path, &buf).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?
        }
        None => std::io::stdout().write_all(&buf).map_err(io)?,
    }
    Ok(())
}

pub fn gradcheck(seed: u64, out: Option<PathBuf>) -> Result<(), CliError> {
    let entries = gradcheck_suite(seed)?;
    println!("{:<24} {:>12} {:>10}  worst element", "layer", "max rel err", "limit");
    for e in &entries {
        println!(
            "{:<24} {:>12.3e} {:>10.0e}  {}{}",
            e.report.name,
            e.report.max_relative_error,
            e.tolerance,
            e.report.worst,
            if e.passed() { "" } else { "  FAILED" }
        );
    }
    if let Some(path) = out {
        let mut buf = format!("{CSV_SCHEMA} gradcheck\nlayer,max_relative_error,tolerance,passed\n");
        for e in &entries {
            buf += &format!(
                "{},{:e},{:e},{}\n",
                e.report.name,
                e.report.max_relative_error,
                e.tolerance,
                e.passed()
            );
        }
        fs::write(&path, buf).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    }
    let failed: Vec<&str> = entries
        .iter()
        .filter(|e| !e.passed())
        .map(|e| e.report.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

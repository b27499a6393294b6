//! Run configuration: one TOML file per run. Every section and key is
//! optional; omitted keys take the defaults listed on each field.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use riconv::data::{PartScheme, ShapeClass};
use riconv::model::{
    ClassifierMode, NetworkConfig, RotationRegime, Task, TrainConfig, CLASSIFICATION_BATCH, DEFAULT_LEARNING_RATE,
    DEFAULT_VALIDATION_FRACTION, SEGMENTATION_BATCH,
};
use riconv::riconv::FeatureMode;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub experiment: ExperimentSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Load a dataset written by `gen-data` instead of generating one.
    pub dir: Option<PathBuf>,
    /// Default: all five shapes. Class label `i` is `classes[i]`.
    pub classes: Vec<ShapeClass>,
    /// Default 40.
    pub per_class_train: usize,
    /// Default 20.
    pub per_class_test: usize,
    /// Default 1024 for classification, 2048 for segmentation.
    pub n_points: Option<usize>,
    /// Default 0.01.
    pub jitter_sigma: f64,
    /// Required for segmentation; default none.
    pub part_scheme: Option<PartScheme>,
    /// Default 1.
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            dir: None,
            classes: ShapeClass::ALL.to_vec(),
            per_class_train: 40,
            per_class_test: 20,
            n_points: None,
            jitter_sigma: 0.01,
            part_scheme: None,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    /// Default classification.
    pub task: Task,
    /// Encoder operators for classification, 1 to 4. Default 3.
    pub n_layers: usize,
    /// Default full.
    pub feature_mode: FeatureMode,
    /// Default true.
    pub lift_mlp: bool,
    /// Default multi_vector.
    pub classifier: ClassifierMode,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            task: Task::Classification,
            n_layers: 3,
            feature_mode: FeatureMode::Full,
            lift_mlp: true,
            classifier: ClassifierMode::MultiVector,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Default 32 for classification, 16 for segmentation.
    pub batch_size: Option<usize>,
    /// Default 50.
    pub epochs: usize,
    /// Default 0.001.
    pub learning_rate: f64,
    /// Default 0.
    pub seed: u64,
    /// Default z/z.
    pub regime: RotationRegime,
    /// Default 0.1.
    pub validation_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: None,
            epochs: 50,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            regime: RotationRegime::ZZ,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// Default z/z, SO3/SO3, z/SO3.
    pub regimes: Vec<RotationRegime>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            regimes: RotationRegime::TABLE.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Default `runs/default`, relative to the working directory.
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

/// Command-line values that replace config entries.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub regime: Option<RotationRegime>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// `--seed` sets the training seed only, so a different initialization
    /// is evaluated on the same data.
    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(r) = o.regime {
            self.train.regime = r;
            self.experiment.regimes = vec![r];
        }
        if let Some(d) = &o.output_dir {
            self.output.dir = d.clone();
        }
        self.check()
    }

    fn check(&self) -> Result<(), CliError> {
        let bad = |key: &str, why: &str| Err(CliError::Config(format!("{key}: {why}")));
        if self.dataset.dir.is_none() {
            if self.dataset.classes.is_empty() {
                return bad("dataset.classes", "must list at least one shape");
            }
            if self.dataset.per_class_train == 0 {
                return bad("dataset.per_class_train", "must be at least 1");
            }
            if self.dataset.per_class_test == 0 {
                return bad("dataset.per_class_test", "must be at least 1");
            }
        }
        if !(self.dataset.jitter_sigma >= 0.0 && self.dataset.jitter_sigma.is_finite()) {
            return bad("dataset.jitter_sigma", "must be finite and non-negative");
        }
        if self.network.task == Task::Segmentation && self.dataset.dir.is_none() && self.dataset.part_scheme.is_none() {
            return bad("dataset.part_scheme", "segmentation needs a part scheme (cap_body or faces)");
        }
        if let Some(s) = self.dataset.part_scheme {
            if let Some(c) = self.dataset.classes.iter().find(|c| !s.supports(**c)) {
                return bad("dataset.part_scheme", &format!("{s:?} has no parts for shape '{c}'"));
            }
        }
        if !(1..=4).contains(&self.network.n_layers) {
            return bad("network.n_layers", "must be between 1 and 4");
        }
        if self.train.batch_size == Some(0) {
            return bad("train.batch_size", "must be at least 1");
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return bad("train.learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.train.validation_fraction) {
            return bad("train.validation_fraction", "must be in [0, 1)");
        }
        if self.experiment.regimes.is_empty() {
            return bad("experiment.regimes", "must list at least one regime");
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        self.dataset.n_points.unwrap_or(match self.network.task {
            Task::Classification => riconv::model::CLASSIFICATION_POINTS,
            Task::Segmentation => riconv::model::SEGMENTATION_POINTS,
        })
    }

    /// Network for a dataset with `n_classes` classes and `n_parts` parts.
    pub fn network_config(&self, n_points: usize, n_classes: usize, n_parts: usize) -> Result<NetworkConfig, CliError> {
        let cfg = match self.network.task {
            Task::Classification => NetworkConfig::classification(n_points, self.network.n_layers, n_classes),
            Task::Segmentation => NetworkConfig::segmentation(n_points, n_parts),
        }
        .map_err(|e| CliError::Config(format!("network: {e}")))?;
        Ok(cfg
            .with_feature_mode(self.network.feature_mode)
            .with_lift_mlp(self.network.lift_mlp)
            .with_classifier_mode(self.network.classifier))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size.unwrap_or(match self.network.task {
                Task::Classification => CLASSIFICATION_BATCH,
                Task::Segmentation => SEGMENTATION_BATCH,
            }),
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            seed: self.train.seed,
            rotation_regime: self.train.regime,
            validation_fraction: self.train.validation_fraction,
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::RotationKind;
use crate::riconv::{DeconvConfig, FeatureMode, RIConvConfig, DEFAULT_INTERP_NEIGHBORS};

/// Default input size for classification.
pub const CLASSIFICATION_POINTS: usize = 1024;
/// Default input size for part segmentation.
pub const SEGMENTATION_POINTS: usize = 2048;
pub const CLASSIFICATION_BATCH: usize = 32;
pub const SEGMENTATION_BATCH: usize = 16;
pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    /// The head runs on every final representative; logits are averaged.
    MultiVector,
    /// Final features are max-pooled to one vector before the head.
    SingleVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub task: Task,
    pub n_points: usize,
    /// Encoder operators, applied in order.
    pub layer_configs: Vec<RIConvConfig>,
    /// Decoder stages (segmentation only), coarsest first.
    pub decoder_configs: Vec<DeconvConfig>,
    pub n_classes: usize,
    pub n_parts: usize,
    pub classifier_mode: ClassifierMode,
    /// Hidden widths of the fully connected head.
    pub head_widths: Vec<usize>,
}

/// Encoder stage: (points divisor, k, bins, output channels).
const CLASSIFICATION_STAGES: [(usize, usize, usize, usize); 3] = [(4, 64, 4, 128), (8, 32, 2, 256), (16, 16, 1, 512)];
/// Extra full-resolution stage used by the four-layer variant.
const DENSE_STAGE: (usize, usize, usize, usize) = (1, 32, 2, 64);
const SEGMENTATION_STAGES: [(usize, usize, usize, usize); 3] = [(4, 64, 4, 128), (16, 32, 2, 256), (64, 16, 1, 512)];
/// Decoder stage: (k, bins, MLP width, output channels), coarsest first.
const DECODER_STAGES: [(usize, usize, usize, usize); 3] = [(16, 1, 256, 256), (32, 2, 128, 128), (16, 1, 64, 128)];

impl NetworkConfig {
    /// Classification network with `n_layers` (1 to 4) operators.
    ///
    /// Three layers reduce to N/4, N/8, N/16 representatives. Two layers keep
    /// the first and last of those, one layer only the first, and four layers
    /// add a full-resolution operator in front.
    pub fn classification(n_points: usize, n_layers: usize, n_classes: usize) -> Result<Self> {
        let stages: Vec<_> = match n_layers {
            1 => vec![CLASSIFICATION_STAGES[0]],
            2 => vec![CLASSIFICATION_STAGES[0], CLASSIFICATION_STAGES[2]],
            3 => CLASSIFICATION_STAGES.to_vec(),
            4 => std::iter::once(DENSE_STAGE).chain(CLASSIFICATION_STAGES).collect(),
            n => return Err(Error::Config(format!("n_layers must be between 1 and 4, got {n}"))),
        };
        let cfg = Self {
            task: Task::Classification,
            n_points,
            layer_configs: stages
                .iter()
                .map(|&(div, k, bins, out)| RIConvConfig::new(n_points / div, k, bins, out))
                .collect(),
            decoder_configs: Vec::new(),
            n_classes,
            n_parts: 0,
            classifier_mode: ClassifierMode::MultiVector,
            head_widths: vec![256],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Encoder N → N/4 → N/16 → N/64 with a mirrored decoder.
    pub fn segmentation(n_points: usize, n_parts: usize) -> Result<Self> {
        let layer_configs: Vec<_> = SEGMENTATION_STAGES
            .iter()
            .map(|&(div, k, bins, out)| RIConvConfig::new(n_points / div, k, bins, out))
            .collect();
        let fine_sizes = [n_points / 16, n_points / 4, n_points];
        let decoder_configs = DECODER_STAGES
            .iter()
            .zip(fine_sizes)
            .map(|(&(k, bins, mlp, out), fine)| DeconvConfig {
                interp_neighbors: DEFAULT_INTERP_NEIGHBORS,
                mlp_out: mlp,
                conv: RIConvConfig::new(fine, k, bins, out),
            })
            .collect();
        let cfg = Self {
            task: Task::Segmentation,
            n_points,
            layer_configs,
            decoder_configs,
            n_classes: 0,
            n_parts,
            classifier_mode: ClassifierMode::MultiVector,
            head_widths: Vec::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_feature_mode(mut self, mode: FeatureMode) -> Self {
        for c in self.all_operator_configs_mut() {
            c.feature_mode = mode;
        }
        self
    }

    pub fn with_lift_mlp(mut self, on: bool) -> Self {
        for c in self.all_operator_configs_mut() {
            c.use_lift_mlp = on;
        }
        self
    }

    pub fn with_classifier_mode(mut self, mode: ClassifierMode) -> Self {
        self.classifier_mode = mode;
        self
    }

    fn all_operator_configs_mut(&mut self) -> impl Iterator<Item = &mut RIConvConfig> {
        self.layer_configs
            .iter_mut()
            .chain(self.decoder_configs.iter_mut().map(|d| &mut d.conv))
    }

    pub fn feature_mode(&self) -> FeatureMode {
        self.layer_configs
            .first()
            .map(|c| c.feature_mode)
            .unwrap_or(FeatureMode::Full)
    }

    /// Checks layer counts and that every operator fits the point count it
    /// receives.
    pub fn validate(&self) -> Result<()> {
        let n_layers = self.layer_configs.len();
        if !(1..=4).contains(&n_layers) {
            return Err(Error::Config(format!("between 1 and 4 layers required, got {n_layers}")));
        }
        let mut available = self.n_points;
        let mut sizes = vec![available];
        for (i, c) in self.layer_configs.iter().enumerate() {
            c.validate()
                .map_err(|e| Error::Config(format!("layer {i}: {}", strip(e))))?;
            if c.n_representatives > available || c.k_neighbors > available {
                return Err(Error::Config(format!(
                    "layer {i} needs {} representatives and {} neighbors but receives {available} points",
                    c.n_representatives, c.k_neighbors
                )));
            }
            available = c.n_representatives;
            sizes.push(available);
        }
        match self.task {
            Task::Classification => {
                if self.n_classes < 1 {
                    return Err(Error::Config("n_classes must be at least 1".into()));
                }
                if self.head_widths.contains(&0) {
                    return Err(Error::Config("head widths must be positive".into()));
                }
            }
            Task::Segmentation => {
                if self.n_parts < 1 {
                    return Err(Error::Config("n_parts must be at least 1".into()));
                }
                if self.decoder_configs.len() != n_layers {
                    return Err(Error::Config(format!(
                        "segmentation needs one decoder stage per encoder layer ({n_layers}), got {}",
                        self.decoder_configs.len()
                    )));
                }
                for (s, d) in self.decoder_configs.iter().enumerate() {
                    let fine = sizes[n_layers - 1 - s];
                    d.conv
                        .validate()
                        .map_err(|e| Error::Config(format!("decoder stage {s}: {}", strip(e))))?;
                    if d.conv.n_representatives != fine || d.conv.k_neighbors > fine {
                        return Err(Error::Config(format!(
                            "decoder stage {s} runs on {fine} points (needs n_representatives = {fine}, k ≤ {fine})"
                        )));
                    }
                    if d.interp_neighbors == 0 || d.mlp_out == 0 {
                        return Err(Error::Config(format!("decoder stage {s}: widths must be positive")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Train/test rotation pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RotationRegime {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "z/z")]
    ZZ,
    #[serde(rename = "SO3/SO3")]
    So3So3,
    #[serde(rename = "z/SO3")]
    ZSo3,
}

impl RotationRegime {
    pub const TABLE: [RotationRegime; 3] = [RotationRegime::ZZ, RotationRegime::So3So3, RotationRegime::ZSo3];

    pub fn name(self) -> &'static str {
        match self {
            RotationRegime::None => "none",
            RotationRegime::ZZ => "z/z",
            RotationRegime::So3So3 => "SO3/SO3",
            RotationRegime::ZSo3 => "z/SO3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RotationRegime::None),
            "z/z" => Ok(RotationRegime::ZZ),
            "SO3/SO3" => Ok(RotationRegime::So3So3),
            "z/SO3" => Ok(RotationRegime::ZSo3),
            other => Err(Error::Config(format!(
                "unknown rotation regime '{other}' (expected none, z/z, SO3/SO3 or z/SO3)"
            ))),
        }
    }

    pub fn train_side(self) -> RotationKind {
        match self {
            RotationRegime::None => RotationKind::None,
            RotationRegime::ZZ | RotationRegime::ZSo3 => RotationKind::Z,
            RotationRegime::So3So3 => RotationKind::So3,
        }
    }

    pub fn test_side(self) -> RotationKind {
        match self {
            RotationRegime::None => RotationKind::None,
            RotationRegime::ZZ => RotationKind::Z,
            RotationRegime::So3So3 | RotationRegime::ZSo3 => RotationKind::So3,
        }
    }
}

impl std::fmt::Display for RotationRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub rotation_regime: RotationRegime,
    /// Share of the training set held out for checkpoint selection.
    pub validation_fraction: f64,
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            batch_size: match task {
                Task::Classification => CLASSIFICATION_BATCH,
                Task::Segmentation => SEGMENTATION_BATCH,
            },
            epochs: 50,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            rotation_regime: RotationRegime::ZZ,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_classification_shapes() {
        let cfg = NetworkConfig::classification(CLASSIFICATION_POINTS, 3, 40).unwrap();
        let reps: Vec<_> = cfg.layer_configs.iter().map(|c| c.n_representatives).collect();
        let ks: Vec<_> = cfg.layer_configs.iter().map(|c| c.k_neighbors).collect();
        let bins: Vec<_> = cfg.layer_configs.iter().map(|c| c.n_bins).collect();
        assert_eq!(reps, [256, 128, 64]);
        assert_eq!(ks, [64, 32, 16]);
        assert_eq!(bins, [4, 2, 1]);
    }

    #[test]
    fn segmentation_shapes() {
        let cfg = NetworkConfig::segmentation(SEGMENTATION_POINTS, 2).unwrap();
        let reps: Vec<_> = cfg.layer_configs.iter().map(|c| c.n_representatives).collect();
        assert_eq!(reps, [512, 128, 32]);
        let fine: Vec<_> = cfg.decoder_configs.iter().map(|d| d.conv.n_representatives).collect();
        assert_eq!(fine, [128, 512, 2048]);
    }

    #[test]
    fn layer_and_point_ranges_construct() {
        for layers in 1..=4 {
            for n in [128, 256, 512, 1024] {
                NetworkConfig::classification(n, layers, 5).unwrap();
            }
        }
        assert!(NetworkConfig::classification(1024, 0, 5).is_err());
        assert!(NetworkConfig::classification(1024, 5, 5).is_err());
        assert!(NetworkConfig::classification(32, 3, 5).is_err());
    }

    #[test]
    fn regime_names_round_trip() {
        for r in [RotationRegime::None, RotationRegime::ZZ, RotationRegime::So3So3, RotationRegime::ZSo3] {
            assert_eq!(RotationRegime::parse(r.name()).unwrap(), r);
            let json = serde_json::to_string(&r).unwrap();
            assert_eq!(json, format!("\"{}\"", r.name()));
        }
        assert!(RotationRegime::parse("so3").is_err());
        assert_eq!(RotationRegime::ZSo3.train_side(), RotationKind::Z);
        assert_eq!(RotationRegime::ZSo3.test_side(), RotationKind::So3);
    }

    #[test]
    fn training_defaults() {
        let t = TrainConfig::for_task(Task::Classification);
        assert_eq!((t.batch_size, t.learning_rate), (32, 0.001));
        assert_eq!(TrainConfig::for_task(Task::Segmentation).batch_size, 16);
    }
}

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::par;
use crate::seed::derive_seed;

use super::io::{load_xyz, write_xyz};
use super::shapes::{gen_shape, PartScheme, ShapeClass, ShapeSpec};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub class_names: Vec<String>,
    pub part_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Class label `i` is `classes[i]`.
    pub classes: Vec<ShapeClass>,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub n_points: usize,
    pub jitter_sigma: f64,
    pub part_scheme: Option<PartScheme>,
    pub seed: u64,
}

#[derive(Clone, Copy)]
enum Split {
    Train = 0,
    Test = 1,
}

/// Balanced synthetic dataset. Each cloud's seed depends on its shape,
/// split and index but not on the class order, so reordering `classes`
/// only relabels the same clouds.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.classes.is_empty() || spec.per_class_train == 0 || spec.per_class_test == 0 {
        return Err(Error::Config("need at least one class and one cloud per class and split".into()));
    }
    for (i, c) in spec.classes.iter().enumerate() {
        if spec.classes[..i].contains(c) {
            return Err(Error::Config(format!("class '{c}' listed twice")));
        }
    }
    let build = |split: Split, per_class: usize| -> Result<Vec<PointCloud>> {
        let jobs: Vec<(usize, ShapeClass, usize)> = spec
            .classes
            .iter()
            .enumerate()
            .flat_map(|(label, &class)| (0..per_class).map(move |i| (label, class, i)))
            .collect();
        par::map_slice(&jobs, |&(label, class, i)| {
            let cloud = gen_shape(&ShapeSpec {
                shape_class: class,
                n_points: spec.n_points,
                jitter_sigma: spec.jitter_sigma,
                part_scheme: spec.part_scheme,
                seed: derive_seed(spec.seed, &[class.id(), split as u64, i as u64]),
            })?;
            Ok(cloud.with_class_label(label))
        })
        .into_iter()
        .collect()
    };
    Ok(Dataset {
        train: build(Split::Train, spec.per_class_train)?,
        test: build(Split::Test, spec.per_class_test)?,
        class_names: spec.classes.iter().map(|c| c.name().to_string()).collect(),
        part_names: spec.part_scheme.map(PartScheme::part_names).unwrap_or_default(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    split: String,
    file: String,
    class_index: usize,
    class_name: String,
}

/// Writes `train/NNNNN.xyz`, `test/NNNNN.xyz` and a manifest mapping files
/// to class labels. Part names go to `parts.txt` when present.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
    for (split, clouds) in [("train", &dataset.train), ("test", &dataset.test)] {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, cloud) in clouds.iter().enumerate() {
            let file = format!("{split}/{i:05}.xyz");
            write_xyz(cloud, &dir.join(&file))?;
            let class_index = cloud
                .class_label()
                .ok_or_else(|| Error::InvalidInput(format!("{file} has no class label")))?;
            manifest.serialize(ManifestRow {
                split: split.to_string(),
                file,
                class_index,
                class_name: dataset.class_names.get(class_index).cloned().unwrap_or_default(),
            })?;
        }
    }
    manifest.flush().map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))?;
    if !dataset.part_names.is_empty() {
        let p = dir.join("parts.txt");
        fs::write(&p, dataset.part_names.join("\n") + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Reads a directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST_FILE);
    let mut reader = csv::Reader::from_path(&manifest).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&manifest, io),
        other => Error::InvalidInput(format!("{}: {other:?}", manifest.display())),
    })?;
    let mut ds = Dataset {
        train: Vec::new(),
        test: Vec::new(),
        class_names: Vec::new(),
        part_names: Vec::new(),
    };
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: manifest.display().to_string(),
            line: i + 2,
            message: e.to_string(),
        })?;
        let cloud = load_xyz(&dir.join(&row.file))?.with_class_label(row.class_index);
        if ds.class_names.len() <= row.class_index {
            ds.class_names.resize(row.class_index + 1, String::new());
        }
        ds.class_names[row.class_index] = row.class_name;
        match row.split.as_str() {
            "train" => ds.train.push(cloud),
            "test" => ds.test.push(cloud),
            other => {
                return Err(Error::Parse {
                    path: manifest.display().to_string(),
                    line: i + 2,
                    message: format!("unknown split '{other}'"),
                })
            }
        }
    }
    let parts = dir.join("parts.txt");
    if parts.exists() {
        let text = fs::read_to_string(&parts).map_err(|e| Error::io(&parts, e))?;
        ds.part_names = text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect();
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec {
            classes: ShapeClass::ALL.to_vec(),
            per_class_train: 40,
            per_class_test: 20,
            n_points: 32,
            jitter_sigma: 0.01,
            part_scheme: None,
            seed: 11,
        }
    }

    #[test]
    fn split_sizes_and_balance() {
        let ds = make_dataset(&spec()).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (200, 100));
        for label in 0..5 {
            assert_eq!(ds.train.iter().filter(|c| c.class_label() == Some(label)).count(), 40);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(make_dataset(&spec()).unwrap(), make_dataset(&spec()).unwrap());
        let other = make_dataset(&DatasetSpec { seed: 12, ..spec() }).unwrap();
        assert_ne!(other.train[0], make_dataset(&spec()).unwrap().train[0]);
    }

    #[test]
    fn class_order_only_relabels() {
        let a = make_dataset(&spec()).unwrap();
        let mut reversed = spec();
        reversed.classes.reverse();
        let b = make_dataset(&reversed).unwrap();
        let key = |ds: &Dataset| {
            let mut v: Vec<(String, String)> = ds
                .train
                .iter()
                .chain(&ds.test)
                .map(|c| (ds.class_names[c.class_label().unwrap()].clone(), format!("{:?}", c.points())))
                .collect();
            v.sort();
            v
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn rejects_duplicates_and_empty() {
        let mut s = spec();
        s.classes.push(ShapeClass::Cube);
        assert!(make_dataset(&s).is_err());
        assert!(make_dataset(&DatasetSpec { per_class_test: 0, ..spec() }).is_err());
    }
}

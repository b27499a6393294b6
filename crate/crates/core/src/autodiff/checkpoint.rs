//! Parameter checkpoints: a versioned JSON document mapping tensor names to
//! shaped arrays. Floats are written in shortest round-trip form, so
//! save/load is lossless.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::layers::Parameters;

pub const CHECKPOINT_FORMAT: &str = "riconv-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn capture<P: Parameters + ?Sized>(model: &mut P, metadata: BTreeMap<String, String>) -> Self {
        let mut tensors = Vec::new();
        model.visit_tensors("", &mut |name, t, _| {
            tensors.push(NamedArray {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
        });
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            metadata,
            tensors,
        }
    }

    /// Copies stored values into `model`. Every model tensor must be present
    /// with an identical shape, and no stored tensor may be left unused.
    pub fn restore<P: Parameters + ?Sized>(&self, model: &mut P) -> Result<()> {
        let by_name: BTreeMap<&str, &NamedArray> = self.tensors.iter().map(|a| (a.name.as_str(), a)).collect();
        let mut used = 0;
        let mut problem = None;
        model.visit_tensors("", &mut |name, t, _| {
            if problem.is_some() {
                return;
            }
            match by_name.get(name) {
                None => problem = Some(format!("missing tensor {name}")),
                Some(a) if a.shape != t.shape() || a.data.len() != t.len() => {
                    problem = Some(format!("tensor {name}: stored shape {:?}, model expects {:?}", a.shape, t.shape()))
                }
                Some(a) => {
                    t.data_mut().copy_from_slice(&a.data);
                    used += 1;
                }
            }
        });
        if let Some(p) = problem {
            return Err(Error::Checkpoint(p));
        }
        if used != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model uses {used}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        for a in &ck.tensors {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Checkpoint(format!("tensor {} has inconsistent shape", a.name)));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

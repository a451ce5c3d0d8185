//! Versioned JSON model files. Tensors are stored row-major as 64-bit floats;
//! JSON numbers are written in shortest round-trip form, so save/load is exact.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::classification::{predict_proba, OneVsAll};
use crate::datasets::{Normalizer, TaskKind};
use crate::error::{IgnError, Result};
use crate::model::{IgnParameters, ModelConfig};

pub const FORMAT: &str = "ign-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Heads {
    Single { params: IgnParameters },
    OneVsAll { heads: Vec<IgnParameters> },
}

impl Heads {
    pub fn all(&self) -> Vec<&IgnParameters> {
        match self {
            Heads::Single { params } => vec![params],
            Heads::OneVsAll { heads } => heads.iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub task: TaskKind,
    pub config: ModelConfig,
    pub heads: Heads,
    pub normalizer: Option<Normalizer>,
}

impl ModelFile {
    pub fn new(task: TaskKind, config: ModelConfig, heads: Heads, normalizer: Option<Normalizer>) -> Self {
        ModelFile {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            task,
            config,
            heads,
            normalizer,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| IgnError::Schema(format!("{}: {e}", path.display())))?;
        match value.get("format").and_then(|v| v.as_str()) {
            Some(FORMAT) => {}
            _ => return Err(IgnError::Schema(format!("{} is not a model file", path.display()))),
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            other => {
                return Err(IgnError::Schema(format!(
                    "unsupported model file version {other:?} (expected {FORMAT_VERSION})"
                )))
            }
        }
        let file: ModelFile =
            serde_json::from_value(value).map_err(|e| IgnError::Schema(format!("{}: {e}", path.display())))?;
        for h in file.heads.all() {
            h.validate()?;
        }
        Ok(file)
    }

    /// Features in model space, after checking the column count.
    pub fn prepare_inputs(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(IgnError::Schema(format!(
                "model expects {} feature columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        match &self.normalizer {
            Some(n) => n.transform_x(x),
            None => Ok(x.clone()),
        }
    }

    /// Per-class probabilities (`n × 1` for a single binary head).
    pub fn class_probabilities(&self, x_model: &Array2<f64>) -> Result<Array2<f64>> {
        match &self.heads {
            Heads::Single { params } => {
                let p = predict_proba(params, x_model)?;
                Ok(p.insert_axis(ndarray::Axis(1)))
            }
            Heads::OneVsAll { heads } => OneVsAll { heads: heads.clone() }.predict_proba(x_model),
        }
    }
}

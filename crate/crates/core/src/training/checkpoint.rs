//! Self-describing JSON checkpoints. Floats are written in shortest
//! round-trip form and parsed exactly, so save/load is bit-preserving.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::dataset::Dims;
use crate::error::{Error, Result};
use crate::graph::{Mat, ParamStore};
use crate::training::model::Model;
use crate::training::optimizer::AdamWState;

pub const CHECKPOINT_FORMAT: &str = "xmrs-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, (rows, cols): (usize, usize)) -> Self {
        Tensor {
            name: name.to_string(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_mat(name: &str, m: &Mat) -> Self {
        Tensor {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().copied().collect(),
        }
    }

    pub fn to_mat(&self) -> Result<Mat> {
        Mat::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", self.name)))
    }
}

pub fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, name, v)| Tensor::from_mat(name, v)).collect()
}

/// Overwrites `store` with `tensors`, which must match it name-for-name and
/// shape-for-shape.
pub fn restore(store: &mut ParamStore, tensors: &[Tensor]) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, t) in ids.into_iter().zip(tensors) {
        if store.name(id) != t.name {
            return Err(Error::Checkpoint(format!(
                "expected tensor {}, found {}",
                store.name(id),
                t.name
            )));
        }
        let value = t.to_mat()?;
        if value.dim() != store.get(id).dim() {
            return Err(Error::Checkpoint(format!("tensor {} has the wrong shape", t.name)));
        }
        *store.get_mut(id) = value;
    }
    Ok(())
}

/// Best-validation snapshot carried inside resumable checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub valid_mae: f64,
    pub params: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub dims: Dims,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub params: Vec<Tensor>,
    /// Absent in inference-only checkpoints.
    pub optimizer: Option<AdamWState>,
    pub best: Option<BestSnapshot>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {:?}", self.format)));
        }
        let mut model = Model::new(&self.config, &self.dims)?;
        restore(model.store_mut(), &self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("cannot serialize: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: source.line(),
            source,
        })
    }
}

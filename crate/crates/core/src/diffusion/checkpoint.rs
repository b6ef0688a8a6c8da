//! Checkpoint serialization: named parameter arrays plus the metadata needed
//! to resume training or sample from a saved model.
//!
//! Checkpoints are JSON. `f64` values survive the round trip exactly (the
//! serializer emits shortest-round-trip decimal), so a resumed run continues
//! bit-identically.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffusion::schedule::ScheduleConfig;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ParamStore};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// A dense matrix in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ArrayData {
    pub fn from_array(a: &Array2<f64>) -> Self {
        ArrayData {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::invalid(format!(
                "array data holds {} values for a {}x{} shape",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| Error::invalid(format!("array reshape failed: {e}")))
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub m: ArrayData,
    pub v: ArrayData,
}

/// Optimizer state carried across a save/resume boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    /// Number of applied updates (drives bias correction).
    pub step: usize,
    pub slots: BTreeMap<String, AdamSlot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Training step the parameters correspond to.
    pub step: usize,
    pub dims: ModelDims,
    pub schedule: ScheduleConfig,
    /// Hash of the run configuration, for detecting mismatched resumes.
    pub config_hash: String,
    pub params: BTreeMap<String, ArrayData>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(
        step: usize,
        dims: ModelDims,
        schedule: ScheduleConfig,
        config_hash: String,
        params: &ParamStore,
        optimizer: Option<OptimizerState>,
    ) -> Self {
        let params = params
            .iter()
            .map(|(name, array)| (name.clone(), ArrayData::from_array(array)))
            .collect();
        Checkpoint { format_version: CHECKPOINT_FORMAT_VERSION, step, dims, schedule, config_hash, params, optimizer }
    }

    pub fn param_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::default();
        for (name, data) in &self.params {
            store.insert(name.clone(), data.to_array()?);
        }
        Ok(store)
    }

    /// Writes atomically: serialize into a sibling temp file, then rename, so
    /// a crash never leaves a truncated checkpoint at the target path.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
        ));
        {
            let file = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(file, self)?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(file)?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint format {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        for (name, data) in &ckpt.params {
            if data.data.len() != data.rows * data.cols {
                return Err(Error::invalid(format!("parameter {name:?} has inconsistent shape")));
            }
        }
        Ok(ckpt)
    }
}

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::trainer::config::Stage;
use crate::util::write_atomic;

/// One optimizer step. Loss values are those of the batch before the update;
/// cosines are mean positive-pair cosines over the batch (empty when a
/// modality was not embedded in this stage).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub pair: f64,
    pub triplet: f64,
    pub task_2d: f64,
    pub task_3d: f64,
    pub tau_pair: f64,
    pub tau_triplet: f64,
    pub cos_2d_3d: Option<f64>,
    pub cos_img_2d: Option<f64>,
    pub cos_img_3d: Option<f64>,
    pub skipped: usize,
}

impl StepRecord {
    /// Mean of the available pair cosines.
    pub fn mean_cosine(&self) -> Option<f64> {
        let c: Vec<f64> = [self.cos_2d_3d, self.cos_img_2d, self.cos_img_3d]
            .into_iter()
            .flatten()
            .collect();
        (!c.is_empty()).then(|| c.iter().sum::<f64>() / c.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub stage: Stage,
    pub config_fingerprint: u32,
    pub wall_clock_secs: f64,
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn new(stage: Stage, config_fingerprint: u32) -> RunLog {
        RunLog {
            stage,
            config_fingerprint,
            wall_clock_secs: 0.0,
            records: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    /// Records only; wall-clock time is left out so reruns produce identical files.
    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.records.is_empty() {
            w.write_record(CSV_HEADER)
                .map_err(|e| Error::invalid(e.to_string()))?;
        }
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv_bytes()?)
    }
}

const CSV_HEADER: [&str; 12] = [
    "step",
    "total",
    "pair",
    "triplet",
    "task_2d",
    "task_3d",
    "tau_pair",
    "tau_triplet",
    "cos_2d_3d",
    "cos_img_2d",
    "cos_img_3d",
    "skipped",
];

//! Optimisation loops for both stages, their learning-rate schedules,
//! the optimiser and checkpoint containers.

mod adam;
mod checkpoint;
mod lr_stage;
mod schedule;
mod sr_stage;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use adam::{Adam, OptimizerConfig};
pub use checkpoint::{Checkpoint, FORMAT as CHECKPOINT_FORMAT, VERSION as CHECKPOINT_VERSION};
pub use lr_stage::{load_lr_generator, train_lr_stage, LrStageConfig, LrStageData, LrStepRecord, LrTrainer, LR_STAGE_KIND};
pub use schedule::{lr_stage_schedule, sr_stage_schedule, LinearDecaySchedule, MultiStepSchedule};
pub use sr_stage::{load_sr_generator, train_sr_stage, SrStageConfig, SrStepRecord, SrTrainer, SR_STAGE_KIND};

use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::nets::BnMode;

pub const LOSS_LOG_NAME: &str = "loss.csv";

/// How the discriminator normalises while it scores generated images for
/// the generator update. Its running statistics are never touched there.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorNorm {
    /// Statistics of the current batch.
    #[default]
    Batch,
    /// Running estimates.
    Running,
}

impl DiscriminatorNorm {
    pub(crate) fn mode(self) -> BnMode {
        match self {
            DiscriminatorNorm::Batch => BnMode::Train { update_stats: false },
            DiscriminatorNorm::Running => BnMode::Eval,
        }
    }
}

/// Independent random streams derived from the global seed.
#[derive(Clone, Copy)]
pub(crate) enum Stream {
    InitGenerator = 1,
    InitDiscriminator = 2,
    SamplerA = 3,
    SamplerB = 4,
    Step = 5,
}

pub(crate) fn stream_seed(seed: u64, stream: Stream) -> u64 {
    derive_seed(seed, stream as u64)
}

/// Seed for everything random inside one training step.
pub(crate) fn step_seed(seed: u64, step: u64) -> u64 {
    derive_seed(stream_seed(seed, Stream::Step), step)
}

pub(crate) fn check_finite(step: u64, parts: &[(&str, f64)]) -> Result<()> {
    let bad: Vec<String> = parts
        .iter()
        .filter(|(_, v)| !v.is_finite())
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            detail: bad.join(", "),
        })
    }
}

/// Per-step loss table, optionally mirrored to a CSV file as rows arrive.
#[derive(Debug)]
pub struct LossLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    file: Option<(PathBuf, std::fs::File)>,
}

impl LossLog {
    pub fn in_memory(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            file: None,
        }
    }

    /// Opens `path` for writing. Rows already there whose step is below
    /// `resume_step` are kept (and reloaded); later ones are dropped.
    pub fn to_file(path: &Path, columns: &[&str], resume_step: u64) -> Result<Self> {
        let mut log = Self::in_memory(columns);
        if resume_step > 0 && path.exists() {
            let (cols, rows) = Self::read(path)?;
            if cols != log.columns {
                return Err(Error::invalid(format!("{} has columns {cols:?}", path.display())));
            }
            log.rows = rows.into_iter().filter(|r| (r[0] as u64) < resume_step).collect();
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = log.columns.join(",") + "\n";
        for r in &log.rows {
            text += &format_row(r);
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        log.file = Some((path.to_path_buf(), f));
        Ok(log)
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if let Some((path, f)) = &mut self.file {
            f.write_all(format_row(&row).as_bytes()).map_err(|e| Error::io(&*path, e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn read(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let cols: Vec<String> = lines
            .next()
            .unwrap_or_default()
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split(',')
                    .map(|v| v.parse::<f64>().map_err(|_| Error::invalid(format!("bad loss value {v:?}"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok((cols, rows))
    }
}

fn format_row(r: &[f64]) -> String {
    let mut s = r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_log_resume_truncates_later_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let mut log = LossLog::to_file(&path, &["step", "total"], 0).unwrap();
        for s in 1..=5 {
            log.push(vec![s as f64, 0.1 * s as f64]).unwrap();
        }
        drop(log);
        let log = LossLog::to_file(&path, &["step", "total"], 4).unwrap();
        assert_eq!(log.rows.len(), 3);
        let (_, rows) = LossLog::read(&path).unwrap();
        assert_eq!(rows, log.rows);
        assert_eq!(rows[2], vec![3.0, 0.30000000000000004]);
    }

    #[test]
    fn non_finite_parts_are_reported() {
        assert!(check_finite(3, &[("a", 1.0)]).is_ok());
        let e = check_finite(3, &[("a", 1.0), ("b", f64::NAN)]).unwrap_err();
        assert!(e.to_string().contains("b=NaN"), "{e}");
    }
}

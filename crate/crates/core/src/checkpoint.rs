//! Self-describing checkpoint files for trained systems.
//!
//! A checkpoint is a JSON document holding a format tag, a version, training
//! metadata and the full [`TaskSystem`]: every matrix with its shape and
//! row-major values, the soft and hard ADC parameters and `theta`. Floats are
//! written as shortest round-trip decimal text.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{TaskSystem, TrainConfig};
use crate::signal::SignalModel;

pub const CHECKPOINT_FORMAT: &str = "taskadc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// How the stored system was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub model: SignalModel,
    pub train: TrainConfig,
    pub train_size: usize,
    pub data_seed: u64,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub metadata: Option<TrainingMetadata>,
    pub system: TaskSystem,
}

impl Checkpoint {
    pub fn new(system: TaskSystem, metadata: Option<TrainingMetadata>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            metadata,
            system,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Corrupt(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and validates a checkpoint document.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Corrupt(format!("not a checkpoint document: {e}")))?;
        let format = raw.get("format").and_then(|v| v.as_str());
        if format != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Corrupt(format!(
                "expected format '{CHECKPOINT_FORMAT}', found {}",
                format.map_or("none".to_string(), |f| format!("'{f}'"))
            )));
        }
        let version = raw
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Corrupt("missing version".into()))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::VersionMismatch {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                expected: CHECKPOINT_VERSION,
            });
        }
        let ck: Checkpoint =
            serde_json::from_value(raw).map_err(|e| Error::Corrupt(format!("malformed checkpoint: {e}")))?;
        ck.system
            .validate()
            .map_err(|e| Error::Corrupt(format!("inconsistent system: {e}")))?;
        Ok(ck)
    }
}

/// Writes atomically: a sibling temporary file renamed into place.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, checkpoint.to_json()?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    Checkpoint::from_json(&text)
}

/// Loads a checkpoint and checks it against the model it will be run on.
pub fn load_system_for(path: &Path, model: &SignalModel) -> Result<TaskSystem> {
    let ck = load_checkpoint(path)?;
    ck.system.check_model(model)?;
    Ok(ck.system)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{batch_matrix, train, AdcHyperparams};
    use crate::signal::{generate_dataset, Alphabet};

    fn trained(k: usize) -> (SignalModel, TaskSystem) {
        let model = SignalModel::synthetic(6, k, 4.0).unwrap();
        let data = generate_dataset(&model, 300, Alphabet::Binary, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let sys = train(&data, &model, AdcHyperparams::new(4, 4, 8).unwrap(), &cfg)
            .unwrap()
            .system;
        (model, sys)
    }

    #[test]
    fn round_trip_preserves_hard_predictions() {
        let (model, sys) = trained(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sys.json");
        save_checkpoint(&path, &Checkpoint::new(sys.clone(), None)).unwrap();
        let back = load_system_for(&path, &model).unwrap();
        assert_eq!(back, sys);
        let test = generate_dataset(&model, 1000, Alphabet::Binary, 9).unwrap();
        let x = batch_matrix(test.pairs.iter().map(|(_, x)| x), model.n, model.grid_len).unwrap();
        let a = sys.forward_hard(x.view()).unwrap();
        let b = back.forward_hard(x.view()).unwrap();
        assert_eq!(a.output(), b.output());
    }

    #[test]
    fn saving_twice_gives_identical_bytes() {
        let (_, sys) = trained(4);
        let ck = Checkpoint::new(sys, None);
        assert_eq!(
            ck.to_json().unwrap(),
            Checkpoint::from_json(&ck.to_json().unwrap())
                .unwrap()
                .to_json()
                .unwrap()
        );
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let (_, sys) = trained(4);
        let text = Checkpoint::new(sys, None).to_json().unwrap();
        for cut in [0, 10, text.len() / 2, text.len() - 3] {
            assert!(
                matches!(Checkpoint::from_json(&text[..cut]), Err(Error::Corrupt(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn version_and_format_are_checked() {
        let (_, sys) = trained(4);
        let mut v: serde_json::Value = serde_json::from_str(&Checkpoint::new(sys, None).to_json().unwrap()).unwrap();
        v["version"] = 7.into();
        assert!(matches!(
            Checkpoint::from_json(&v.to_string()),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
        v["format"] = "something-else".into();
        assert!(matches!(Checkpoint::from_json(&v.to_string()), Err(Error::Corrupt(_))));
    }

    #[test]
    fn inconsistent_shapes_are_corrupt() {
        let (_, sys) = trained(4);
        let mut v: serde_json::Value = serde_json::from_str(&Checkpoint::new(sys, None).to_json().unwrap()).unwrap();
        v["system"]["hyper"]["samples"] = 5.into();
        assert!(matches!(Checkpoint::from_json(&v.to_string()), Err(Error::Corrupt(_))));
    }

    #[test]
    fn wrong_task_length_is_a_dimension_mismatch() {
        let (_, sys) = trained(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k4.json");
        save_checkpoint(&path, &Checkpoint::new(sys, None)).unwrap();
        let k8 = SignalModel::synthetic(6, 8, 4.0).unwrap();
        assert!(matches!(
            load_system_for(&path, &k8),
            Err(Error::DimensionMismatch {
                expected: 8,
                found: 4,
                ..
            })
        ));
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ArchitectureSpec, ModelCheckpoint, Provenance};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::train::{self, TrainSchedule};

/// Pre-training schedule plus the epochs at which checkpoints are kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSchedule {
    pub train: TrainSchedule,
    pub snapshots: Vec<usize>,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        PretrainSchedule {
            train: TrainSchedule {
                epochs: 30,
                batch_size: 64,
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 5e-3,
                milestones: vec![10, 20],
                decay: 0.1,
            },
            snapshots: vec![1, 2, 3, 5, 8, 12, 20, 25, 30],
        }
    }
}

impl PretrainSchedule {
    /// Same optimizer settings, with the run cut at the last snapshot.
    pub fn with_snapshots(snapshots: Vec<usize>) -> Self {
        let mut s = Self::default();
        s.train.epochs = snapshots.iter().copied().max().unwrap_or(0).max(s.train.epochs);
        s.snapshots = snapshots;
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.snapshots.is_empty() {
            return Err(Error::invalid("snapshots", "at least one snapshot epoch is required"));
        }
        if let Some(&e) = self.snapshots.iter().find(|&&e| e == 0 || e > self.train.epochs) {
            return Err(Error::invalid(
                "snapshots",
                format!("epoch {e} outside [1, {}]", self.train.epochs),
            ));
        }
        Ok(())
    }
}

/// Trains `spec` from seed `seed` on `dataset` and returns one checkpoint per
/// snapshot epoch, in epoch order, each tagged with its provenance.
pub fn pretrain(
    spec: &ArchitectureSpec,
    seed: u64,
    dataset: &LabeledDataset,
    schedule: &PretrainSchedule,
) -> Result<Vec<ModelCheckpoint>> {
    schedule.validate()?;
    if dataset.classes() != spec.classes || dataset.geometry() != spec.input {
        return Err(Error::invalid(
            "dataset",
            format!(
                "dataset ({} classes, {:?}) does not fit spec ({} classes, {:?})",
                dataset.classes(),
                dataset.geometry(),
                spec.classes,
                spec.input
            ),
        ));
    }
    let mut wanted = schedule.snapshots.clone();
    wanted.sort_unstable();
    wanted.dedup();
    let last = *wanted.last().expect("validated non-empty");
    let mut run = schedule.train.clone();
    run.epochs = last;

    let init = ModelCheckpoint::build(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_7EA1);
    let mut out = Vec::with_capacity(wanted.len());
    train::train(&init, dataset, &run, None, &mut rng, |epoch, model| {
        if wanted.binary_search(&epoch).is_ok() {
            out.push(model.clone().with_provenance(Provenance {
                seed,
                epoch,
                source: dataset.domain().to_string(),
            }));
        }
        Ok(())
    })?;
    Ok(out)
}

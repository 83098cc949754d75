//! Train-on-synthetic evaluation, cross-architecture runs and feature export.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::autodiff::Tensor;
use crate::data::{LabeledDataset, SyntheticDataset};
use crate::error::{Error, Result};
use crate::io;
use crate::models::{ArchitectureSpec, Family, ModelCheckpoint};
use crate::train::{self, TrainSchedule};

/// A report stops being usable once more than this many repeats fail.
pub const MAX_FAILED_REPEATS: usize = 1;

/// Training recipe applied to a synthetic set before measuring test accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub schedule: TrainSchedule,
    /// Augmentation applied to every training batch; `None` disables it.
    pub augment: Option<AugmentConfig>,
    pub repeats: usize,
    /// Repeat `r` uses model and shuffle seed `seed + r`.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            schedule: TrainSchedule {
                epochs: 200,
                batch_size: 64,
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 5e-4,
                milestones: vec![100],
                decay: 0.1,
            },
            augment: Some(AugmentConfig::default()),
            repeats: 5,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn fingerprint(&self, arch: &str) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self)?);
        h.update(b"\0");
        h.update(arch.as_bytes());
        Ok(hex::encode(h.finalize()))
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// SHA-256 of the pixel bit patterns of a tensor, as hex.
pub fn pixel_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arch: String,
    /// Test accuracy of every successful repeat, in repeat order.
    pub accuracies: Vec<f64>,
    /// Indices of repeats whose training diverged.
    pub failed: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub fingerprint: String,
    /// Hash of the evaluated synthetic pixels.
    pub synthetic: String,
}

impl EvalReport {
    pub fn valid(&self) -> bool {
        self.failed.len() <= MAX_FAILED_REPEATS && !self.accuracies.is_empty()
    }

    /// True when `mean` and `std` agree exactly with `accuracies`.
    pub fn consistent(&self) -> bool {
        let (m, s) = mean_std(&self.accuracies);
        m.to_bits() == self.mean.to_bits() && s.to_bits() == self.std.to_bits()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let report: Self = serde_json::from_slice(&io::read_file(path)?)?;
        if !report.consistent() {
            return Err(Error::Format(format!(
                "{}: aggregates disagree with per-repeat accuracies",
                path.display()
            )));
        }
        Ok(report)
    }
}

fn check_fit(spec: &ArchitectureSpec, geometry: [usize; 3], classes: usize, what: &str) -> Result<()> {
    if spec.input != geometry || spec.classes != classes {
        return Err(Error::invalid(
            "dataset",
            format!(
                "{what} ({classes} classes, {geometry:?}) does not fit {} ({} classes, {:?})",
                spec.id(),
                spec.classes,
                spec.input
            ),
        ));
    }
    Ok(())
}

/// Trains a fresh model per repeat on `train` and measures accuracy on
/// `test`. Divergent repeats are recorded in [`EvalReport::failed`].
pub fn evaluate_labeled(
    train: &LabeledDataset,
    test: &LabeledDataset,
    arch: Family,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.repeats == 0 {
        return Err(Error::invalid("repeats", "must be positive"));
    }
    if train.geometry() != test.geometry() || train.classes() != test.classes() {
        return Err(Error::invalid(
            "test",
            format!(
                "train is {:?} with {} classes, test is {:?} with {} classes",
                train.geometry(),
                train.classes(),
                test.geometry(),
                test.classes()
            ),
        ));
    }
    let spec = ArchitectureSpec::preset(arch, train.geometry(), train.classes());
    check_fit(&spec, test.geometry(), test.classes(), "test set")?;
    let mut accuracies = Vec::with_capacity(cfg.repeats);
    let mut failed = Vec::new();
    for r in 0..cfg.repeats {
        let seed = cfg.seed.wrapping_add(r as u64);
        let init = ModelCheckpoint::build(&spec, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let outcome = train::train(&init, train, &cfg.schedule, cfg.augment.as_ref(), &mut rng, |_, _| Ok(()));
        match outcome {
            Ok(model) if model.param_tensors().iter().all(|t| t.data().iter().all(|v| v.is_finite())) => {
                accuracies.push(train::accuracy(&model, test.images(), test.labels())?);
            }
            Ok(_) | Err(Error::NonFinite { .. }) => {
                log::warn!("evaluation repeat {r} on {arch} diverged");
                failed.push(r);
            }
            Err(e) => return Err(e),
        }
    }
    let (mean, std) = mean_std(&accuracies);
    let report = EvalReport {
        arch: arch.id().to_string(),
        accuracies,
        failed,
        mean,
        std,
        fingerprint: cfg.fingerprint(arch.id())?,
        synthetic: pixel_hash(train.images()),
    };
    if !report.valid() {
        log::warn!("evaluation on {arch}: {} of {} repeats failed", report.failed.len(), cfg.repeats);
    }
    Ok(report)
}

/// Train-on-synthetic accuracy of `syn` on `arch`.
pub fn evaluate(syn: &SyntheticDataset, test: &LabeledDataset, arch: Family, cfg: &EvalConfig) -> Result<EvalReport> {
    evaluate_labeled(&syn.to_labeled("synthetic"), test, arch, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossArchReport {
    pub reports: BTreeMap<String, EvalReport>,
    /// Baseline mean accuracy per architecture.
    pub baseline: BTreeMap<String, f64>,
    pub gains: BTreeMap<String, f64>,
    pub avg_gain: f64,
}

impl CrossArchReport {
    /// Assembles gains from evaluated reports and baseline reports keyed by
    /// architecture id.
    pub fn from_reports(
        reports: BTreeMap<String, EvalReport>,
        baseline: &BTreeMap<String, EvalReport>,
    ) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::invalid("archs", "empty architecture list"));
        }
        let mut base = BTreeMap::new();
        let mut gains = BTreeMap::new();
        for (arch, r) in &reports {
            let b = baseline
                .get(arch)
                .ok_or_else(|| Error::invalid("baseline", format!("no baseline report for `{arch}`")))?;
            base.insert(arch.clone(), b.mean);
            gains.insert(arch.clone(), r.mean - b.mean);
        }
        let avg_gain = gains.values().sum::<f64>() / gains.len() as f64;
        Ok(CrossArchReport {
            reports,
            baseline: base,
            gains,
            avg_gain,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&io::read_file(path)?)?)
    }
}

/// Evaluates `syn` on every architecture in `archs` and compares each with
/// its baseline. Baselines are checked before any training starts.
pub fn cross_arch_eval(
    syn: &SyntheticDataset,
    test: &LabeledDataset,
    archs: &[Family],
    baseline: &BTreeMap<String, EvalReport>,
    cfg: &EvalConfig,
) -> Result<CrossArchReport> {
    if let Some(a) = archs.iter().find(|a| !baseline.contains_key(a.id())) {
        return Err(Error::invalid("baseline", format!("no baseline report for `{a}`")));
    }
    let mut reports = BTreeMap::new();
    for &arch in archs {
        reports.insert(arch.id().to_string(), evaluate(syn, test, arch, cfg)?);
    }
    CrossArchReport::from_reports(reports, baseline)
}

/// Penultimate features of `images` under `model` as CSV text with a
/// `label,f0,f1,..` header.
pub fn features_csv(model: &ModelCheckpoint, images: &Tensor, labels: &[usize]) -> Result<String> {
    let spec = model.spec();
    if images.ndim() != 4 || images.shape()[1..] != spec.input || images.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "export_features",
            lhs: images.shape().to_vec(),
            rhs: spec.input.to_vec(),
        });
    }
    let dim = spec.feature_dim();
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    let mut header = vec!["label".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    let n = labels.len();
    for start in (0..n).step_by(256) {
        let end = (start + 256).min(n);
        let feats = model.forward(&images.slice_rows(start, end)?)?.features;
        for (row, y) in feats.data().chunks(dim).zip(&labels[start..end]) {
            let mut rec = vec![y.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Writes [`features_csv`] to `path`.
pub fn export_features(model: &ModelCheckpoint, images: &Tensor, labels: &[usize], path: &Path) -> Result<()> {
    io::write_file(path, features_csv(model, images, labels)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn fingerprint_depends_on_arch_and_config() {
        let c = EvalConfig::default();
        let a = c.fingerprint("conv-net").unwrap();
        assert_eq!(a.len(), 64);
        assert_ne!(a, c.fingerprint("mlp").unwrap());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(a, d.fingerprint("conv-net").unwrap());
    }
}

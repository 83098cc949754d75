//! Supervision from frozen pre-trained checkpoints: the classification loss
//! CLoM, the contrastive CLoM (CCLoM) that works across label spaces, and the
//! pools of checkpoints they sample from.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::io;
use crate::models::{pretrain, ArchitectureSpec, ModelCheckpoint, PretrainSchedule};
use crate::train::cross_entropy;

/// Below this total cosine distance CCLoM carries no signal and the step is
/// skipped.
pub const CCLOM_MIN_TOTAL: f64 = 1e-8;

/// File name of the pool manifest inside a pool directory.
pub const POOL_MANIFEST: &str = "pool.json";

/// A set of frozen checkpoints spanning seeds × architectures × epochs, all
/// trained on one source dataset.
#[derive(Clone, Debug)]
pub struct PretrainedPool {
    checkpoints: Vec<ModelCheckpoint>,
    active: Vec<usize>,
    source: String,
}

impl PretrainedPool {
    pub fn new(checkpoints: Vec<ModelCheckpoint>) -> Result<Self> {
        let first = checkpoints.first().ok_or_else(|| Error::invalid("pool", "no checkpoints"))?;
        let source = first.provenance().source.clone();
        for c in &checkpoints {
            if c.spec().input != first.spec().input {
                return Err(Error::invalid(
                    "pool",
                    format!("input {:?} next to {:?}", c.spec().input, first.spec().input),
                ));
            }
            if c.provenance().source != source {
                return Err(Error::invalid(
                    "pool",
                    format!("sources {} and {source} mixed", c.provenance().source),
                ));
            }
            if c.spec().classes != first.spec().classes {
                return Err(Error::invalid("pool", "same-source checkpoints disagree on class count"));
            }
        }
        let active = (0..checkpoints.len()).collect();
        Ok(PretrainedPool {
            checkpoints,
            active,
            source,
        })
    }

    /// Pre-trains every `(spec, seed)` pair and pools all snapshots.
    pub fn train(specs: &[ArchitectureSpec], seeds: &[u64], data: &LabeledDataset, schedule: &PretrainSchedule) -> Result<Self> {
        let mut all = Vec::new();
        for spec in specs {
            for &seed in seeds {
                all.extend(pretrain(spec, seed, data, schedule)?);
            }
        }
        Self::new(all)
    }

    /// Restricts sampling to checkpoints taken at `epochs`.
    pub fn with_active_epochs(mut self, epochs: &[usize]) -> Result<Self> {
        let active: Vec<usize> = (0..self.checkpoints.len())
            .filter(|&i| epochs.contains(&self.checkpoints[i].provenance().epoch))
            .collect();
        if active.is_empty() {
            return Err(Error::invalid("epochs", format!("no checkpoint at epochs {epochs:?}")));
        }
        self.active = active;
        Ok(self)
    }

    pub fn checkpoints(&self) -> &[ModelCheckpoint] {
        &self.checkpoints
    }

    pub fn active(&self) -> impl Iterator<Item = &ModelCheckpoint> {
        self.active.iter().map(|&i| &self.checkpoints[i])
    }

    pub fn active_len(&self) -> usize {
        self.active.len()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn classes(&self) -> usize {
        self.checkpoints[0].spec().classes
    }

    pub fn input(&self) -> [usize; 3] {
        self.checkpoints[0].spec().input
    }

    /// Distinct initialization seeds, N_m.
    pub fn n_m(&self) -> usize {
        self.checkpoints.iter().map(|c| c.provenance().seed).collect::<BTreeSet<_>>().len()
    }

    /// Distinct architectures, N_a.
    pub fn n_a(&self) -> usize {
        self.checkpoints.iter().map(|c| c.spec().id()).collect::<BTreeSet<_>>().len()
    }

    pub fn epochs(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.checkpoints.iter().map(|c| c.provenance().epoch).collect();
        set.into_iter().collect()
    }

    /// Every (seed, architecture, epoch) combination is present exactly once.
    pub fn is_fully_populated(&self) -> bool {
        let keys: BTreeSet<(u64, String, usize)> = self
            .checkpoints
            .iter()
            .map(|c| (c.provenance().seed, c.spec().id(), c.provenance().epoch))
            .collect();
        keys.len() == self.checkpoints.len() && keys.len() == self.n_m() * self.n_a() * self.epochs().len()
    }

    /// Uniform draw over the active slice.
    pub fn sample_model(&self, rng: &mut impl Rng) -> Result<&ModelCheckpoint> {
        if self.active.is_empty() {
            return Err(Error::invalid("pool", "empty pool"));
        }
        Ok(&self.checkpoints[self.active[rng.gen_range(0..self.active.len())]])
    }

    /// Writes every checkpoint plus a JSON manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let mut entries = Vec::with_capacity(self.checkpoints.len());
        for c in &self.checkpoints {
            let p = c.provenance();
            let file = format!("{}-s{}-e{}.ckpt", c.spec().id(), p.seed, p.epoch);
            c.save(&dir.join(&file))?;
            entries.push(PoolEntry {
                path: file.into(),
                seed: p.seed,
                arch: c.spec().id(),
                epoch: p.epoch,
                source: p.source.clone(),
            });
        }
        let manifest = dir.join(POOL_MANIFEST);
        io::write_file(&manifest, serde_json::to_string_pretty(&entries)?.as_bytes())?;
        Ok(manifest)
    }

    /// Loads a pool from a manifest file or from a directory holding one.
    /// Every tag must agree with the provenance stored in its checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = if path.is_dir() { path.join(POOL_MANIFEST) } else { path.to_path_buf() };
        let base = manifest.parent().unwrap_or(Path::new("."));
        let entries: Vec<PoolEntry> = serde_json::from_slice(&io::read_file(&manifest)?)?;
        let mut checkpoints = Vec::with_capacity(entries.len());
        for e in entries {
            let file = if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) };
            let c = ModelCheckpoint::load(&file)?;
            let p = c.provenance();
            if p.seed != e.seed || p.epoch != e.epoch || p.source != e.source || c.spec().id() != e.arch {
                return Err(Error::Format(format!(
                    "{}: manifest says (seed {}, {}, epoch {}, {}), checkpoint says (seed {}, {}, epoch {}, {})",
                    file.display(),
                    e.seed,
                    e.arch,
                    e.epoch,
                    e.source,
                    p.seed,
                    c.spec().id(),
                    p.epoch,
                    p.source
                )));
            }
            checkpoints.push(c);
        }
        Self::new(checkpoints)
    }
}

/// One line of a pool manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub path: PathBuf,
    pub seed: u64,
    pub arch: String,
    pub epoch: usize,
    pub source: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupervisionKind {
    #[default]
    None,
    Clom,
    Cclom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisionConfig {
    pub kind: SupervisionKind,
    /// Weight of the supervision term; unset means the default.
    pub alpha: Option<f64>,
    /// Pool directory or manifest, used by the command-line front end.
    pub pool: Option<PathBuf>,
    /// Restricts pool sampling to these snapshot epochs.
    pub epochs: Option<Vec<usize>>,
    /// Real images per CCLoM step.
    pub real_batch: usize,
    /// Average the loss over every active checkpoint instead of sampling one.
    pub ensemble: bool,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig {
            kind: SupervisionKind::None,
            alpha: None,
            pool: None,
            epochs: None,
            real_batch: 64,
            ensemble: false,
        }
    }
}

impl SupervisionConfig {
    pub fn clom(alpha: f64) -> Self {
        SupervisionConfig {
            kind: SupervisionKind::Clom,
            alpha: Some(alpha),
            ..Self::default()
        }
    }

    pub fn cclom(alpha: f64) -> Self {
        SupervisionConfig {
            kind: SupervisionKind::Cclom,
            alpha: Some(alpha),
            ..Self::default()
        }
    }

    /// Checks the config against the target data and pool and returns the
    /// loss kind to use. CLoM with a pool from another domain or label space
    /// becomes CCLoM.
    pub fn effective_kind(&self, target: &LabeledDataset, pool: Option<&PretrainedPool>) -> Result<SupervisionKind> {
        if let Some(a) = self.alpha {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::invalid("alpha", format!("{a} is not a finite non-negative weight")));
            }
        }
        match (self.kind, pool) {
            (SupervisionKind::None, None) => Ok(SupervisionKind::None),
            (SupervisionKind::None, Some(_)) => Err(Error::invalid("pool", "a pool needs a supervision kind")),
            (_, None) => Err(Error::invalid("pool", "supervision needs a pool")),
            (kind, Some(pool)) => {
                if pool.input() != target.geometry() {
                    return Err(Error::invalid(
                        "pool",
                        format!("pool input {:?} against data {:?}", pool.input(), target.geometry()),
                    ));
                }
                if self.real_batch == 0 && kind == SupervisionKind::Cclom {
                    return Err(Error::invalid("real_batch", "must be positive"));
                }
                let cross = pool.source() != target.domain() || pool.classes() != target.classes();
                if kind == SupervisionKind::Clom && cross {
                    log::warn!(
                        "pool trained on {} ({} classes) cannot supervise {} ({} classes) with clom; using cclom",
                        pool.source(),
                        pool.classes(),
                        target.domain(),
                        target.classes()
                    );
                    return Ok(SupervisionKind::Cclom);
                }
                Ok(kind)
            }
        }
    }
}

/// Mean cross-entropy of a frozen model's logits on the synthetic images.
/// The checkpoint's parameters enter as constants.
pub fn clom(model: &ModelCheckpoint, syn: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    if model.spec().classes != classes {
        return Err(Error::invalid(
            "clom",
            format!("model predicts {} classes, synthetic set has {classes}", model.spec().classes),
        ));
    }
    cross_entropy(&model.forward(syn)?.logits, labels)
}

/// `M[i][j] = 1` iff synthetic label `i` equals real label `j`; shape
/// `(|S|, B)`.
pub fn correspondence_matrix(real_labels: &[usize], syn_labels: &[usize]) -> Tensor {
    let data = syn_labels
        .iter()
        .flat_map(|&s| real_labels.iter().map(move |&r| if r == s { 1.0 } else { 0.0 }))
        .collect();
    Tensor::new(&[syn_labels.len(), real_labels.len()], data).expect("shape matches data")
}

/// CCLoM from precomputed features: with `D = 1 − norm(F_S) norm(F_B)ᵀ`,
/// returns `Σ(D ⊙ M) / ΣD`. Fails with [`Error::DegenerateFeatures`] when
/// `ΣD` is below [`CCLOM_MIN_TOTAL`].
pub fn cclom_from_features(syn_features: &Tensor, real_features: &Tensor, m: &Tensor) -> Result<Tensor> {
    if syn_features.ndim() != 2 || real_features.ndim() != 2 || syn_features.shape()[1] != real_features.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "cclom",
            lhs: syn_features.shape().to_vec(),
            rhs: real_features.shape().to_vec(),
        });
    }
    let sim = syn_features.normalize_rows()?.matmul(&real_features.normalize_rows()?.transpose()?)?;
    if m.shape() != sim.shape() {
        return Err(Error::ShapeMismatch {
            op: "cclom",
            lhs: m.shape().to_vec(),
            rhs: sim.shape().to_vec(),
        });
    }
    let d = Tensor::ones(sim.shape()).sub(&sim)?;
    let total = d.sum()?;
    let t = total.item()?;
    if !(t >= CCLOM_MIN_TOTAL) {
        return Err(Error::DegenerateFeatures(t));
    }
    d.mul(m)?.sum()?.div(&total)
}

/// CCLoM of a frozen model: the same-class share of the total cosine
/// distance between synthetic and real features.
pub fn cclom(model: &ModelCheckpoint, real: &Tensor, real_labels: &[usize], syn: &Tensor, syn_labels: &[usize]) -> Result<Tensor> {
    let fs = model.forward(syn)?.features;
    let fb = model.forward(&real.detach())?.features;
    cclom_from_features(&fs, &fb, &correspondence_matrix(real_labels, syn_labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correspondence_example() {
        let m = correspondence_matrix(&[0, 1], &[0, 0, 1]);
        assert_eq!(m.shape(), &[3, 2]);
        assert_eq!(m.data(), &[1., 0., 1., 0., 0., 1.]);
        assert!(correspondence_matrix(&[2, 3], &[0, 1]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cclom_anchor_cases() {
        // synthetic features copy same-class real ones; classes orthogonal
        let real = Tensor::new(&[2, 2], vec![1., 0., 0., 3.]).unwrap();
        let syn = Tensor::new(&[2, 2], vec![2., 0., 0., 1.]).unwrap();
        let m = correspondence_matrix(&[0, 1], &[0, 1]);
        assert!(cclom_from_features(&syn, &real, &m).unwrap().item().unwrap().abs() < 1e-15);
        let ones = correspondence_matrix(&[0, 0], &[0, 0]);
        assert_eq!(cclom_from_features(&syn, &real, &ones).unwrap().item().unwrap(), 1.0);
        let same = Tensor::new(&[2, 2], vec![1., 1., 2., 2.]).unwrap();
        assert!(matches!(
            cclom_from_features(&same, &same, &ones),
            Err(Error::DegenerateFeatures(_))
        ));
    }
}

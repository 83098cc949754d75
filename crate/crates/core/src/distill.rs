//! The outer distillation loop: base matching loss plus an α-weighted
//! supervision term, one momentum step on the synthetic pixels per
//! iteration, then a clamp back to `[0, 1]`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::SiameseLog;
use crate::autodiff::{grad, Graph, Tensor};
use crate::data::{init_synthetic, sample_class_batch, InitMode, LabeledDataset, SyntheticDataset};
use crate::error::{Error, Result};
use crate::io::{self, Manifest};
use crate::matchers::{class_pairs, dc_loss, default_loss, dm_loss, dsa_loss, inner_update, MatcherConfig, MatcherKind};
use crate::models::{ArchitectureSpec, Family, ModelCheckpoint};
use crate::supervision::{cclom, clom, PretrainedPool, SupervisionConfig, SupervisionKind};

/// Weight of the supervision term when none is configured.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// One seed per random stream, so any run can be replayed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    /// Real-batch sampling for the matching loss.
    pub data: u64,
    /// Initialization of matching models and embedders.
    pub model: u64,
    /// DSA augmentation parameters.
    pub augmentation: u64,
    /// Pool sampling and CCLoM real batches.
    pub pool: u64,
    /// Initial synthetic images.
    pub init: u64,
}

impl Seeds {
    /// All streams derived from one number.
    pub fn from_base(base: u64) -> Self {
        Seeds {
            data: base,
            model: base.wrapping_add(1),
            augmentation: base.wrapping_add(2),
            pool: base.wrapping_add(3),
            init: base.wrapping_add(4),
        }
    }
}

/// Everything that determines a distillation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillJob {
    /// Training set file, used by the command-line front end.
    pub data: Option<PathBuf>,
    /// Family of the matching network (desk-scale preset).
    pub arch: Family,
    pub ipc: usize,
    pub init: InitMode,
    pub matcher: MatcherConfig,
    pub supervision: SupervisionConfig,
    /// Pixel learning rate; unset means 0.1 for DC/DSA and 1.0 for DM.
    pub pixel_lr: Option<f64>,
    pub pixel_momentum: f64,
    /// Iteration budget; unset means the matcher's K. Zero is allowed.
    pub iterations: Option<usize>,
    pub seeds: Seeds,
}

impl Default for DistillJob {
    fn default() -> Self {
        DistillJob {
            data: None,
            arch: Family::ConvNet,
            ipc: 10,
            init: InitMode::RealSample,
            matcher: MatcherConfig::default(),
            supervision: SupervisionConfig::default(),
            pixel_lr: None,
            pixel_momentum: 0.5,
            iterations: None,
            seeds: Seeds::default(),
        }
    }
}

impl DistillJob {
    pub fn new(kind: MatcherKind, ipc: usize, seeds: Seeds) -> Self {
        DistillJob {
            ipc,
            matcher: MatcherConfig::new(kind),
            seeds,
            ..Self::default()
        }
    }

    pub fn resolved_pixel_lr(&self) -> f64 {
        self.pixel_lr.unwrap_or(match self.matcher.kind {
            MatcherKind::Dc | MatcherKind::Dsa => 0.1,
            MatcherKind::Dm => 1.0,
        })
    }

    pub fn budget(&self) -> usize {
        self.iterations.unwrap_or(self.matcher.iterations)
    }

    pub fn alpha(&self) -> Result<f64> {
        match resolve_alpha(&self.supervision, None)? {
            AlphaPlan::Fixed(a) => Ok(a),
            AlphaPlan::Sweep(_) => unreachable!("no grid given"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.matcher.validate()?;
        if self.ipc == 0 {
            return Err(Error::invalid("ipc", "must be positive"));
        }
        let lr = self.resolved_pixel_lr();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::invalid("pixel_lr", format!("{lr}")));
        }
        if !(0.0..1.0).contains(&self.pixel_momentum) {
            return Err(Error::invalid("pixel_momentum", format!("{} outside [0, 1)", self.pixel_momentum)));
        }
        self.alpha()?;
        Ok(())
    }

    /// Human-readable record of the job; [`DistillJob::from_manifest`]
    /// inverts it.
    pub fn manifest(&self) -> Result<Manifest> {
        let mut m = Manifest::new();
        m.set("job", serde_json::to_string(self)?)
            .set("version", env!("CARGO_PKG_VERSION"))
            .set("matcher", self.matcher.kind)
            .set("supervision", format!("{:?}", self.supervision.kind).to_lowercase())
            .set("alpha", self.alpha()?)
            .set("pixel_lr", self.resolved_pixel_lr())
            .set("pixel_momentum", self.pixel_momentum)
            .set("iterations", self.budget())
            .set("seed.data", self.seeds.data)
            .set("seed.model", self.seeds.model)
            .set("seed.augmentation", self.seeds.augmentation)
            .set("seed.pool", self.seeds.pool)
            .set("seed.init", self.seeds.init);
        Ok(m)
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        Ok(serde_json::from_str(m.require("job")?)?)
    }
}

/// Either one weight or a sweep over several.
#[derive(Clone, Debug, PartialEq)]
pub enum AlphaPlan {
    Fixed(f64),
    Sweep(Vec<f64>),
}

impl AlphaPlan {
    /// One job per weight.
    pub fn jobs(&self, job: &DistillJob) -> Vec<DistillJob> {
        let alphas = match self {
            AlphaPlan::Fixed(a) => vec![*a],
            AlphaPlan::Sweep(g) => g.clone(),
        };
        alphas
            .into_iter()
            .map(|a| {
                let mut j = job.clone();
                j.supervision.alpha = Some(a);
                j
            })
            .collect()
    }
}

fn check_alpha(a: f64) -> Result<f64> {
    if a.is_finite() && a >= 0.0 {
        Ok(a)
    } else {
        Err(Error::invalid("alpha", format!("{a} is not a finite non-negative weight")))
    }
}

/// The configured weight, [`DEFAULT_ALPHA`] when unset, or a sweep when an
/// ablation grid is given.
pub fn resolve_alpha(config: &SupervisionConfig, grid: Option<&[f64]>) -> Result<AlphaPlan> {
    match grid {
        Some([]) => Err(Error::invalid("alpha grid", "empty")),
        Some(g) => Ok(AlphaPlan::Sweep(g.iter().map(|&a| check_alpha(a)).collect::<Result<_>>()?)),
        None => Ok(AlphaPlan::Fixed(check_alpha(config.alpha.unwrap_or(DEFAULT_ALPHA))?)),
    }
}

/// Loss components of one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub base_loss: f64,
    pub supervision_loss: f64,
    pub total_loss: f64,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub synthetic: SyntheticDataset,
    pub log: Vec<LogRow>,
    /// The supervision kind actually used after validation.
    pub supervision: SupervisionKind,
    pub alpha: f64,
    /// Skipped supervision steps and similar notices.
    pub warnings: Vec<String>,
}

impl DistillOutcome {
    pub fn log_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.log {
            w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes `synthetic.bin`, `log.csv` and `manifest.txt` into `dir`.
    pub fn write(&self, job: &DistillJob, dir: &Path) -> Result<()> {
        self.synthetic.save(&dir.join("synthetic.bin"))?;
        io::write_file(&dir.join("log.csv"), self.log_csv()?.as_bytes())?;
        let mut m = job.manifest()?;
        m.set("supervision.effective", format!("{:?}", self.supervision).to_lowercase())
            .set("warnings", self.warnings.len());
        m.save(&dir.join("manifest.txt"))
    }
}

/// Runs `job` on `train`. `pool` must be present exactly when supervision
/// is configured.
pub fn run(job: &DistillJob, train: &LabeledDataset, pool: Option<&PretrainedPool>) -> Result<DistillOutcome> {
    run_observed(job, train, pool, |_, _| {})
}

/// [`run`] with a hook that sees the synthetic set after every update.
pub fn run_observed(
    job: &DistillJob,
    train: &LabeledDataset,
    pool: Option<&PretrainedPool>,
    mut observe: impl FnMut(usize, &SyntheticDataset),
) -> Result<DistillOutcome> {
    job.validate()?;
    let kind = job.supervision.effective_kind(train, pool)?;
    let alpha = job.alpha()?;
    let pool = match (kind, pool, &job.supervision.epochs) {
        (SupervisionKind::None, _, _) | (_, None, _) => None,
        (_, Some(p), Some(epochs)) => Some(p.clone().with_active_epochs(epochs)?),
        (_, Some(p), None) => Some(p.clone()),
    };
    let classes = train.classes();
    let spec = ArchitectureSpec::preset(job.arch, train.geometry(), classes);
    spec.validate()?;
    let m = &job.matcher;
    let lr = job.resolved_pixel_lr();

    let mut syn = init_synthetic(train, job.ipc, job.init, job.seeds.init)?;
    let labels = syn.labels().to_vec();
    let mut data_rng = ChaCha8Rng::seed_from_u64(job.seeds.data);
    let mut model_rng = ChaCha8Rng::seed_from_u64(job.seeds.model);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(job.seeds.augmentation);
    let mut pool_rng = ChaCha8Rng::seed_from_u64(job.seeds.pool);

    let mut velocity = vec![0.0; syn.images().len()];
    let mut net: Option<ModelCheckpoint> = None;
    let mut log = Vec::with_capacity(job.budget());
    let mut warnings = Vec::new();
    let mut siamese = SiameseLog::default();

    for it in 0..job.budget() {
        // (1) matching model for this iteration
        let model = match m.kind {
            MatcherKind::Dm => ModelCheckpoint::build(&spec, model_rng.gen())?,
            MatcherKind::Dc | MatcherKind::Dsa => match net.take() {
                Some(n) if it % m.reinit_every != 0 => n,
                _ => ModelCheckpoint::build(&spec, model_rng.gen())?,
            },
        };

        // (2) base matching loss
        let g = Graph::new();
        let s = g.leaf(syn.images());
        let real = (0..classes)
            .map(|c| sample_class_batch(train, c, m.real_batch, &mut data_rng))
            .collect::<Result<Vec<_>>>()?;
        let pairs = class_pairs(&s, &labels, &real, m.per_class)?;
        let base = match m.kind {
            MatcherKind::Dc => dc_loss(&model, &pairs, &default_loss)?,
            MatcherKind::Dsa => {
                siamese.step = it;
                siamese.records.clear();
                dsa_loss(&model, &pairs, &default_loss, &m.augment, &mut aug_rng, Some(&mut siamese))?
            }
            MatcherKind::Dm => dm_loss(&model, &pairs)?,
        };

        // (3) supervision from the pool
        let sup = match &pool {
            None => None,
            Some(pool) => {
                let picked: Vec<&ModelCheckpoint> = if job.supervision.ensemble {
                    pool.active().collect()
                } else {
                    vec![pool.sample_model(&mut pool_rng)?]
                };
                supervision_term(kind, &picked, train, &s, &labels, job.supervision.real_batch, &mut pool_rng)
                    .or_else(|e| match e {
                        Error::DegenerateFeatures(t) => {
                            warnings.push(format!("iteration {it}: cclom skipped, total distance {t:e}"));
                            Ok(None)
                        }
                        e => Err(e),
                    })?
            }
        };

        let total = match &sup {
            Some(sv) if alpha > 0.0 => base.add(&sv.mul_scalar(alpha)?)?,
            _ => base.clone(),
        };
        let row = LogRow {
            iteration: it,
            base_loss: base.item()?,
            supervision_loss: sup.as_ref().map(Tensor::item).transpose()?.unwrap_or(0.0),
            total_loss: total.item()?,
        };
        if !row.total_loss.is_finite() {
            return Err(Error::NonFinite {
                stage: "distill",
                step: it,
                detail: format!(
                    "base {} supervision {} total {}",
                    row.base_loss, row.supervision_loss, row.total_loss
                ),
            });
        }
        log.push(row);

        // (4) momentum step on the pixels, (5) clamp
        let gs = grad(&total, &[&s], false)?.remove(0);
        let pixels: Vec<f64> = syn
            .images()
            .data()
            .iter()
            .zip(gs.data())
            .zip(velocity.iter_mut())
            .map(|((&x, &g), v)| {
                *v = job.pixel_momentum * *v + g;
                (x - lr * *v).clamp(0.0, 1.0)
            })
            .collect();
        syn = syn.with_images(Tensor::new(syn.images().shape(), pixels)?)?;
        observe(it, &syn);

        if m.kind != MatcherKind::Dm {
            net = Some(inner_update(&model, syn.images(), &labels, m.inner_steps, m.inner_lr, m.inner_momentum)?);
        }
    }
    Ok(DistillOutcome {
        synthetic: syn,
        log,
        supervision: kind,
        alpha,
        warnings,
    })
}

/// Mean supervision loss over the picked checkpoints.
fn supervision_term(
    kind: SupervisionKind,
    picked: &[&ModelCheckpoint],
    train: &LabeledDataset,
    syn: &Tensor,
    labels: &[usize],
    real_batch: usize,
    rng: &mut impl Rng,
) -> Result<Option<Tensor>> {
    let (real, real_labels) = if kind == SupervisionKind::Cclom {
        let idx = rand::seq::index::sample(rng, train.len(), real_batch.min(train.len())).into_vec();
        let y: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
        (Some(train.select(&idx)?), y)
    } else {
        (None, Vec::new())
    };
    let mut total: Option<Tensor> = None;
    for model in picked {
        let term = match (kind, &real) {
            (SupervisionKind::Clom, _) => clom(model, syn, labels, train.classes())?,
            (SupervisionKind::Cclom, Some(x)) => cclom(model, x, &real_labels, syn, labels)?,
            _ => return Ok(None),
        };
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    total.map(|t| t.mul_scalar(1.0 / picked.len() as f64)).transpose()
}

//! Supervised training utilities shared by pre-training, the inner model
//! updates of gradient matching, and evaluation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig};
use crate::autodiff::{grad, Graph, Tensor};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{forward_with, ModelCheckpoint};

/// Mean cross-entropy of `(N, C)` logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let c = logits.shape()[1];
    let mut onehot = vec![0.0; labels.len() * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid("labels", format!("label {y} with {c} logits")));
        }
        onehot[i * c + y] = 1.0;
    }
    let onehot = Tensor::new(logits.shape(), onehot)?;
    logits
        .log_softmax()?
        .mul(&onehot)?
        .sum()?
        .mul_scalar(-1.0 / labels.len() as f64)
}

/// Plain SGD with momentum and L2 weight decay, in the usual
/// `v ← μ v + (g + λ θ)`, `θ ← θ − η v` form.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &[Tensor], grads: &[Tensor]) -> Result<Vec<Tensor>> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        params
            .iter()
            .zip(grads)
            .zip(&mut self.velocity)
            .map(|((p, g), v)| {
                let data = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .zip(v.iter_mut())
                    .map(|((&p, &g), v)| {
                        *v = self.momentum * *v + g + self.weight_decay * p;
                        p - self.lr * *v
                    })
                    .collect();
                Tensor::new(p.shape(), data)
            })
            .collect()
    }
}

/// Loss and parameter gradients for one minibatch.
pub fn loss_and_grads(model: &ModelCheckpoint, images: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let g = Graph::new();
    let params: Vec<Tensor> = model.param_tensors().iter().map(|t| g.leaf(t)).collect();
    let out = forward_with(model.spec(), &params, images)?;
    let loss = cross_entropy(&out.logits, labels)?;
    let refs: Vec<&Tensor> = params.iter().collect();
    let grads = grad(&loss, &refs, false)?;
    Ok((loss.item()?, grads))
}

/// Epoch-based schedule: SGD with momentum, ×`decay` at each milestone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs after which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl TrainSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.decay.powi(drops as i32)
    }
}

/// Minibatch training on `data`. `augment` applies one sampled transform per
/// batch. `on_epoch` sees the model after each completed epoch (1-based).
pub fn train(
    model: &ModelCheckpoint,
    data: &LabeledDataset,
    schedule: &TrainSchedule,
    augment: Option<&AugmentConfig>,
    rng: &mut impl Rng,
    mut on_epoch: impl FnMut(usize, &ModelCheckpoint) -> Result<()>,
) -> Result<ModelCheckpoint> {
    if schedule.batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be positive"));
    }
    let [_, h, w] = data.geometry();
    let mut model = model.clone();
    let mut opt = Sgd::new(schedule.lr, schedule.momentum, schedule.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..schedule.epochs {
        opt.lr = schedule.lr_at(epoch);
        order.shuffle(rng);
        for chunk in order.chunks(schedule.batch_size) {
            let mut images = data.select(chunk)?;
            if let Some(cfg) = augment {
                let p = augment::sample_params(cfg, (h, w), rng)?;
                images = augment::apply(&images, &p)?;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let (loss, grads) = loss_and_grads(&model, &images, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    stage: "train",
                    step: epoch + 1,
                    detail: format!("loss {loss}"),
                });
            }
            model = model.with_values(opt.step(&model.param_tensors(), &grads)?)?;
        }
        on_epoch(epoch + 1, &model)?;
    }
    Ok(model)
}

/// Fraction of `images` classified correctly, evaluated in batches.
pub fn accuracy(model: &ModelCheckpoint, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    let mut correct = 0usize;
    for start in (0..n).step_by(256) {
        let end = (start + 256).min(n);
        let logits = model.forward(&images.slice_rows(start, end)?)?.logits;
        let c = logits.shape()[1];
        for (row, &y) in logits.data().chunks(c).zip(&labels[start..end]) {
            // first maximal logit wins ties
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            correct += usize::from(pred == y);
        }
    }
    Ok(correct as f64 / n as f64)
}

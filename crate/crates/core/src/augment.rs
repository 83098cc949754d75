//! Differentiable augmentations with siamese parameter sharing: one sampled
//! [`AugmentationParams`] is applied to both the synthetic and the real
//! branch of a matching step.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, NO_SOURCE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    Flip,
    Shift,
    Scale,
    Brightness,
    Cutout,
}

impl Transform {
    pub const ALL: [Transform; 5] = [
        Transform::Flip,
        Transform::Shift,
        Transform::Scale,
        Transform::Brightness,
        Transform::Cutout,
    ];
}

/// Enabled transforms and the ranges their scalars are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: Vec<Transform>,
    /// Shifts are drawn from `-max_shift..=max_shift` pixels on each axis.
    pub max_shift: usize,
    pub scale: (f64, f64),
    pub brightness: (f64, f64),
    /// Cutout side as a fraction of the image side.
    pub cutout_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: Transform::ALL.to_vec(),
            max_shift: 2,
            scale: (0.8, 1.2),
            brightness: (-0.1, 0.1),
            cutout_frac: 0.25,
        }
    }
}

impl AugmentConfig {
    /// A family that can only produce identity transforms.
    pub fn neutral() -> Self {
        AugmentConfig {
            enabled: vec![Transform::Shift, Transform::Scale, Transform::Brightness],
            max_shift: 0,
            scale: (1.0, 1.0),
            brightness: (0.0, 0.0),
            cutout_frac: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transform", rename_all = "kebab-case")]
pub enum AugmentationParams {
    /// Horizontal mirror when `apply` is set.
    Flip { apply: bool },
    /// Integer translation with zero fill.
    Shift { dy: isize, dx: isize },
    /// Multiplies every pixel.
    Scale { factor: f64 },
    /// Adds to every pixel.
    Brightness { delta: f64 },
    /// Zeroes a rectangle.
    Cutout { y0: usize, x0: usize, h: usize, w: usize },
}

impl AugmentationParams {
    pub fn transform(&self) -> Transform {
        match self {
            AugmentationParams::Flip { .. } => Transform::Flip,
            AugmentationParams::Shift { .. } => Transform::Shift,
            AugmentationParams::Scale { .. } => Transform::Scale,
            AugmentationParams::Brightness { .. } => Transform::Brightness,
            AugmentationParams::Cutout { .. } => Transform::Cutout,
        }
    }
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Picks one enabled transform uniformly and draws its scalars. `image` is
/// the `(H, W)` the params will be applied to (cutout needs it).
pub fn sample_params(cfg: &AugmentConfig, image: (usize, usize), rng: &mut impl Rng) -> Result<AugmentationParams> {
    let &t = cfg
        .enabled
        .choose(rng)
        .ok_or_else(|| Error::invalid("augment", "no transforms enabled"))?;
    let (h, w) = image;
    Ok(match t {
        Transform::Flip => AugmentationParams::Flip { apply: rng.gen_bool(0.5) },
        Transform::Shift => {
            let m = cfg.max_shift as isize;
            AugmentationParams::Shift {
                dy: rng.gen_range(-m..=m),
                dx: rng.gen_range(-m..=m),
            }
        }
        Transform::Scale => AugmentationParams::Scale {
            factor: sample_range(rng, cfg.scale),
        },
        Transform::Brightness => AugmentationParams::Brightness {
            delta: sample_range(rng, cfg.brightness),
        },
        Transform::Cutout => {
            let ch = ((h as f64 * cfg.cutout_frac).round() as usize).min(h);
            let cw = ((w as f64 * cfg.cutout_frac).round() as usize).min(w);
            AugmentationParams::Cutout {
                y0: rng.gen_range(0..=h - ch),
                x0: rng.gen_range(0..=w - cw),
                h: ch,
                w: cw,
            }
        }
    })
}

/// Applies `params` to an `(N, C, H, W)` batch. Shape-preserving and
/// differentiable with respect to the batch.
pub fn apply(batch: &Tensor, params: &AugmentationParams) -> Result<Tensor> {
    if batch.ndim() != 4 {
        return Err(Error::invalid("batch", format!("expected (N, C, H, W), got {:?}", batch.shape())));
    }
    let s = batch.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let remap = |f: &dyn Fn(usize, usize) -> Option<(usize, usize)>| -> Result<Tensor> {
        let mut idx = Vec::with_capacity(batch.len());
        for p in 0..planes {
            for y in 0..h {
                for x in 0..w {
                    idx.push(match f(y, x) {
                        Some((sy, sx)) => (p * h + sy) * w + sx,
                        None => NO_SOURCE,
                    });
                }
            }
        }
        batch.gather(Rc::from(idx), s)
    };
    match *params {
        AugmentationParams::Flip { apply: false } => Ok(batch.clone()),
        AugmentationParams::Flip { apply: true } => remap(&|y, x| Some((y, w - 1 - x))),
        AugmentationParams::Shift { dy, dx } => remap(&|y, x| {
            let sy = y as isize - dy;
            let sx = x as isize - dx;
            (sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w).then(|| (sy as usize, sx as usize))
        }),
        AugmentationParams::Scale { factor } => batch.mul_scalar(factor),
        AugmentationParams::Brightness { delta } => batch.add_scalar(delta),
        AugmentationParams::Cutout { y0, x0, h: ch, w: cw } => {
            if y0 + ch > h || x0 + cw > w {
                return Err(Error::invalid("cutout", format!("rectangle exceeds {h}x{w} image")));
            }
            let mut mask = vec![1.0; batch.len()];
            for p in 0..planes {
                for y in y0..y0 + ch {
                    mask[(p * h + y) * w + x0..][..cw].fill(0.0);
                }
            }
            batch.mul(&Tensor::new(s, mask)?)
        }
    }
}

/// Which side of a siamese pair a transform was applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Synthetic,
    Real,
}

/// One recorded application: the step/class it belonged to, the branch, the
/// address of the params object and its value.
#[derive(Clone, Debug)]
pub struct SiameseRecord {
    pub step: usize,
    pub class: usize,
    pub branch: Branch,
    pub params_addr: usize,
    pub params: AugmentationParams,
}

/// Instrumentation hook for the siamese contract.
#[derive(Clone, Debug, Default)]
pub struct SiameseLog {
    pub step: usize,
    pub records: Vec<SiameseRecord>,
}

impl SiameseLog {
    /// True when every (step, class) pair saw one params object, applied to
    /// both branches.
    pub fn contract_holds(&self) -> bool {
        let mut pairs = std::collections::BTreeMap::new();
        for r in &self.records {
            pairs.entry((r.step, r.class)).or_insert_with(Vec::new).push(r);
        }
        !pairs.is_empty()
            && pairs.values().all(|rs| {
                rs.iter().any(|r| r.branch == Branch::Synthetic)
                    && rs.iter().any(|r| r.branch == Branch::Real)
                    && rs.iter().all(|r| r.params_addr == rs[0].params_addr && r.params == rs[0].params)
            })
    }
}

/// Applies one params object to both branches, recording it when a log is
/// attached.
pub fn apply_siamese(
    params: &AugmentationParams,
    synthetic: &Tensor,
    real: &Tensor,
    class: usize,
    log: Option<&mut SiameseLog>,
) -> Result<(Tensor, Tensor)> {
    let syn = apply(synthetic, params)?;
    let real = apply(real, params)?;
    if let Some(log) = log {
        let addr = params as *const AugmentationParams as usize;
        for branch in [Branch::Synthetic, Branch::Real] {
            log.records.push(SiameseRecord {
                step: log.step,
                class,
                branch,
                params_addr: addr,
                params: params.clone(),
            });
        }
    }
    Ok((syn, real))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch() -> Tensor {
        Tensor::new(&[2, 1, 4, 5], (0..40).map(|i| i as f64 / 40.0).collect()).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let x = batch();
        let p = AugmentationParams::Flip { apply: true };
        let once = apply(&x, &p).unwrap();
        assert_ne!(once, x);
        let twice = apply(&once, &p).unwrap();
        assert!(twice.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn neutral_params_are_identity() {
        let x = batch();
        for p in [
            AugmentationParams::Brightness { delta: 0.0 },
            AugmentationParams::Scale { factor: 1.0 },
            AugmentationParams::Shift { dy: 0, dx: 0 },
            AugmentationParams::Flip { apply: false },
        ] {
            assert_eq!(apply(&x, &p).unwrap(), x, "{p:?}");
        }
    }

    #[test]
    fn shift_and_cutout_geometry() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let s = apply(&x, &AugmentationParams::Shift { dy: 1, dx: -1 }).unwrap();
        assert_eq!(s.data(), &[0., 0., 0., 1., 1., 0., 1., 1., 0.]);
        let c = apply(&x, &AugmentationParams::Cutout { y0: 1, x0: 1, h: 2, w: 1 }).unwrap();
        assert_eq!(c.data(), &[1., 1., 1., 1., 0., 1., 1., 0., 1.]);
        assert!(apply(&x, &AugmentationParams::Cutout { y0: 2, x0: 0, h: 2, w: 1 }).is_err());
        assert!(apply(&Tensor::ones(&[3, 3]), &AugmentationParams::Flip { apply: true }).is_err());
    }

    #[test]
    fn sampling() {
        let only_flip = AugmentConfig {
            enabled: vec![Transform::Flip],
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(sample_params(&only_flip, (4, 4), &mut rng).unwrap().transform(), Transform::Flip);
        }
        let cfg = AugmentConfig::default();
        let a = sample_params(&cfg, (16, 16), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_params(&cfg, (16, 16), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let empty = AugmentConfig {
            enabled: vec![],
            ..AugmentConfig::default()
        };
        assert!(sample_params(&empty, (4, 4), &mut rng).is_err());
    }
}

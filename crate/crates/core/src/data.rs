//! Labeled and synthetic image sets, the two toy domains, class-balanced
//! batch sampling and dataset persistence.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::{self, Manifest, Reader, Writer, DATASET_MAGIC};

/// Real images `(N, C_in, H, W)` in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    domain: String,
}

fn check_pixels(images: &Tensor) -> Result<()> {
    if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid("images", format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

fn check_image_batch(images: &Tensor, n: usize) -> Result<()> {
    if images.ndim() != 4 || images.shape()[0] != n {
        return Err(Error::invalid(
            "images",
            format!("expected ({n}, C, H, W), got {:?}", images.shape()),
        ));
    }
    Ok(())
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, domain: impl Into<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("labels", "dataset is empty"));
        }
        check_image_batch(&images, labels.len())?;
        if let Some(y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid("labels", format!("label {y} outside [0, {classes})")));
        }
        check_pixels(&images)?;
        Ok(LabeledDataset {
            images: images.detach(),
            labels,
            classes,
            domain: domain.into(),
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C_in, H, W]` of one image.
    pub fn geometry(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> Result<Tensor> {
        self.images.select_rows(indices)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(DATASET_MAGIC);
        w.u32(0);
        w.len(self.classes);
        w.str(&self.domain);
        w.tensor(&self.images);
        write_labels(&mut w, &self.labels);
        io::write_file(path, &w.finish())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read_file(path)?;
        let mut r = Reader::new(&bytes, DATASET_MAGIC)?;
        if r.u32()? != 0 {
            return Err(Error::Format(format!("{} holds a synthetic set", path.display())));
        }
        let classes = r.len()?;
        let domain = r.str()?;
        let images = r.tensor()?;
        let labels = read_labels(&mut r)?;
        r.finish()?;
        Self::new(images, labels, classes, domain)
    }
}

fn write_labels(w: &mut Writer, labels: &[usize]) {
    w.len(labels.len());
    for &y in labels {
        w.len(y);
    }
}

fn read_labels(r: &mut Reader<'_>) -> Result<Vec<usize>> {
    let n = r.len()?;
    (0..n).map(|_| r.len()).collect()
}

/// The optimizable images. Labels are fixed at construction (`ipc` copies of
/// each class, class-major) and never change; only pixels are replaced.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    images: Tensor,
    labels: Vec<usize>,
    ipc: usize,
    classes: usize,
}

impl SyntheticDataset {
    pub fn new(images: Tensor, classes: usize, ipc: usize) -> Result<Self> {
        if ipc == 0 || classes < 2 {
            return Err(Error::invalid("ipc", format!("need ipc ≥ 1 and ≥ 2 classes, got {ipc}/{classes}")));
        }
        check_image_batch(&images, classes * ipc)?;
        check_pixels(&images)?;
        let labels = (0..classes).flat_map(|c| std::iter::repeat(c).take(ipc)).collect();
        Ok(SyntheticDataset {
            images: images.detach(),
            labels,
            ipc,
            classes,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn geometry(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Row indices holding class `c`.
    pub fn class_rows(&self, class: usize) -> std::ops::Range<usize> {
        class * self.ipc..(class + 1) * self.ipc
    }

    /// Same labels, new pixels.
    pub fn with_images(&self, images: Tensor) -> Result<Self> {
        if images.shape() != self.images.shape() {
            return Err(Error::ShapeMismatch {
                op: "with_images",
                lhs: self.images.shape().to_vec(),
                rhs: images.shape().to_vec(),
            });
        }
        check_pixels(&images)?;
        Ok(SyntheticDataset {
            images: images.detach(),
            ..self.clone()
        })
    }

    /// View as an ordinary labeled set (for training on it).
    pub fn to_labeled(&self, domain: &str) -> LabeledDataset {
        LabeledDataset {
            images: self.images.clone(),
            labels: self.labels.clone(),
            classes: self.classes,
            domain: domain.to_string(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(DATASET_MAGIC);
        w.u32(1);
        w.len(self.classes);
        w.len(self.ipc);
        w.tensor(&self.images);
        write_labels(&mut w, &self.labels);
        io::write_file(path, &w.finish())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read_file(path)?;
        let mut r = Reader::new(&bytes, DATASET_MAGIC)?;
        if r.u32()? != 1 {
            return Err(Error::Format(format!("{} is not a synthetic set", path.display())));
        }
        let classes = r.len()?;
        let ipc = r.len()?;
        let images = r.tensor()?;
        let labels = read_labels(&mut r)?;
        r.finish()?;
        let s = Self::new(images, classes, ipc)?;
        if s.labels != labels {
            return Err(Error::Format("synthetic label block is not class-balanced".into()));
        }
        Ok(s)
    }
}

/// Toy image domains sharing geometry but no generative parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    /// Gaussian texture patches at class-specific anchors.
    BlobsA,
    /// Oriented gratings, one orientation per class.
    StripesB,
}

impl Recipe {
    pub fn id(self) -> &'static str {
        match self {
            Recipe::BlobsA => "blobs-a",
            Recipe::StripesB => "stripes-b",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs-a" => Ok(Recipe::BlobsA),
            "stripes-b" => Ok(Recipe::StripesB),
            _ => Err(Error::invalid("recipe", format!("unknown recipe `{s}`"))),
        }
    }
}

/// Parameters of a toy-domain draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub recipe: Recipe,
    pub classes: usize,
    pub per_class: usize,
    /// Square image side.
    pub size: usize,
    /// Class separation: anchor radius for blobs, grating contrast for stripes.
    pub separation: f64,
    pub seed: u64,
}

impl ToyConfig {
    pub fn blobs(classes: usize, per_class: usize, seed: u64) -> Self {
        ToyConfig {
            recipe: Recipe::BlobsA,
            classes,
            per_class,
            size: 16,
            separation: 2.0,
            seed,
        }
    }

    pub fn stripes(classes: usize, per_class: usize, seed: u64) -> Self {
        ToyConfig {
            recipe: Recipe::StripesB,
            classes,
            per_class,
            size: 16,
            separation: 2.0,
            seed,
        }
    }

    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.set("recipe", self.recipe)
            .set("classes", self.classes)
            .set("per_class", self.per_class)
            .set("size", self.size)
            .set("separation", self.separation)
            .set("seed", self.seed);
        m
    }

    pub fn generate(&self) -> Result<LabeledDataset> {
        match self.recipe {
            Recipe::BlobsA => generate_blobs(self),
            Recipe::StripesB => generate_stripes(self),
        }
    }
}

// Fixed seed for per-class texture fields, so every draw of the recipe
// shares class definitions regardless of the sample seed.
const TEXTURE_SEED: u64 = 0xB10B_5A;

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn validate_toy(cfg: &ToyConfig) -> Result<()> {
    if cfg.classes < 2 {
        return Err(Error::invalid("classes", "need at least 2"));
    }
    if !(cfg.separation > 0.0) {
        return Err(Error::invalid("separation", format!("must be positive, got {}", cfg.separation)));
    }
    if cfg.per_class == 0 || cfg.size < 4 {
        return Err(Error::invalid("size", "need per_class ≥ 1 and size ≥ 4"));
    }
    Ok(())
}

/// Class-conditional Gaussian texture patches rendered at class anchors on a
/// ring, with positional jitter, pixel noise and a class-agnostic distractor.
pub fn generate_blobs(cfg: &ToyConfig) -> Result<LabeledDataset> {
    validate_toy(cfg)?;
    let s = cfg.size;
    let sf = s as f64;
    let centre = (sf - 1.0) / 2.0;
    let radius = cfg.separation * sf / 8.0;
    let sigma = sf / 8.0;
    let jitter = sf / 10.0;

    let mut tex_rng = ChaCha8Rng::seed_from_u64(TEXTURE_SEED);
    let textures: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..s * s).map(|_| tex_rng.gen_range(-0.35..0.35)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.classes * cfg.per_class;
    let mut data = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % cfg.classes;
        let angle = 2.0 * PI * c as f64 / cfg.classes as f64;
        let ay = centre + radius * angle.sin() + jitter * gaussian(&mut rng);
        let ax = centre + radius * angle.cos() + jitter * gaussian(&mut rng);
        let amp = rng.gen_range(0.25..0.45);
        let dy = rng.gen_range(0.0..sf);
        let dx = rng.gen_range(0.0..sf);
        let damp = rng.gen_range(0.0..0.25);
        for y in 0..s {
            for x in 0..s {
                let (yf, xf) = (y as f64, x as f64);
                let bump = (-((yf - ay).powi(2) + (xf - ax).powi(2)) / (2.0 * sigma * sigma)).exp();
                let distractor = (-((yf - dy).powi(2) + (xf - dx).powi(2)) / (2.0 * sigma * sigma)).exp();
                let v = 0.3
                    + amp * bump * (1.0 + textures[c][y * s + x])
                    + damp * distractor
                    + 0.08 * gaussian(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(c);
    }
    let images = Tensor::new(&[n, 1, s, s], data)?;
    LabeledDataset::new(images, labels, cfg.classes, Recipe::BlobsA.id())
}

/// Oriented sinusoidal gratings: class `c` has orientation `π c / C`, each
/// image a random phase, frequency wobble and pixel noise.
pub fn generate_stripes(cfg: &ToyConfig) -> Result<LabeledDataset> {
    validate_toy(cfg)?;
    let s = cfg.size;
    let contrast = 0.1 * cfg.separation;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.classes * cfg.per_class;
    let mut data = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % cfg.classes;
        let theta = PI * c as f64 / cfg.classes as f64 + 0.1 * gaussian(&mut rng);
        let freq = rng.gen_range(0.18..0.3);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let (st, ct) = theta.sin_cos();
        for y in 0..s {
            for x in 0..s {
                let u = x as f64 * ct + y as f64 * st;
                let v = 0.5 + contrast * (2.0 * PI * freq * u + phase).cos() + 0.08 * gaussian(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(c);
    }
    let images = Tensor::new(&[n, 1, s, s], data)?;
    LabeledDataset::new(images, labels, cfg.classes, Recipe::StripesB.id())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    RealSample,
    GaussianNoise,
}

/// Standard deviation of the noise initialization around mid-grey.
const NOISE_STD: f64 = 0.2;

pub fn init_synthetic(source: &LabeledDataset, ipc: usize, mode: InitMode, seed: u64) -> Result<SyntheticDataset> {
    let [c_in, h, w] = source.geometry();
    let classes = source.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = match mode {
        InitMode::RealSample => {
            let mut picks = Vec::with_capacity(classes * ipc);
            for c in 0..classes {
                let pool = source.class_indices(c);
                if pool.len() < ipc {
                    return Err(Error::invalid(
                        "ipc",
                        format!("class {c} has {} images, {ipc} requested", pool.len()),
                    ));
                }
                picks.extend(pool.choose_multiple(&mut rng, ipc).copied());
            }
            source.select(&picks)?.detach()
        }
        InitMode::GaussianNoise => {
            let n = classes * ipc * c_in * h * w;
            let data = (0..n)
                .map(|_| (0.5 + NOISE_STD * gaussian(&mut rng)).clamp(0.0, 1.0))
                .collect();
            Tensor::new(&[classes * ipc, c_in, h, w], data)?
        }
    };
    SyntheticDataset::new(images, classes, ipc)
}

/// Indices of a random batch of class `class`, without replacement. A batch
/// larger than the class yields a permutation of the whole class.
pub fn sample_class_indices(dataset: &LabeledDataset, class: usize, batch: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut pool = dataset.class_indices(class);
    if pool.is_empty() {
        return Err(Error::invalid("class", format!("class {class} has no images")));
    }
    let take = batch.min(pool.len());
    let (chosen, _) = pool.partial_shuffle(rng, take);
    Ok(chosen.to_vec())
}

pub fn sample_class_batch(dataset: &LabeledDataset, class: usize, batch: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let idx = sample_class_indices(dataset, class, batch, rng)?;
    dataset.select(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_balanced_and_seeded() {
        let cfg = ToyConfig::blobs(3, 200, 5);
        let d = cfg.generate().unwrap();
        assert_eq!(d.len(), 600);
        assert_eq!(d.class_counts(), vec![200; 3]);
        let again = cfg.generate().unwrap();
        let bits = |d: &LabeledDataset| d.images().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&d), bits(&again));
        assert_eq!(d.labels(), again.labels());
        assert_ne!(bits(&d), bits(&ToyConfig::blobs(3, 200, 6).generate().unwrap()));
    }

    #[test]
    fn invalid_toy_configs() {
        assert!(ToyConfig::blobs(1, 10, 0).generate().is_err());
        let mut cfg = ToyConfig::stripes(3, 10, 0);
        cfg.separation = 0.0;
        assert!(cfg.generate().is_err());
    }

    #[test]
    fn real_sample_init_copies_same_class_images() {
        let d = ToyConfig::blobs(3, 20, 1).generate().unwrap();
        let s = init_synthetic(&d, 10, InitMode::RealSample, 3).unwrap();
        assert_eq!(s.len(), 30);
        let img = 256;
        for (i, &y) in s.labels().iter().enumerate() {
            let row = &s.images().data()[i * img..(i + 1) * img];
            assert!(d
                .class_indices(y)
                .iter()
                .any(|&j| &d.images().data()[j * img..(j + 1) * img] == row));
        }
        assert!(init_synthetic(&d, 21, InitMode::RealSample, 3).is_err());
    }

    #[test]
    fn noise_init_is_mid_grey() {
        let d = ToyConfig::blobs(3, 20, 1).generate().unwrap();
        for seed in 0..10 {
            let s = init_synthetic(&d, 10, InitMode::GaussianNoise, seed).unwrap();
            let mean = s.images().data().iter().sum::<f64>() / s.images().len() as f64;
            assert!((0.4..=0.6).contains(&mean), "seed {seed}: {mean}");
        }
    }

    #[test]
    fn class_batches() {
        let d = ToyConfig::blobs(3, 20, 1).generate().unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let mut all = sample_class_indices(&d, 1, 20, &mut r1).unwrap();
        assert_eq!(all, sample_class_indices(&d, 1, 20, &mut r2).unwrap());
        all.sort();
        assert_eq!(all, d.class_indices(1));
        let batch = sample_class_batch(&d, 2, 5, &mut r1).unwrap();
        assert_eq!(batch.shape(), &[5, 1, 16, 16]);
        let lone = LabeledDataset::new(Tensor::zeros(&[1, 1, 4, 4]), vec![0], 2, "x").unwrap();
        assert!(sample_class_batch(&lone, 1, 3, &mut r1).is_err());
    }

    #[test]
    fn datasets_reject_bad_inputs() {
        assert!(LabeledDataset::new(Tensor::full(&[1, 1, 2, 2], 1.5), vec![0], 2, "x").is_err());
        assert!(LabeledDataset::new(Tensor::zeros(&[1, 1, 2, 2]), vec![2], 2, "x").is_err());
        assert!(SyntheticDataset::new(Tensor::zeros(&[5, 1, 2, 2]), 2, 2).is_err());
    }
}

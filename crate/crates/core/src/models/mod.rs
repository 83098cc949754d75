//! Compact image classifiers: the distillation backbone, the diversified
//! pool architectures, and the feature extractor used by distribution
//! matching and the contrastive supervision loss.
//!
//! Every family maps an `(B, C_in, H, W)` batch to logits `(B, classes)` and
//! exposes the flattened penultimate activation as its features `(B, Φ)`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::{self, Reader, Writer, CHECKPOINT_MAGIC};

mod pretrain;

pub use pretrain::{pretrain, PretrainSchedule};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Conv blocks (3x3 conv, instance norm, relu, 2x2 average pool).
    ConvNet,
    /// Fully connected hidden layers on the flattened image.
    Mlp,
    /// Two convolutions per block before each pool.
    WideConv,
    /// Stride-2 convolutions instead of pooling.
    StridedConv,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::ConvNet, Family::Mlp, Family::WideConv, Family::StridedConv];

    pub fn id(self) -> &'static str {
        match self {
            Family::ConvNet => "conv-net",
            Family::Mlp => "mlp",
            Family::WideConv => "wide-conv",
            Family::StridedConv => "strided-conv",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Family::ConvNet => 0,
            Family::Mlp => 1,
            Family::WideConv => 2,
            Family::StridedConv => 3,
        }
    }

    pub(crate) fn from_code(code: u32) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.code() == code)
            .ok_or_else(|| Error::Format(format!("unknown architecture family code {code}")))
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.id() == s)
            .ok_or_else(|| Error::invalid("arch", format!("unknown architecture `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub family: Family,
    /// Conv blocks, or hidden layers for the MLP.
    pub depth: usize,
    /// Channels, or hidden units for the MLP.
    pub width: usize,
    /// `[channels, height, width]` of one input image.
    pub input: [usize; 3],
    pub classes: usize,
}

/// Name and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ArchitectureSpec {
    /// Desk-scale preset for a family: the depth/width used throughout the
    /// experiments.
    pub fn preset(family: Family, input: [usize; 3], classes: usize) -> Self {
        let (depth, width) = match family {
            Family::ConvNet => (3, 8),
            Family::Mlp => (2, 48),
            Family::WideConv => (2, 12),
            Family::StridedConv => (3, 12),
        };
        ArchitectureSpec {
            family,
            depth,
            width,
            input,
            classes,
        }
    }

    pub fn id(&self) -> String {
        format!("{}-d{}-w{}", self.family, self.depth, self.width)
    }

    /// Spatial size after each normalized conv stage, in order.
    fn conv_stages(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input[1], self.input[2]);
        let mut stages = Vec::new();
        for _ in 0..self.depth {
            match self.family {
                Family::ConvNet | Family::WideConv => {
                    stages.push((h, w));
                    h /= 2;
                    w /= 2;
                }
                Family::StridedConv => {
                    h = (h + 1) / 2;
                    w = (w + 1) / 2;
                    stages.push((h, w));
                }
                Family::Mlp => {}
            }
        }
        stages
    }

    fn final_spatial(&self) -> (usize, usize) {
        match self.family {
            Family::ConvNet | Family::WideConv => {
                (self.input[1] >> self.depth, self.input[2] >> self.depth)
            }
            Family::StridedConv => *self.conv_stages().last().unwrap_or(&(self.input[1], self.input[2])),
            Family::Mlp => (1, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.width < 1 {
            return Err(Error::invalid("spec", format!("depth and width must be ≥ 1 in {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::invalid("spec", format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::invalid("spec", format!("empty input shape {:?}", self.input)));
        }
        if self.family != Family::Mlp {
            // instance norm over a single pixel would erase the activation
            if self.conv_stages().iter().any(|&(h, w)| h * w < 2) {
                return Err(Error::invalid(
                    "spec",
                    format!("input {:?} too small for {} conv stages", self.input, self.depth),
                ));
            }
            let (h, w) = self.final_spatial();
            if h == 0 || w == 0 {
                return Err(Error::invalid("spec", format!("input {:?} pooled away", self.input)));
            }
        }
        Ok(())
    }

    /// Dimension Φ of the feature vector.
    pub fn feature_dim(&self) -> usize {
        match self.family {
            Family::Mlp => self.width,
            _ => {
                let (h, w) = self.final_spatial();
                self.width * h * w
            }
        }
    }

    pub fn param_shapes(&self) -> Vec<ParamShape> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, fan_in: usize| {
            out.push(ParamShape { name, shape, fan_in });
        };
        let w = self.width;
        match self.family {
            Family::ConvNet | Family::StridedConv => {
                let mut c_in = self.input[0];
                for i in 0..self.depth {
                    push(format!("conv{i}.weight"), vec![w, c_in, 3, 3], c_in * 9);
                    c_in = w;
                }
            }
            Family::WideConv => {
                let mut c_in = self.input[0];
                for i in 0..self.depth {
                    push(format!("conv{i}a.weight"), vec![w, c_in, 3, 3], c_in * 9);
                    push(format!("conv{i}b.weight"), vec![w, w, 3, 3], w * 9);
                    c_in = w;
                }
            }
            Family::Mlp => {
                let mut fan = self.input.iter().product();
                for i in 0..self.depth {
                    push(format!("fc{i}.weight"), vec![w, fan], fan);
                    push(format!("fc{i}.bias"), vec![w], fan);
                    fan = w;
                }
            }
        }
        let phi = self.feature_dim();
        push("head.weight".into(), vec![self.classes, phi], phi);
        push("head.bias".into(), vec![self.classes], phi);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    /// Input shapes and class count agree, so the two specs can share a pool.
    pub fn interchangeable(&self, other: &ArchitectureSpec) -> bool {
        self.input == other.input && self.classes == other.classes
    }
}

/// Where a checkpoint came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// Training epochs completed; 0 for a freshly initialized model.
    pub epoch: usize,
    pub source: String,
}

/// Logits and penultimate features of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Tensor,
    pub features: Tensor,
}

/// Parameters of one architecture plus their provenance. Immutable once
/// built; training produces new checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    spec: ArchitectureSpec,
    params: Vec<(String, Tensor)>,
    provenance: Provenance,
}

impl ModelCheckpoint {
    /// Seeded uniform fan-in initialization: every parameter is drawn from
    /// `U(-1/√fan_in, 1/√fan_in)`.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|p| {
                let bound = 1.0 / (p.fan_in as f64).sqrt();
                let n: usize = p.shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                (p.name, Tensor::new(&p.shape, data).expect("shape from spec"))
            })
            .collect();
        Ok(ModelCheckpoint {
            spec: spec.clone(),
            params,
            provenance: Provenance {
                seed,
                epoch: 0,
                source: String::new(),
            },
        })
    }

    /// Assembles a checkpoint, checking names and shapes against `spec`.
    pub fn from_parts(spec: ArchitectureSpec, params: Vec<(String, Tensor)>, provenance: Provenance) -> Result<Self> {
        spec.validate()?;
        let expected = spec.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::invalid(
                "params",
                format!("{} tensors for a spec with {}", params.len(), expected.len()),
            ));
        }
        for (want, (name, t)) in expected.iter().zip(&params) {
            if &want.name != name || want.shape != t.shape() {
                return Err(Error::invalid(
                    "params",
                    format!("expected {} {:?}, found {} {:?}", want.name, want.shape, name, t.shape()),
                ));
            }
        }
        let params = params.into_iter().map(|(n, t)| (n, t.detach())).collect();
        Ok(ModelCheckpoint {
            spec,
            params,
            provenance,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Same spec and provenance, new parameter values (same order).
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<Self> {
        let params = self.params.iter().map(|(n, _)| n.clone()).zip(values).collect();
        Self::from_parts(self.spec.clone(), params, self.provenance.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        let s = &self.spec;
        w.u32(s.family.code());
        w.len(s.depth);
        w.len(s.width);
        for &d in &s.input {
            w.len(d);
        }
        w.len(s.classes);
        w.u64(self.provenance.seed);
        w.len(self.provenance.epoch);
        w.str(&self.provenance.source);
        w.len(self.params.len());
        for (name, t) in &self.params {
            w.str(name);
            w.tensor(t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, CHECKPOINT_MAGIC)?;
        let family = Family::from_code(r.u32()?)?;
        let depth = r.len()?;
        let width = r.len()?;
        let input = [r.len()?, r.len()?, r.len()?];
        let classes = r.len()?;
        let spec = ArchitectureSpec {
            family,
            depth,
            width,
            input,
            classes,
        };
        let provenance = Provenance {
            seed: r.u64()?,
            epoch: r.len()?,
            source: r.str()?,
        };
        let count = r.len()?;
        let params = (0..count)
            .map(|_| Ok((r.str()?, r.tensor()?)))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::from_parts(spec, params, provenance).map_err(|e| Error::Format(format!("checkpoint does not match its spec: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_file(path)?)
    }

    /// Forward pass with the stored parameters, which enter as constants:
    /// gradients can reach the batch but never the checkpoint.
    pub fn forward(&self, batch: &Tensor) -> Result<Forward> {
        forward_with(&self.spec, &self.param_tensors(), batch)
    }
}

fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let (rows, n) = (s[0] * s[1], s[2] * s[3]);
    let flat = x.reshape(&[rows, n])?;
    let inv_n = 1.0 / n as f64;
    let mean = flat.row_sums()?.mul_scalar(inv_n)?;
    let centered = flat.sub(&mean.repeat_cols(n)?)?;
    let var = centered.mul(&centered)?.row_sums()?.mul_scalar(inv_n)?;
    let std = var.add_scalar(NORM_EPS)?.sqrt()?;
    centered.div(&std.repeat_cols(n)?)?.reshape(&s)
}

/// Convolutions carry no bias: the normalization right after would cancel it.
fn conv_block(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    instance_norm(&x.conv2d(w, stride, 1)?)?.relu()
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(&w.transpose()?)?.add_bias(b)
}

/// Forward pass with explicit parameter tensors (which may be graph leaves).
pub fn forward_with(spec: &ArchitectureSpec, params: &[Tensor], batch: &Tensor) -> Result<Forward> {
    let expected = spec.param_shapes();
    if params.len() != expected.len() {
        return Err(Error::invalid("params", format!("{} tensors, spec needs {}", params.len(), expected.len())));
    }
    for (p, t) in expected.iter().zip(params) {
        if p.shape != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: p.shape.clone(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    if batch.ndim() != 4 || batch.shape()[1..] != spec.input {
        let mut want = vec![batch.shape().first().copied().unwrap_or(0)];
        want.extend(spec.input);
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: want,
            rhs: batch.shape().to_vec(),
        });
    }
    let b = batch.shape()[0];
    let mut h = batch.clone();
    let mut it = params.iter();
    let mut next = || it.next().expect("count checked above");
    match spec.family {
        Family::ConvNet => {
            for _ in 0..spec.depth {
                h = conv_block(&h, next(), 1)?.avg_pool2d(2)?;
            }
        }
        Family::WideConv => {
            for _ in 0..spec.depth {
                h = conv_block(&h, next(), 1)?;
                h = conv_block(&h, next(), 1)?.avg_pool2d(2)?;
            }
        }
        Family::StridedConv => {
            for _ in 0..spec.depth {
                h = conv_block(&h, next(), 2)?;
            }
        }
        Family::Mlp => {
            h = h.reshape(&[b, spec.input.iter().product()])?;
            for _ in 0..spec.depth {
                let (w, bias) = (next(), next());
                h = linear(&h, w, bias)?.relu()?;
            }
        }
    }
    let features = h.reshape(&[b, spec.feature_dim()])?;
    let (hw, hb) = (next(), next());
    let logits = linear(&features, hw, hb)?;
    Ok(Forward { logits, features })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            family: Family::ConvNet,
            depth: 3,
            width: 32,
            input: [1, 16, 16],
            classes: 3,
        }
    }

    #[test]
    fn convnet_param_count_matches_hand_count() {
        // conv0: 32·1·9 = 288
        // conv1, conv2: 32·32·9 = 9216 each
        // 16 → 8 → 4 → 2, so Φ = 32·2·2 = 128; head: 3·128 + 3 = 387
        assert_eq!(conv_spec().param_count(), 288 + 9216 + 9216 + 387);
        assert_eq!(conv_spec().feature_dim(), 128);
    }

    #[test]
    fn build_is_seeded() {
        let spec = conv_spec();
        let a = ModelCheckpoint::build(&spec, 7).unwrap();
        let b = ModelCheckpoint::build(&spec, 7).unwrap();
        let c = ModelCheckpoint::build(&spec, 8).unwrap();
        let bits = |m: &ModelCheckpoint| -> Vec<u64> {
            m.params().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert!(a.params().iter().zip(c.params()).any(|((_, x), (_, y))| x != y));
    }

    #[test]
    fn spec_validation() {
        let mut s = conv_spec();
        s.classes = 1;
        assert!(s.validate().is_err());
        let mut s = conv_spec();
        s.depth = 0;
        assert!(s.validate().is_err());
        let mut s = conv_spec();
        s.depth = 5; // 16 → 1 pixel before the last pool
        assert!(s.validate().is_err());
        for f in Family::ALL {
            ArchitectureSpec::preset(f, [1, 16, 16], 4).validate().unwrap();
        }
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        for family in Family::ALL {
            let spec = ArchitectureSpec::preset(family, [1, 16, 16], 4);
            let m = ModelCheckpoint::build(&spec, 1).unwrap();
            let zeros = m.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
            let m = m.with_values(zeros).unwrap();
            let x = Tensor::full(&[3, 1, 16, 16], 0.3);
            let out = m.forward(&x).unwrap();
            assert!(out.logits.data().iter().all(|&v| v == 0.0));
            let p = out.logits.softmax().unwrap();
            assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn shapes_and_purity() {
        for family in Family::ALL {
            let spec = ArchitectureSpec::preset(family, [1, 16, 16], 3);
            let m = ModelCheckpoint::build(&spec, 3).unwrap();
            let row: Vec<f64> = (0..256).map(|i| (i as f64 * 0.1).sin().abs()).collect();
            let mut data = row.clone();
            data.extend(&row);
            data.extend((0..512).map(|i| (i as f64 * 0.3).cos().abs()));
            let x = Tensor::new(&[4, 1, 16, 16], data).unwrap();
            let out = m.forward(&x).unwrap();
            assert_eq!(out.logits.shape(), &[4, 3]);
            assert_eq!(out.features.shape(), &[4, spec.feature_dim()]);
            let phi = spec.feature_dim();
            assert_eq!(out.features.data()[..phi], out.features.data()[phi..2 * phi]);
            let again = m.forward(&x).unwrap();
            assert_eq!(out.logits, again.logits);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        for family in Family::ALL {
            let spec = ArchitectureSpec::preset(family, [1, 16, 16], 3);
            let m = ModelCheckpoint::build(&spec, 11).unwrap().with_provenance(Provenance {
                seed: 11,
                epoch: 4,
                source: "blobs-a".into(),
            });
            let bytes = m.to_bytes();
            let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_bytes(), bytes);
        }
        let bytes = ModelCheckpoint::build(&conv_spec(), 1).unwrap().to_bytes();
        assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn forward_rejects_wrong_geometry() {
        let m = ModelCheckpoint::build(&conv_spec(), 0).unwrap();
        assert!(m.forward(&Tensor::zeros(&[2, 1, 8, 8])).is_err());
        assert!(m.forward(&Tensor::zeros(&[2, 16, 16])).is_err());
    }
}

//! The attention-guided multi-scale counting network.
//!
//! Three shallow convolutional branches with large/medium/small
//! receptive fields run in parallel on a grayscale image; their
//! concatenated features pass through a soft attention head (a learned
//! score map, spatially softmaxed into a probability map M, multiplied
//! back onto the features) and a 1×1 convolution that emits a
//! quarter-resolution density map. Variants move the attention head
//! around: one joint head, one head per branch, or a single branch.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::scalar::{sc, Scalar};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input {h}x{w} is not divisible by 4")]
    Indivisible { h: usize, w: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated checkpoint")]
    Truncated { path: PathBuf },
    #[error("{path}: corrupt checkpoint: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("{path}: tensor {name} has shape {got:?}, model expects {expected:?}")]
    ShapeInconsistency { path: PathBuf, name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("adopting {name}: shape {got:?} does not match {expected:?}")]
    AdoptShape { name: String, expected: Vec<usize>, got: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchLabel {
    L,
    M,
    S,
}

impl BranchLabel {
    pub const ALL: [BranchLabel; 3] = [BranchLabel::L, BranchLabel::M, BranchLabel::S];

    pub fn as_str(self) -> &'static str {
        match self {
            BranchLabel::L => "L",
            BranchLabel::M => "M",
            BranchLabel::S => "S",
        }
    }
}

/// One branch: 4 conv layers (pool after the first two), all ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchSpec {
    pub label: BranchLabel,
    pub kernels: [usize; 4],
    pub channels: [usize; 4],
}

impl BranchSpec {
    /// The stock large/medium/small receptive-field columns:
    /// L 9-7-7-7 × 16-32-16-8, M 7-5-5-5 × 20-40-20-10,
    /// S 5-3-3-3 × 24-48-24-12.
    pub fn standard(label: BranchLabel) -> Self {
        match label {
            BranchLabel::L => {
                BranchSpec { label, kernels: [9, 7, 7, 7], channels: [16, 32, 16, 8] }
            }
            BranchLabel::M => {
                BranchSpec { label, kernels: [7, 5, 5, 5], channels: [20, 40, 20, 10] }
            }
            BranchLabel::S => {
                BranchSpec { label, kernels: [5, 3, 3, 3], channels: [24, 48, 24, 12] }
            }
        }
    }

    pub fn out_channels(&self) -> usize {
        self.channels[3]
    }

    fn validate(&self) -> Result<(), ModelError> {
        if let Some(k) = self.kernels.iter().find(|k| **k % 2 == 0 || **k == 0) {
            return Err(ModelError::BadSpec(format!(
                "branch {}: kernel size {k} must be odd",
                self.label.as_str()
            )));
        }
        if self.channels.contains(&0) {
            return Err(ModelError::BadSpec(format!(
                "branch {}: zero-width layer",
                self.label.as_str()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Three branches, one attention head on the concatenated features.
    AmCnn,
    /// Three branches, one attention head per branch before concat.
    AmCnn3,
    /// One branch with its own attention head.
    SingleBranch(BranchLabel),
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::AmCnn => "am-cnn",
            Variant::AmCnn3 => "am-cnn3",
            Variant::SingleBranch(BranchLabel::L) => "single-L",
            Variant::SingleBranch(BranchLabel::M) => "single-M",
            Variant::SingleBranch(BranchLabel::S) => "single-S",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "am-cnn" => Ok(Variant::AmCnn),
            "am-cnn3" => Ok(Variant::AmCnn3),
            "single-L" => Ok(Variant::SingleBranch(BranchLabel::L)),
            "single-M" => Ok(Variant::SingleBranch(BranchLabel::M)),
            "single-S" => Ok(Variant::SingleBranch(BranchLabel::S)),
            _ => Err(format!(
                "unknown variant `{s}` (expected am-cnn, am-cnn3, single-L, single-M or single-S)"
            )),
        }
    }
}

/// How fresh weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightInit {
    /// All weights N(0, 0.01²). Faithful to the published recipe but
    /// starves deep branches of signal when training from scratch.
    Narrow,
    /// Branch convs N(0, 2/fan_in); attention and output head stay at
    /// N(0, 0.01²), which keeps scores small and M near uniform early.
    #[default]
    FanIn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub specs: Vec<BranchSpec>,
    /// Attention score conv kernel size (odd). 1 is the stock choice.
    pub attention_kernel: usize,
    /// Multiply M by the number of spatial positions before reweighting
    /// features, so attended features keep the input's magnitude.
    pub rescale: bool,
    pub init: WeightInit,
    pub seed: u64,
}

impl ModelConfig {
    /// Standard branch specs for `variant`, attention kernel 1,
    /// rescale on.
    pub fn new(variant: Variant) -> Self {
        let specs = match variant {
            Variant::AmCnn | Variant::AmCnn3 => {
                BranchLabel::ALL.iter().map(|&l| BranchSpec::standard(l)).collect()
            }
            Variant::SingleBranch(l) => vec![BranchSpec::standard(l)],
        };
        ModelConfig {
            variant,
            specs,
            attention_kernel: 1,
            rescale: true,
            init: WeightInit::default(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_init(mut self, init: WeightInit) -> Self {
        self.init = init;
        self
    }

    pub fn with_rescale(mut self, rescale: bool) -> Self {
        self.rescale = rescale;
        self
    }

    pub fn with_attention_kernel(mut self, k: usize) -> Self {
        self.attention_kernel = k;
        self
    }

    fn validate(&self) -> Result<(), ModelError> {
        let want = match self.variant {
            Variant::AmCnn | Variant::AmCnn3 => 3,
            Variant::SingleBranch(_) => 1,
        };
        if self.specs.len() != want {
            return Err(ModelError::BadSpec(format!(
                "variant {} takes {want} branch specs, got {}",
                self.variant.as_str(),
                self.specs.len()
            )));
        }
        if let Variant::SingleBranch(l) = self.variant {
            if self.specs[0].label != l {
                return Err(ModelError::BadSpec(format!(
                    "variant {} built with branch {}",
                    self.variant.as_str(),
                    self.specs[0].label.as_str()
                )));
            }
        }
        for s in &self.specs {
            s.validate()?;
        }
        if self.attention_kernel % 2 == 0 || self.attention_kernel == 0 {
            return Err(ModelError::BadSpec(format!(
                "attention kernel {} must be odd",
                self.attention_kernel
            )));
        }
        Ok(())
    }
}

struct ConvParams<T: Scalar> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

struct BranchParams<T: Scalar> {
    convs: Vec<ConvParams<T>>,
}

/// A built network: specs plus every named weight tensor.
pub struct Model<T: Scalar> {
    config: ModelConfig,
    branches: Vec<BranchParams<T>>,
    attentions: Vec<ConvParams<T>>,
    output: ConvParams<T>,
}

impl<T: Scalar> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Model({}, seed={})", self.config.variant.as_str(), self.config.seed)
    }
}

/// Result of a full forward pass.
pub struct ForwardOutput<T: Scalar> {
    /// Non-negative density at 1/4 the input resolution, `[1,H/4,W/4]`.
    pub density: Tensor<T>,
    /// Probability map(s) M, each summing to 1. One map, or one per
    /// branch for the per-branch-attention variant.
    pub attention_maps: Vec<Tensor<T>>,
}

/// Weights drawn in f64 then narrowed, so every `T` sees the same
/// stream.
fn draw<T: Scalar>(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<T> {
    let dist = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| sc(dist.sample(rng))).collect()
}

fn conv_init<T: Scalar>(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
    std: f64,
) -> ConvParams<T> {
    let weight =
        Tensor::from_vec(&[c_out, c_in, k, k], draw(rng, std, c_out * c_in * k * k)).unwrap();
    let bias = Tensor::zeros(&[c_out]);
    ConvParams { weight, bias }
}

/// Builds and initializes a model. Weight draw order is fixed
/// (branches, then attention heads, then the output head), so a seed
/// pins every parameter bitwise.
pub fn build_model<T: Scalar>(config: ModelConfig) -> Result<Model<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let narrow = 0.01;
    let mut branches = Vec::with_capacity(config.specs.len());
    for spec in &config.specs {
        let mut convs = Vec::with_capacity(4);
        let mut c_in = 1;
        for layer in 0..4 {
            let (c_out, k) = (spec.channels[layer], spec.kernels[layer]);
            let std = match config.init {
                WeightInit::Narrow => narrow,
                WeightInit::FanIn => (2.0 / (c_in * k * k) as f64).sqrt(),
            };
            convs.push(conv_init(&mut rng, c_out, c_in, k, std));
            c_in = c_out;
        }
        branches.push(BranchParams { convs });
    }
    let concat_c: usize = config.specs.iter().map(BranchSpec::out_channels).sum();
    let ak = config.attention_kernel;
    let attentions: Vec<ConvParams<T>> = match config.variant {
        Variant::AmCnn => vec![conv_init(&mut rng, 1, concat_c, ak, narrow)],
        Variant::AmCnn3 => config
            .specs
            .iter()
            .map(|s| conv_init(&mut rng, 1, s.out_channels(), ak, narrow))
            .collect(),
        Variant::SingleBranch(_) => {
            vec![conv_init(&mut rng, 1, config.specs[0].out_channels(), ak, narrow)]
        }
    };
    let head_c = match config.variant {
        Variant::AmCnn | Variant::AmCnn3 => concat_c,
        Variant::SingleBranch(_) => config.specs[0].out_channels(),
    };
    let output = conv_init(&mut rng, 1, head_c, 1, narrow);
    Ok(Model { config, branches, attentions, output })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Every named weight tensor, in checkpoint order. Clones share
    /// storage with the model, so an optimizer can update in place.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (spec, branch) in self.config.specs.iter().zip(&self.branches) {
            for (i, conv) in branch.convs.iter().enumerate() {
                conv.named(&format!("branch.{}.conv{}", spec.label.as_str(), i + 1), &mut out);
            }
        }
        match self.config.variant {
            Variant::AmCnn3 => {
                for (spec, att) in self.config.specs.iter().zip(&self.attentions) {
                    att.named(&format!("attention.{}", spec.label.as_str()), &mut out);
                }
            }
            _ => self.attentions[0].named("attention", &mut out),
        }
        self.output.named("output", &mut out);
        out
    }

    /// Branch tensors only, named as in [`parameters`](Self::parameters).
    pub fn branch_parameters(&self, label: BranchLabel) -> Vec<(String, Tensor<T>)> {
        let prefix = format!("branch.{}.", label.as_str());
        self.parameters().into_iter().filter(|(n, _)| n.starts_with(&prefix)).collect()
    }

    /// Copies every tensor of `other` whose name starts with `prefix`
    /// into the same-named tensor here. Returns how many were copied.
    pub fn adopt_from(&mut self, other: &Model<T>, prefix: &str) -> Result<usize, ModelError> {
        let mine = self.parameters();
        let mut copied = 0;
        for (name, theirs) in other.parameters() {
            if !name.starts_with(prefix) {
                continue;
            }
            let Some((_, ours)) = mine.iter().find(|(n, _)| *n == name) else { continue };
            if ours.shape() != theirs.shape() {
                return Err(ModelError::AdoptShape {
                    name,
                    expected: ours.shape(),
                    got: theirs.shape(),
                });
            }
            let data = theirs.to_vec();
            ours.modify(|d| d.copy_from_slice(&data));
            copied += 1;
        }
        Ok(copied)
    }

    /// Initializes the fusion head from single-branch heads: each
    /// branch's 1x1 head weights land on that branch's channel block,
    /// scaled by `scale / n_branches`, and the bias becomes the scaled
    /// mean of the branch biases. With `scale` = 1 the fused model
    /// starts at the branch consensus; below 1 it approaches the
    /// target from under, which cannot kill the head's ReLU the way an
    /// overshooting start can. `parts` must match this model's branch
    /// order.
    pub fn adopt_fused_head(&mut self, parts: &[&Model<T>], scale: T) -> Result<(), ModelError> {
        if parts.len() != self.config.specs.len() {
            return Err(ModelError::BadSpec(format!(
                "fused head needs {} branch models, got {}",
                self.config.specs.len(),
                parts.len()
            )));
        }
        let factor = scale / sc::<T>(parts.len() as f64);
        let mut weights = Vec::with_capacity(self.output.weight.numel());
        let mut bias = T::zero();
        for (spec, part) in self.config.specs.iter().zip(parts) {
            let w = part.output.weight.shape();
            let expect = vec![1, spec.out_channels(), 1, 1];
            if w != expect {
                return Err(ModelError::AdoptShape {
                    name: format!("output.weight ({} head)", spec.label.as_str()),
                    expected: expect,
                    got: w,
                });
            }
            weights.extend(part.output.weight.to_vec().iter().map(|&v| v * factor));
            bias = bias + part.output.bias.value() * factor;
        }
        if weights.len() != self.output.weight.numel() {
            return Err(ModelError::BadSpec(format!(
                "fused head expects {} weights, got {}",
                self.output.weight.numel(),
                weights.len()
            )));
        }
        self.output.weight.modify(|d| d.copy_from_slice(&weights));
        self.output.bias.modify(|d| d[0] = bias);
        Ok(())
    }

    /// Points the attention scores at the model's own density belief.
    /// Each attention kernel is zeroed except its center tap, which
    /// copies the matching branch head (fused variants average across
    /// branch blocks), scaled by `gain`. The pre-tanh score map then
    /// starts as `gain` times the stage-one head pre-activation, so
    /// the softmax favors the regions the branches already consider
    /// dense instead of starting uniform. A random projection cannot
    /// provide that: post-relu features carry large common-mode
    /// channels, and the density signal lives in differences between
    /// channels that only the trained head direction knows. `gain`
    /// maps head pre-activations into tanh's active range; peaks of a
    /// typical target sit near 0.15, so gains around 4-8 place them
    /// mid-curve while much larger gains saturate the scores and
    /// freeze the attention. `parts` must match this model's branch
    /// order.
    pub fn seed_attention_from_heads(
        &mut self,
        parts: &[&Model<T>],
        gain: T,
    ) -> Result<(), ModelError> {
        if parts.len() != self.config.specs.len() {
            return Err(ModelError::BadSpec(format!(
                "attention seed needs {} branch models, got {}",
                self.config.specs.len(),
                parts.len()
            )));
        }
        for (spec, part) in self.config.specs.iter().zip(parts) {
            let w = part.output.weight.shape();
            let expect = vec![1, spec.out_channels(), 1, 1];
            if w != expect {
                return Err(ModelError::AdoptShape {
                    name: format!("output.weight ({} head)", spec.label.as_str()),
                    expected: expect,
                    got: w,
                });
            }
        }
        let ak = self.config.attention_kernel;
        let center = (ak / 2) * ak + ak / 2;
        match self.config.variant {
            Variant::AmCnn => {
                let factor = gain / sc::<T>(parts.len() as f64);
                let att = &self.attentions[0];
                let mut w = vec![T::zero(); att.weight.numel()];
                let mut off = 0;
                for (spec, part) in self.config.specs.iter().zip(parts) {
                    for (c, &hv) in part.output.weight.to_vec().iter().enumerate() {
                        w[(off + c) * ak * ak + center] = hv * factor;
                    }
                    off += spec.out_channels();
                }
                let bias =
                    parts.iter().fold(T::zero(), |a, p| a + p.output.bias.value()) * factor;
                att.weight.modify(|d| d.copy_from_slice(&w));
                att.bias.modify(|d| d[0] = bias);
            }
            Variant::AmCnn3 | Variant::SingleBranch(_) => {
                for (att, part) in self.attentions.iter().zip(parts) {
                    let mut w = vec![T::zero(); att.weight.numel()];
                    for (c, &hv) in part.output.weight.to_vec().iter().enumerate() {
                        w[c * ak * ak + center] = hv * gain;
                    }
                    let bias = part.output.bias.value() * gain;
                    att.weight.modify(|d| d.copy_from_slice(&w));
                    att.bias.modify(|d| d[0] = bias);
                }
            }
        }
        Ok(())
    }

    fn check_dims(&self, image: &Tensor<T>) -> Result<(usize, usize), ModelError> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(ModelError::BadSpec(format!("input must be [1,H,W], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(ModelError::Indivisible { h, w });
        }
        Ok((h, w))
    }

    fn branch_index(&self, label: BranchLabel) -> Option<usize> {
        self.config.specs.iter().position(|s| s.label == label)
    }

    /// conv-relu-pool, conv-relu-pool, conv-relu, conv-relu.
    pub fn forward_branch(
        &self,
        label: BranchLabel,
        image: &Tensor<T>,
    ) -> Result<Tensor<T>, ModelError> {
        self.check_dims(image)?;
        let idx = self
            .branch_index(label)
            .ok_or_else(|| ModelError::BadSpec(format!("no branch {}", label.as_str())))?;
        let convs = &self.branches[idx].convs;
        let mut x = image.conv2d(&convs[0].weight, &convs[0].bias)?.relu().maxpool2x2()?;
        x = x.conv2d(&convs[1].weight, &convs[1].bias)?.relu().maxpool2x2()?;
        x = x.conv2d(&convs[2].weight, &convs[2].bias)?.relu();
        x = x.conv2d(&convs[3].weight, &convs[3].bias)?.relu();
        Ok(x)
    }

    /// Score → probability map → feature reweighting for attention
    /// head `idx` (0 except for the per-branch variant).
    pub fn attention_head(
        &self,
        idx: usize,
        features: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
        let att = &self.attentions[idx];
        let scores = features.conv2d(&att.weight, &att.bias)?.tanh();
        let m = scores.spatial_softmax()?;
        let shape = features.shape();
        let weights = if self.config.rescale {
            m.scale(sc((shape[1] * shape[2]) as f64))
        } else {
            m.clone()
        };
        let attended = features.broadcast_mul(&weights)?;
        Ok((m, attended))
    }

    fn density_head(&self, features: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(features.conv2d(&self.output.weight, &self.output.bias)?.relu())
    }

    /// Full pass: density map at 1/4 resolution plus probability maps.
    pub fn forward(&self, image: &Tensor<T>) -> Result<ForwardOutput<T>, ModelError> {
        self.check_dims(image)?;
        match self.config.variant {
            Variant::AmCnn => {
                let feats: Vec<Tensor<T>> = self
                    .config
                    .specs
                    .iter()
                    .map(|s| self.forward_branch(s.label, image))
                    .collect::<Result<_, _>>()?;
                let cat = Tensor::concat_channels(&feats)?;
                let (m, attended) = self.attention_head(0, &cat)?;
                Ok(ForwardOutput { density: self.density_head(&attended)?, attention_maps: vec![m] })
            }
            Variant::AmCnn3 => {
                let mut maps = Vec::with_capacity(3);
                let mut attended = Vec::with_capacity(3);
                for (i, spec) in self.config.specs.iter().enumerate() {
                    let f = self.forward_branch(spec.label, image)?;
                    let (m, a) = self.attention_head(i, &f)?;
                    maps.push(m);
                    attended.push(a);
                }
                let cat = Tensor::concat_channels(&attended)?;
                Ok(ForwardOutput { density: self.density_head(&cat)?, attention_maps: maps })
            }
            Variant::SingleBranch(label) => {
                let f = self.forward_branch(label, image)?;
                let (m, attended) = self.attention_head(0, &f)?;
                Ok(ForwardOutput { density: self.density_head(&attended)?, attention_maps: vec![m] })
            }
        }
    }
}

// Checkpoint layout, all little-endian:
//   magic "AMCNN1"
//   u8 variant (0 joint, 1 per-branch, 2 single), u8 single label
//   u8 spec count, per spec: u8 label, 4×u32 kernels, 4×u32 channels
//   u32 attention kernel, u8 rescale, u64 seed
//   u32 tensor count, per tensor:
//     u32 name length, name bytes, u32 rank, rank×u32 extents, f64 data

const MAGIC: &[u8; 6] = b"AMCNN1";

fn label_tag(l: BranchLabel) -> u8 {
    match l {
        BranchLabel::L => 0,
        BranchLabel::M => 1,
        BranchLabel::S => 2,
    }
}

fn tag_label(t: u8) -> Option<BranchLabel> {
    match t {
        0 => Some(BranchLabel::L),
        1 => Some(BranchLabel::M),
        2 => Some(BranchLabel::S),
        _ => None,
    }
}

impl<T: Scalar> Model<T> {
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let file = File::create(path)
            .map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
    }

    fn write_checkpoint(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        let (vtag, ltag) = match self.config.variant {
            Variant::AmCnn => (0u8, 0u8),
            Variant::AmCnn3 => (1, 0),
            Variant::SingleBranch(l) => (2, label_tag(l)),
        };
        w.write_all(&[vtag, ltag, self.config.specs.len() as u8])?;
        for spec in &self.config.specs {
            w.write_all(&[label_tag(spec.label)])?;
            for k in spec.kernels {
                w.write_all(&(k as u32).to_le_bytes())?;
            }
            for c in spec.channels {
                w.write_all(&(c as u32).to_le_bytes())?;
            }
        }
        w.write_all(&(self.config.attention_kernel as u32).to_le_bytes())?;
        w.write_all(&[self.config.rescale as u8])?;
        w.write_all(&self.config.seed.to_le_bytes())?;
        let params = self.parameters();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, tensor) in params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let shape = tensor.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for e in &shape {
                w.write_all(&(*e as u32).to_le_bytes())?;
            }
            for v in tensor.data().iter() {
                w.write_all(&v.to_f64().unwrap().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<T>, ModelError> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
        Self::read_checkpoint(&mut BufReader::new(file), path)
    }

    fn read_checkpoint(r: &mut impl Read, path: &Path) -> Result<Model<T>, ModelError> {
        let eof = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                ModelError::Truncated { path: path.to_path_buf() }
            } else {
                ModelError::Io { path: path.to_path_buf(), source: e }
            }
        };
        let corrupt =
            |msg: String| ModelError::Corrupt { path: path.to_path_buf(), msg };
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != MAGIC {
            return Err(ModelError::BadMagic { path: path.to_path_buf() });
        }
        let mut head = [0u8; 3];
        r.read_exact(&mut head).map_err(eof)?;
        let [vtag, ltag, nspecs] = head;
        let mut specs = Vec::with_capacity(nspecs as usize);
        for _ in 0..nspecs {
            let mut lt = [0u8; 1];
            r.read_exact(&mut lt).map_err(eof)?;
            let label =
                tag_label(lt[0]).ok_or_else(|| corrupt(format!("branch label tag {}", lt[0])))?;
            let mut kernels = [0usize; 4];
            let mut channels = [0usize; 4];
            for k in &mut kernels {
                *k = read_u32(r).map_err(eof)? as usize;
            }
            for c in &mut channels {
                *c = read_u32(r).map_err(eof)? as usize;
            }
            specs.push(BranchSpec { label, kernels, channels });
        }
        let variant = match vtag {
            0 => Variant::AmCnn,
            1 => Variant::AmCnn3,
            2 => Variant::SingleBranch(
                tag_label(ltag).ok_or_else(|| corrupt(format!("label tag {ltag}")))?,
            ),
            _ => return Err(corrupt(format!("variant tag {vtag}"))),
        };
        let attention_kernel = read_u32(r).map_err(eof)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(eof)?;
        let mut seed_bytes = [0u8; 8];
        r.read_exact(&mut seed_bytes).map_err(eof)?;
        let config = ModelConfig {
            variant,
            specs,
            attention_kernel,
            rescale: flag[0] == 1,
            init: WeightInit::default(),
            seed: u64::from_le_bytes(seed_bytes),
        };
        // Structure first (validates the metadata), values overwritten
        // below; every tensor must appear exactly once.
        let model = build_model::<T>(config)?;
        let params = model.parameters();
        let n = read_u32(r).map_err(eof)? as usize;
        if n != params.len() {
            return Err(corrupt(format!("{n} tensors, model has {}", params.len())));
        }
        let mut filled = vec![false; params.len()];
        for _ in 0..n {
            let name_len = read_u32(r).map_err(eof)? as usize;
            if name_len > 4096 {
                return Err(corrupt(format!("tensor name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(eof)?;
            let name =
                String::from_utf8(name).map_err(|_| corrupt("non-utf8 tensor name".into()))?;
            let rank = read_u32(r).map_err(eof)? as usize;
            if rank > 8 {
                return Err(corrupt(format!("tensor {name} rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r).map_err(eof)? as usize);
            }
            let idx = params
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| corrupt(format!("unknown tensor {name}")))?;
            if filled[idx] {
                return Err(corrupt(format!("duplicate tensor {name}")));
            }
            let (_, tensor) = &params[idx];
            if tensor.shape() != shape {
                return Err(ModelError::ShapeInconsistency {
                    path: path.to_path_buf(),
                    name,
                    expected: tensor.shape(),
                    got: shape,
                });
            }
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes).map_err(eof)?;
            let values: Vec<T> = bytes
                .chunks_exact(8)
                .map(|c| {
                    let v = f64::from_le_bytes(c.try_into().unwrap());
                    T::from_f64(v).ok_or_else(|| corrupt(format!("unrepresentable value {v}")))
                })
                .collect::<Result<_, _>>()?;
            tensor.modify(|d| d.copy_from_slice(&values));
            filled[idx] = true;
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(eof)? != 0 {
            return Err(corrupt("trailing bytes".into()));
        }
        Ok(model)
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

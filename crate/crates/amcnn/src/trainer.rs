//! Two-stage training: per-branch pretraining on small patches, then
//! whole-network fine-tuning with the combined loss.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{augment, random_crop, AugmentSpec, DataError, Sample};
use crate::density::{
    resolve_sigmas, splat_density, sum_pool_downsample, DensityError, DensityMap, SigmaPolicy,
};
use crate::loss::{
    combined_loss_graph, count_graph, euclidean_loss_graph, relative_deviation_loss_graph,
    EvalReport, EvalRow, LossConfig, LossError,
};
use crate::model::{
    build_model, BranchLabel, Model, ModelConfig, ModelError, Variant, WeightInit,
};
use crate::scalar::{sc, Scalar};
use crate::tensor::{adam_step, Parameter, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config key `{key}`: {msg}")]
    BadConfig { key: String, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("loss became non-finite ({loss}) at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Everything both training stages need. Flat key=value text maps
/// onto this one field per key; unknown keys are rejected.
#[derive(Debug, Clone)]
pub struct TrainConfig<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    /// Patches per optimizer step (gradient accumulation).
    pub batch: usize,
    /// Pretraining patches per image per epoch.
    pub c_p: usize,
    /// Fine-tuning crops per image per epoch; flips double this.
    pub c_f: usize,
    pub pretrain_iterations: usize,
    pub finetune_iterations: usize,
    pub seed: u64,
    pub loss: LossConfig<T>,
    pub sigma: SigmaPolicy<T>,
    pub variant: Variant,
    pub attention_kernel: usize,
    pub rescale: bool,
    pub init: WeightInit,
    /// Learning-rate multiplier for the attention convolutions during
    /// fine-tuning. Attention scores sit behind a tanh and a softmax,
    /// both of which attenuate gradients, so they train far slower
    /// than the plain conv stack at a shared rate.
    pub attention_lr_mult: T,
    /// Scale on the fused head adopted from pretrained branches
    /// (see [`Model::adopt_fused_head`]). Below 1 the fused model
    /// starts under the branch consensus and converges from below.
    pub head_init_scale: T,
    /// Gain used to seed attention scores from the pretrained branch
    /// heads (see [`Model::seed_attention_from_heads`]). 0 skips the
    /// seeding and leaves the random init.
    pub attention_init_gain: T,
    /// Save a checkpoint every n steps (0 = only on request).
    pub checkpoint_every: usize,
    /// Log eval metrics every n steps (0 = off).
    pub eval_every: usize,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        TrainConfig {
            lr: sc(1e-5),
            beta1: sc(0.9),
            beta2: sc(0.999),
            eps: sc(1e-8),
            batch: 1,
            c_p: 9,
            c_f: 100,
            pretrain_iterations: 2000,
            finetune_iterations: 5000,
            seed: 0,
            loss: LossConfig::default(),
            sigma: SigmaPolicy::Knn { beta: sc(0.3) },
            variant: Variant::AmCnn,
            attention_kernel: 1,
            rescale: true,
            init: WeightInit::default(),
            attention_lr_mult: sc(1.0),
            head_init_scale: sc(0.5),
            attention_init_gain: sc(6.0),
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |key: &str, msg: String| Err(TrainError::BadConfig { key: key.into(), msg });
        if !(self.lr > T::zero()) {
            return bad("lr", format!("must be > 0, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch", "must be >= 1".into());
        }
        if self.attention_kernel % 2 == 0 {
            return bad("attention_kernel", format!("must be odd, got {}", self.attention_kernel));
        }
        if !(self.attention_lr_mult > T::zero()) {
            return bad("attention_lr_mult", format!("must be > 0, got {}", self.attention_lr_mult));
        }
        if !(self.head_init_scale > T::zero()) {
            return bad("head_init_scale", format!("must be > 0, got {}", self.head_init_scale));
        }
        if !(self.attention_init_gain >= T::zero()) {
            return bad(
                "attention_init_gain",
                format!("must be >= 0, got {}", self.attention_init_gain),
            );
        }
        self.loss.validate().map_err(|e| TrainError::BadConfig {
            key: "alpha/z".into(),
            msg: e.to_string(),
        })?;
        Ok(())
    }

    /// One `key = value` per line; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let mut cfg = TrainConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(TrainError::BadConfig {
                    key: format!("line {}", i + 1),
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Io { path: path.to_path_buf(), source: e })?;
        Self::from_text(&text)
    }

    /// Sets one field from its text form; used for both config files
    /// and command-line overrides.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let bad = |msg: String| TrainError::BadConfig { key: key.to_string(), msg };
        let float = |v: &str| {
            v.parse::<f64>()
                .map(sc::<T>)
                .map_err(|_| bad(format!("expected a number, got `{v}`")))
        };
        let int =
            |v: &str| v.parse::<usize>().map_err(|_| bad(format!("expected an integer, got `{v}`")));
        let flag = |v: &str| match v {
            "true" | "1" | "on" => Ok(true),
            "false" | "0" | "off" => Ok(false),
            _ => Err(bad(format!("expected true/false, got `{v}`"))),
        };
        match key {
            "lr" => self.lr = float(value)?,
            "beta1" => self.beta1 = float(value)?,
            "beta2" => self.beta2 = float(value)?,
            "eps" => self.eps = float(value)?,
            "batch" => self.batch = int(value)?,
            "c_p" => self.c_p = int(value)?,
            "c_f" => self.c_f = int(value)?,
            "pretrain_iterations" => self.pretrain_iterations = int(value)?,
            "finetune_iterations" => self.finetune_iterations = int(value)?,
            "seed" => {
                self.seed =
                    value.parse().map_err(|_| bad(format!("expected an integer, got `{value}`")))?
            }
            "alpha" => self.loss.alpha = float(value)?,
            "z" => self.loss.z = float(value)?,
            "use_rd" => self.loss.use_rd = flag(value)?,
            "sigma" => {
                self.sigma = value.parse().map_err(|e: DensityError| bad(e.to_string()))?
            }
            "variant" => self.variant = value.parse().map_err(bad)?,
            "attention_kernel" => self.attention_kernel = int(value)?,
            "rescale" => self.rescale = flag(value)?,
            "init" => {
                self.init = match value {
                    "narrow" => WeightInit::Narrow,
                    "fan-in" => WeightInit::FanIn,
                    _ => return Err(bad(format!("expected narrow|fan-in, got `{value}`"))),
                }
            }
            "attention_lr_mult" => self.attention_lr_mult = float(value)?,
            "head_init_scale" => self.head_init_scale = float(value)?,
            "attention_init_gain" => self.attention_init_gain = float(value)?,
            "checkpoint_every" => self.checkpoint_every = int(value)?,
            "eval_every" => self.eval_every = int(value)?,
            _ => return Err(TrainError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// The matching model configuration.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.variant)
            .with_seed(self.seed)
            .with_init(self.init)
            .with_rescale(self.rescale)
            .with_attention_kernel(self.attention_kernel)
    }
}

/// One optimizer step's record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStep {
    pub step: usize,
    pub l_ed: f64,
    pub l_rd: f64,
    pub l: f64,
    pub grad_norm: f64,
}

/// Step records plus optional interleaved eval metrics.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<TrainStep>,
    /// (step, mae, mse) triples.
    pub evals: Vec<(usize, f64, f64)>,
    pub wall_seconds: f64,
}

impl TrainLog {
    fn push_step(&mut self, s: TrainStep) {
        debug_assert!(self.steps.last().is_none_or(|p| p.step < s.step), "steps must increase");
        self.steps.push(s);
    }

    /// Single CSV with a `kind` discriminator column; step rows leave
    /// the metric cells empty and eval rows the loss cells.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "kind,step,l_ed,l_rd,l,grad_norm,mae,mse")?;
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            writeln!(w, "step,{},{},{},{},{},,", s.step, s.l_ed, s.l_rd, s.l, s.grad_norm)?;
            while evals.peek().is_some_and(|&&(es, _, _)| es <= s.step) {
                let &(es, mae, mse) = evals.next().unwrap();
                writeln!(w, "eval,{es},,,,,{mae},{mse}")?;
            }
        }
        for &(es, mae, mse) in evals {
            writeln!(w, "eval,{es},,,,,{mae},{mse}")?;
        }
        Ok(())
    }
}

/// Quarter-scale ground truth for one patch: geometry-adaptive splat,
/// sum-pooled by 4. The σ policy falls back to fixed σ = 4 when KNN
/// lacks neighbours.
pub fn patch_gt<T: Scalar>(
    sample: &Sample<T>,
    policy: SigmaPolicy<T>,
) -> Result<DensityMap<T>, TrainError> {
    let res = resolve_sigmas(&sample.annotations, policy, sample.perspective.as_ref())?;
    let full = splat_density(&sample.annotations, &res.sigmas)?;
    Ok(sum_pool_downsample(&full, 4)?)
}

/// All pretraining patches for one epoch: `c_p` random crops per
/// image, shuffled across images.
pub fn pretrain_epoch_pool<T: Scalar>(
    dataset: &[Sample<T>],
    c_p: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample<T>> {
    let mut pool: Vec<Sample<T>> =
        dataset.iter().flat_map(|s| random_crop(s, c_p, rng)).collect();
    pool.shuffle(rng);
    pool
}

/// All fine-tuning patches for one epoch: `c_f` crops per image plus
/// their mirrors (2·c_f per image), shuffled.
pub fn finetune_epoch_pool<T: Scalar>(
    dataset: &[Sample<T>],
    c_f: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample<T>> {
    let spec = AugmentSpec { crop_count: c_f, flip: true };
    let mut pool: Vec<Sample<T>> = dataset.iter().flat_map(|s| augment(s, &spec, rng)).collect();
    pool.shuffle(rng);
    pool
}

fn grad_norm<T: Scalar>(params: &[Parameter<T>]) -> f64 {
    let mut acc = 0.0f64;
    for p in params {
        if let Some(g) = p.tensor.grad() {
            for v in g {
                let v = v.to_f64().unwrap_or(f64::NAN);
                acc += v * v;
            }
        }
    }
    acc.sqrt()
}

fn f64_of<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

struct PatchBatch<T: Scalar> {
    images: Vec<Tensor<T>>,
    gts: Vec<Tensor<T>>,
    gt_counts: Vec<T>,
    masks: Vec<Option<Vec<u8>>>,
}

fn prepare_batch<T: Scalar>(
    patches: &[Sample<T>],
    policy: SigmaPolicy<T>,
) -> Result<PatchBatch<T>, TrainError> {
    let mut b = PatchBatch {
        images: Vec::with_capacity(patches.len()),
        gts: Vec::with_capacity(patches.len()),
        gt_counts: Vec::with_capacity(patches.len()),
        masks: Vec::with_capacity(patches.len()),
    };
    for p in patches {
        let gt = patch_gt(p, policy)?;
        let mask = p.roi.as_ref().map(|r| r.mask_at(4).unwrap().to_vec());
        let count = match &mask {
            Some(m) => {
                let mut c = T::zero();
                for (v, &keep) in gt.data().iter().zip(m) {
                    if keep == 1 {
                        c += *v;
                    }
                }
                c
            }
            None => gt.sum(),
        };
        b.images.push(p.image_tensor());
        b.gts.push(Tensor::from_vec(&[1, gt.height(), gt.width()], gt.data().to_vec())?);
        b.gt_counts.push(count);
        b.masks.push(mask);
        }
    Ok(b)
}

/// Pretrains one branch on `c_p` patches per image with the Euclidean
/// loss only: no attention, and a throwaway 1×1 density head that the
/// caller discards by adopting just the `branch.<label>.` tensors.
/// Returns the trained single-branch model and its log.
pub fn pretrain_branch<T: Scalar>(
    label: BranchLabel,
    dataset: &[Sample<T>],
    cfg: &TrainConfig<T>,
) -> Result<(Model<T>, TrainLog), TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let model_cfg = ModelConfig::new(Variant::SingleBranch(label))
        .with_seed(cfg.seed)
        .with_init(cfg.init)
        .with_rescale(cfg.rescale);
    let model = build_model::<T>(model_cfg)?;

    let named = model.parameters();
    let head = |n: &str| named.iter().find(|(name, _)| name == n).unwrap().1.clone();
    let (head_w, head_b) = (head("output.weight"), head("output.bias"));
    let mut params: Vec<Parameter<T>> = model
        .branch_parameters(label)
        .into_iter()
        .chain([("output.weight".into(), head_w.clone()), ("output.bias".into(), head_b.clone())])
        .map(|(n, t)| Parameter::new(n, t))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pool: Vec<Sample<T>> = Vec::new();
    let mut log = TrainLog::default();
    let start = Instant::now();

    for step in 1..=cfg.pretrain_iterations {
        let mut batch_patches = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if pool.is_empty() {
                pool = pretrain_epoch_pool(dataset, cfg.c_p, &mut rng);
                if pool.is_empty() {
                    return Err(TrainError::EmptyDataset);
                }
            }
            batch_patches.push(pool.pop().unwrap());
        }
        let batch = prepare_batch(&batch_patches, cfg.sigma)?;
        let preds: Vec<Tensor<T>> = batch
            .images
            .iter()
            .map(|img| {
                let feats = model.forward_branch(label, img)?;
                Ok(feats.conv2d(&head_w, &head_b)?.relu())
            })
            .collect::<Result<_, TrainError>>()?;
        let masks: Vec<Option<&[u8]>> = batch.masks.iter().map(|m| m.as_deref()).collect();
        let ed = euclidean_loss_graph(&preds, &batch.gts, &masks)?;
        let l_ed = f64_of(ed.value());
        if !l_ed.is_finite() {
            return Err(TrainError::Diverged { step, loss: l_ed });
        }
        ed.backward()?;
        let gn = grad_norm(&params);
        adam_step(&mut params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        log.push_step(TrainStep { step, l_ed, l_rd: 0.0, l: l_ed, grad_norm: gn });
    }
    log.wall_seconds = start.elapsed().as_secs_f64();
    Ok((model, log))
}

/// Fine-tunes the whole model in place on 2·c_f patches per image per
/// epoch with L = L_ED + α·L_RD. Checkpoints land in `checkpoint_dir`
/// at the configured cadence; eval metrics (against `eval_set`, or the
/// training set if none) interleave at theirs.
pub fn finetune<T: Scalar>(
    model: &mut Model<T>,
    dataset: &[Sample<T>],
    cfg: &TrainConfig<T>,
    eval_set: Option<&[Sample<T>]>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params: Vec<Parameter<T>> = model
        .parameters()
        .into_iter()
        .map(|(n, t)| {
            let mut p = Parameter::new(n, t);
            if p.name.starts_with("attention") {
                p.set_lr_mult(cfg.attention_lr_mult);
            }
            p
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pool: Vec<Sample<T>> = Vec::new();
    let mut log = TrainLog::default();
    let start = Instant::now();

    for step in 1..=cfg.finetune_iterations {
        let mut batch_patches = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if pool.is_empty() {
                pool = finetune_epoch_pool(dataset, cfg.c_f, &mut rng);
                if pool.is_empty() {
                    return Err(TrainError::EmptyDataset);
                }
            }
            batch_patches.push(pool.pop().unwrap());
        }
        let batch = prepare_batch(&batch_patches, cfg.sigma)?;
        let mut preds = Vec::with_capacity(batch.images.len());
        let mut counts = Vec::with_capacity(batch.images.len());
        for (img, mask) in batch.images.iter().zip(&batch.masks) {
            let out = model.forward(img)?;
            counts.push(count_graph(&out.density, mask.as_deref())?);
            preds.push(out.density);
        }
        let masks: Vec<Option<&[u8]>> = batch.masks.iter().map(|m| m.as_deref()).collect();
        let ed = euclidean_loss_graph(&preds, &batch.gts, &masks)?;
        let (l_rd, rd) = if cfg.loss.rd_active() {
            let rd = relative_deviation_loss_graph(&batch.gt_counts, &counts, cfg.loss.z)?;
            (f64_of(rd.value()), Some(rd))
        } else {
            (0.0, None)
        };
        let loss = combined_loss_graph(&ed, rd.as_ref(), &cfg.loss)?;
        let l = f64_of(loss.value());
        if !l.is_finite() {
            return Err(TrainError::Diverged { step, loss: l });
        }
        loss.backward()?;
        let gn = grad_norm(&params);
        adam_step(&mut params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        log.push_step(TrainStep { step, l_ed: f64_of(ed.value()), l_rd, l, grad_norm: gn });

        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let report = evaluate(model, eval_set.unwrap_or(dataset))?;
            log.evals.push((step, f64_of(report.mae), f64_of(report.mse)));
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some(dir) = checkpoint_dir {
                model.save_checkpoint(dir.join(format!("checkpoint-{step:06}.amcnn")))?;
            }
        }
    }
    log.wall_seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Per-image counts: y' is the predicted density summed inside the
/// ROI (whole map without one), y the number of annotated heads
/// inside it.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &[Sample<T>],
) -> Result<EvalReport<T>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(dataset.len());
    for s in dataset {
        let out = model.forward(&s.image_tensor())?;
        let data = out.density.to_vec();
        let pred = match &s.roi {
            Some(roi) => {
                let mask = roi.mask_at(4).unwrap();
                let mut acc = T::zero();
                for (v, &keep) in data.iter().zip(mask) {
                    if keep == 1 {
                        acc += *v;
                    }
                }
                acc
            }
            None => {
                let mut acc = T::zero();
                for v in &data {
                    acc += *v;
                }
                acc
            }
        };
        let gt = match &s.roi {
            Some(roi) => {
                s.annotations.points().iter().filter(|&&(x, y)| roi.contains(x, y)).count()
            }
            None => s.annotations.len(),
        };
        rows.push(EvalRow { id: s.id.clone(), gt: sc(gt as f64), pred });
    }
    Ok(EvalReport::from_rows(rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, SynthConfig};
    use crate::density::HeadAnnotations;
    use crate::density::RoiMask;

    fn tiny_cfg() -> TrainConfig<f64> {
        TrainConfig {
            sigma: SigmaPolicy::Fixed { sigma: 1.5 },
            ..TrainConfig::default()
        }
    }

    fn small_scene(seed: u64) -> Sample<f64> {
        let cfg = SynthConfig {
            size: 64,
            count_min: 6,
            count_max: 6,
            radius_min: 3.0,
            radius_max: 4.0,
            noise: 0.0,
        };
        synth_scene(&cfg, seed, format!("scene-{seed}")).unwrap()
    }

    #[test]
    fn config_defaults_match_published_values() {
        let cfg = TrainConfig::<f64>::default();
        assert_eq!(cfg.lr, 1e-5);
        assert_eq!(cfg.beta1, 0.9);
        assert_eq!(cfg.batch, 1);
        assert_eq!(cfg.c_p, 9);
        assert_eq!(cfg.loss.alpha, 1e-7);
        assert!(matches!(cfg.sigma, SigmaPolicy::Knn { beta } if beta == 0.3));
    }

    #[test]
    fn config_text_parses_and_rejects_unknown_keys() {
        let cfg = TrainConfig::<f64>::from_text(
            "lr = 0.001  # fast\nbatch=2\nsigma = fixed:2.5\nuse_rd = false\nvariant = am-cnn3\ninit = narrow\n",
        )
        .unwrap();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.batch, 2);
        assert!(matches!(cfg.sigma, SigmaPolicy::Fixed { sigma } if sigma == 2.5));
        assert!(!cfg.loss.use_rd);
        assert_eq!(cfg.variant, Variant::AmCnn3);
        assert!(matches!(cfg.init, WeightInit::Narrow));

        let err = TrainConfig::<f64>::from_text("learning_rate = 1\n").unwrap_err();
        assert!(matches!(err, TrainError::UnknownKey(k) if k == "learning_rate"));
        let err = TrainConfig::<f64>::from_text("lr = -3\n").unwrap_err();
        assert!(matches!(err, TrainError::BadConfig { key, .. } if key == "lr"));
    }

    #[test]
    fn epoch_pools_have_the_published_sizes() {
        let scenes: Vec<Sample<f64>> = (0..4).map(small_scene).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(pretrain_epoch_pool(&scenes, 9, &mut rng).len(), 36);
        let one = &scenes[..1];
        assert_eq!(finetune_epoch_pool(one, 100, &mut rng).len(), 200);
    }

    #[test]
    fn patch_gt_single_head_falls_back_and_sums_to_one() {
        let ann = HeadAnnotations::new(vec![(32.0, 30.0)], 64, 64).unwrap();
        let sample =
            Sample::new("t", vec![0.5f64; 64 * 64], 64, 64, ann, None, None).unwrap();
        let gt = patch_gt(&sample, SigmaPolicy::Knn { beta: 0.3 }).unwrap();
        assert_eq!((gt.height(), gt.width()), (16, 16));
        assert!((gt.sum() - 1.0).abs() <= 1e-9, "sum {}", gt.sum());
    }

    #[test]
    fn pretrain_descends_on_one_scene() {
        let scene = small_scene(5);
        let probe = scene.crop(16, 16, 32, 32).unwrap();
        let probe_batch = prepare_batch(std::slice::from_ref(&probe), SigmaPolicy::Fixed { sigma: 1.5 }).unwrap();
        let cfg = TrainConfig {
            lr: 1e-4,
            pretrain_iterations: 200,
            c_p: 4,
            ..tiny_cfg()
        };
        let probe_loss = |model: &Model<f64>| {
            let named = model.parameters();
            let head = |n: &str| named.iter().find(|(name, _)| name == n).unwrap().1.clone();
            let feats = model.forward_branch(BranchLabel::S, &probe_batch.images[0]).unwrap();
            let pred = feats.conv2d(&head("output.weight"), &head("output.bias")).unwrap().relu();
            euclidean_loss_graph(&[pred], &[probe_batch.gts[0].clone()], &[None])
                .unwrap()
                .value()
        };
        let fresh = build_model::<f64>(
            ModelConfig::new(Variant::SingleBranch(BranchLabel::S)).with_seed(cfg.seed),
        )
        .unwrap();
        let before = probe_loss(&fresh);
        let (trained, log) =
            pretrain_branch(BranchLabel::S, std::slice::from_ref(&scene), &cfg).unwrap();
        let after = probe_loss(&trained);
        assert!(after < before, "probe loss {before} -> {after}");
        assert_eq!(log.steps.len(), 200);
        assert!(log.steps.iter().all(|s| s.l.is_finite()));
    }

    #[test]
    fn pretrain_is_deterministic() {
        let scene = small_scene(2);
        let cfg = TrainConfig { pretrain_iterations: 6, c_p: 2, ..tiny_cfg() };
        let (a, _) = pretrain_branch(BranchLabel::S, std::slice::from_ref(&scene), &cfg).unwrap();
        let (b, _) = pretrain_branch(BranchLabel::S, std::slice::from_ref(&scene), &cfg).unwrap();
        for ((na, ta), (nb, tb)) in a.parameters().iter().zip(b.parameters().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec(), "{na} differs");
        }
    }

    /// Runs in f32 with the output bias poisoned to 1e20: activations
    /// stay finite (below f32's ~3.4e38 ceiling, past which inf sums
    /// with mixed signs turn NaN and relu's max(NaN, 0) = 0 silently
    /// revives the net at a finite loss) but squaring the residual
    /// overflows, so the very first loss is inf. f64 cannot overflow
    /// from this scale at all.
    #[test]
    fn finetune_aborts_on_divergence() {
        let scene64 = small_scene(3);
        let scene = Sample::<f32>::new(
            "f32",
            scene64.image().iter().map(|&v| v as f32).collect(),
            scene64.height(),
            scene64.width(),
            HeadAnnotations::new(
                scene64.annotations.points().iter().map(|&(x, y)| (x as f32, y as f32)).collect(),
                scene64.height(),
                scene64.width(),
            )
            .unwrap(),
            None,
            None,
        )
        .unwrap();
        let cfg = TrainConfig::<f32> {
            finetune_iterations: 50,
            c_f: 2,
            sigma: SigmaPolicy::Fixed { sigma: 1.5 },
            ..TrainConfig::default()
        };
        let mut model = build_model::<f32>(cfg.model_config()).unwrap();
        let bias = model
            .parameters()
            .into_iter()
            .find(|(name, _)| name == "output.bias")
            .unwrap()
            .1;
        bias.modify(|b| b[0] = 1e20);
        match finetune(&mut model, std::slice::from_ref(&scene), &cfg, None, None) {
            Err(TrainError::Diverged { step, loss }) => {
                assert_eq!(step, 1);
                assert!(!loss.is_finite());
            }
            other => panic!("expected divergence, got {:?}", other),
        }
    }

    #[test]
    fn single_adam_step_descends_at_tiny_lr() {
        for seed in 0..10u64 {
            let model = build_model::<f64>(
                ModelConfig::new(Variant::AmCnn).with_seed(seed),
            )
            .unwrap();
            let scene = small_scene(seed + 100);
            let patch = scene.crop(16, 16, 32, 32).unwrap();
            let cfg = TrainConfig {
                lr: 1e-6,
                finetune_iterations: 1,
                c_f: 1,
                sigma: SigmaPolicy::Fixed { sigma: 1.5 },
                ..TrainConfig::default()
            };
            let batch = prepare_batch(std::slice::from_ref(&patch), cfg.sigma).unwrap();
            let loss_of = |m: &Model<f64>| {
                let out = m.forward(&batch.images[0]).unwrap();
                let ed =
                    euclidean_loss_graph(&[out.density.clone()], &[batch.gts[0].clone()], &[None])
                        .unwrap();
                let count = count_graph(&out.density, None).unwrap();
                let rd =
                    relative_deviation_loss_graph(&[batch.gt_counts[0]], &[count], cfg.loss.z)
                        .unwrap();
                combined_loss_graph(&ed, Some(&rd), &cfg.loss).unwrap()
            };
            let before = loss_of(&model).value();
            let mut params: Vec<Parameter<f64>> =
                model.parameters().into_iter().map(|(n, t)| Parameter::new(n, t)).collect();
            loss_of(&model).backward().unwrap();
            adam_step(&mut params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
            for p in &params {
                p.tensor.set_requires_grad(false);
            }
            let after = loss_of(&model).value();
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn alpha_zero_matches_rd_disabled_bitwise() {
        let scene = small_scene(7);
        let base = TrainConfig {
            lr: 1e-4,
            finetune_iterations: 6,
            c_f: 2,
            sigma: SigmaPolicy::Fixed { sigma: 1.5 },
            ..TrainConfig::default()
        };
        let run = |loss: LossConfig<f64>| {
            let cfg = TrainConfig { loss, ..base.clone() };
            let mut model = build_model::<f64>(cfg.model_config()).unwrap();
            finetune(&mut model, std::slice::from_ref(&scene), &cfg, None, None).unwrap();
            model.parameters().into_iter().map(|(n, t)| (n, t.to_vec())).collect::<Vec<_>>()
        };
        let off = run(LossConfig { use_rd: false, ..LossConfig::default() });
        let zero = run(LossConfig { alpha: 0.0, use_rd: true, ..LossConfig::default() });
        assert_eq!(off, zero);
    }

    #[test]
    fn finetune_logs_losses_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let scene = small_scene(8);
        let cfg = TrainConfig {
            finetune_iterations: 4,
            c_f: 2,
            checkpoint_every: 2,
            eval_every: 4,
            sigma: SigmaPolicy::Fixed { sigma: 1.5 },
            ..TrainConfig::default()
        };
        let mut model = build_model::<f64>(cfg.model_config()).unwrap();
        let log =
            finetune(&mut model, std::slice::from_ref(&scene), &cfg, None, Some(dir.path()))
                .unwrap();
        assert_eq!(log.steps.len(), 4);
        assert!(log.steps.iter().all(|s| s.l_rd > 0.0), "rd term should be live");
        assert_eq!(log.evals.len(), 1);
        assert!(dir.path().join("checkpoint-000002.amcnn").exists());
        assert!(dir.path().join("checkpoint-000004.amcnn").exists());

        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("kind,step,l_ed,l_rd,l,grad_norm,mae,mse\n"));
        assert!(text.lines().any(|l| l.starts_with("step,1,")));
        assert!(text.lines().any(|l| l.starts_with("eval,4,")));
    }

    #[test]
    fn zero_output_model_evaluates_to_mean_gt_mae() {
        let model = build_model::<f64>(ModelConfig::new(Variant::AmCnn)).unwrap();
        for (name, t) in model.parameters() {
            if name.starts_with("output.") {
                t.modify(|d| d.fill(0.0));
            }
        }
        let scenes: Vec<Sample<f64>> = (0..2).map(small_scene).collect();
        let report = evaluate(&model, &scenes).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert_eq!(row.pred, 0.0);
            assert_eq!(row.gt, 6.0);
        }
        assert_eq!(report.mae, 6.0);
        assert_eq!(report.mse, 6.0);
    }

    #[test]
    fn evaluate_restricts_gt_and_pred_to_roi() {
        let model = build_model::<f64>(ModelConfig::new(Variant::AmCnn)).unwrap();
        for (name, t) in model.parameters() {
            if name.starts_with("output.") {
                t.modify(|d| d.fill(0.0));
            }
        }
        // Left half ROI; 2 of 3 heads inside.
        let roi = RoiMask::from_polygon(
            vec![(-0.5, -0.5), (31.5, -0.5), (31.5, 63.5), (-0.5, 63.5)],
            64,
            64,
        )
        .unwrap();
        let ann =
            HeadAnnotations::new(vec![(5.0, 5.0), (20.0, 40.0), (50.0, 10.0)], 64, 64).unwrap();
        let sample =
            Sample::new("roi", vec![0.5; 64 * 64], 64, 64, ann, None, Some(roi)).unwrap();
        let report = evaluate(&model, &[sample]).unwrap();
        assert_eq!(report.rows[0].gt, 2.0);
        assert_eq!(report.rows[0].pred, 0.0);
    }
}

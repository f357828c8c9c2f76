//! Training losses and evaluation metrics.
//!
//! The Euclidean loss compares density maps pixel by pixel, normalized
//! by pixel count so crops of different sizes weigh equally; the
//! relative-deviation loss compares whole-image counts, upweighting
//! sparse scenes. Each loss exists twice: as a pure function over density
//! maps (oracles, evaluation) and as a graph builder over tensors
//! (training). The two agree to rounding.

use std::io::Write;

use thiserror::Error;

use crate::density::DensityMap;
use crate::scalar::{sc, Scalar};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("sample {index}: prediction is {pred_h}x{pred_w}, ground truth {gt_h}x{gt_w}")]
    ShapeMismatch { index: usize, pred_h: usize, pred_w: usize, gt_h: usize, gt_w: usize },
    #[error("{a} predictions vs {b} ground truths")]
    LengthMismatch { a: usize, b: usize },
    #[error("mask has {mask} entries, map has {map}")]
    MaskMismatch { mask: usize, map: usize },
    #[error("mask excludes every pixel")]
    EmptyRoi,
    #[error("invalid loss config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Weights and guards for the combined training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig<T: Scalar> {
    /// Weight of the relative-deviation term.
    pub alpha: T,
    /// Keeps the relative deviation finite on empty scenes.
    pub z: T,
    /// The ablation switch: off reproduces pure Euclidean training.
    pub use_rd: bool,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig { alpha: sc(1e-7), z: T::one(), use_rd: true }
    }
}

impl<T: Scalar> LossConfig<T> {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha >= T::zero()) {
            return Err(LossError::BadConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.z > T::zero()) {
            return Err(LossError::BadConfig(format!("z must be > 0, got {}", self.z)));
        }
        Ok(())
    }

    /// True when the relative-deviation term contributes nothing; both
    /// `use_rd = false` and `alpha = 0` then take the identical code
    /// path, so their training trajectories match bitwise.
    pub fn rd_active(&self) -> bool {
        self.use_rd && self.alpha > T::zero()
    }
}

fn check_mask(mask: Option<&[u8]>, len: usize) -> Result<Option<usize>, LossError> {
    let Some(mask) = mask else { return Ok(None) };
    if mask.len() != len {
        return Err(LossError::MaskMismatch { mask: mask.len(), map: len });
    }
    let pix = mask.iter().filter(|&&m| m == 1).count();
    if pix == 0 {
        return Err(LossError::EmptyRoi);
    }
    Ok(Some(pix))
}

/// Squared-difference sum over one sample divided by its pixel count.
/// With a mask, excluded pixels leave both the sum and the count.
pub fn euclidean_term<T: Scalar>(
    pred: &DensityMap<T>,
    gt: &DensityMap<T>,
    mask: Option<&[u8]>,
) -> Result<T, LossError> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(LossError::ShapeMismatch {
            index: 0,
            pred_h: pred.height(),
            pred_w: pred.width(),
            gt_h: gt.height(),
            gt_w: gt.width(),
        });
    }
    let pix = check_mask(mask, pred.data().len())?.unwrap_or(pred.data().len());
    let mut acc = T::zero();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if mask.map_or(true, |m| m[i] == 1) {
            let d = p - g;
            acc += d * d;
        }
    }
    Ok(acc / sc(pix as f64))
}

/// Mean over the batch of per-sample pixel-normalized squared error.
pub fn euclidean_loss<T: Scalar>(
    preds: &[DensityMap<T>],
    gts: &[DensityMap<T>],
) -> Result<T, LossError> {
    if preds.len() != gts.len() {
        return Err(LossError::LengthMismatch { a: preds.len(), b: gts.len() });
    }
    if preds.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut acc = T::zero();
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        acc += euclidean_term(p, g, None).map_err(|e| match e {
            LossError::ShapeMismatch { pred_h, pred_w, gt_h, gt_w, .. } => {
                LossError::ShapeMismatch { index: i, pred_h, pred_w, gt_h, gt_w }
            }
            other => other,
        })?;
    }
    Ok(acc / sc(preds.len() as f64))
}

/// Mean squared relative count error, guarded by `z`.
pub fn relative_deviation_loss<T: Scalar>(
    counts_gt: &[T],
    counts_pred: &[T],
    z: T,
) -> Result<T, LossError> {
    if counts_gt.len() != counts_pred.len() {
        return Err(LossError::LengthMismatch { a: counts_gt.len(), b: counts_pred.len() });
    }
    if counts_gt.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if !(z > T::zero()) {
        return Err(LossError::BadConfig(format!("z must be > 0, got {z}")));
    }
    let mut acc = T::zero();
    for (&y, &yp) in counts_gt.iter().zip(counts_pred) {
        let r = (y - yp) / (y + z);
        acc += r * r;
    }
    Ok(acc / sc(counts_gt.len() as f64))
}

/// `ed + alpha·rd`; exactly `ed` when the rd term is inactive.
pub fn combined_loss<T: Scalar>(ed: T, rd: T, cfg: &LossConfig<T>) -> T {
    if cfg.rd_active() {
        ed + cfg.alpha * rd
    } else {
        ed
    }
}

/// Graph counterpart of [`euclidean_loss`]: a scalar tensor whose
/// backward pass reaches the predictions. `masks` entries are scale-1
/// {0,1} slices matching each map.
pub fn euclidean_loss_graph<T: Scalar>(
    preds: &[Tensor<T>],
    gts: &[Tensor<T>],
    masks: &[Option<&[u8]>],
) -> Result<Tensor<T>, LossError> {
    if preds.len() != gts.len() || preds.len() != masks.len() {
        return Err(LossError::LengthMismatch { a: preds.len(), b: gts.len() });
    }
    if preds.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut total: Option<Tensor<T>> = None;
    for (i, ((p, g), mask)) in preds.iter().zip(gts).zip(masks).enumerate() {
        let (ps, gs) = (p.shape(), g.shape());
        if ps != gs {
            return Err(LossError::ShapeMismatch {
                index: i,
                pred_h: ps[ps.len() - 2],
                pred_w: ps[ps.len() - 1],
                gt_h: gs[gs.len() - 2],
                gt_w: gs[gs.len() - 1],
            });
        }
        let pix = check_mask(*mask, p.numel())?.unwrap_or(p.numel());
        let mut diff = p.sub(g)?;
        if let Some(mask) = mask {
            let m = Tensor::from_vec(&ps, mask.iter().map(|&b| sc(b as f64)).collect())?;
            diff = diff.mul(&m)?;
        }
        let term = diff.mul(&diff)?.sum().scale(sc::<T>(pix as f64).recip());
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap().scale(sc::<T>(preds.len() as f64).recip()))
}

/// Predicted count: sum of the map, restricted to the mask if given.
pub fn count_graph<T: Scalar>(
    pred: &Tensor<T>,
    mask: Option<&[u8]>,
) -> Result<Tensor<T>, LossError> {
    check_mask(mask, pred.numel())?;
    match mask {
        Some(mask) => {
            let m = Tensor::from_vec(&pred.shape(), mask.iter().map(|&b| sc(b as f64)).collect())?;
            Ok(pred.mul(&m)?.sum())
        }
        None => Ok(pred.sum()),
    }
}

/// Graph counterpart of [`relative_deviation_loss`] over predicted
/// count nodes; ground-truth counts are constants.
pub fn relative_deviation_loss_graph<T: Scalar>(
    counts_gt: &[T],
    counts_pred: &[Tensor<T>],
    z: T,
) -> Result<Tensor<T>, LossError> {
    if counts_gt.len() != counts_pred.len() {
        return Err(LossError::LengthMismatch { a: counts_gt.len(), b: counts_pred.len() });
    }
    if counts_gt.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if !(z > T::zero()) {
        return Err(LossError::BadConfig(format!("z must be > 0, got {z}")));
    }
    let mut total: Option<Tensor<T>> = None;
    for (&y, yp) in counts_gt.iter().zip(counts_pred) {
        let r = yp.offset(-y).scale((y + z).recip());
        let term = r.mul(&r)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap().scale(sc::<T>(counts_gt.len() as f64).recip()))
}

/// Graph counterpart of [`combined_loss`]. When the rd term is
/// inactive the ed node itself is returned, so no extra graph nodes or
/// arithmetic distinguish the two configurations.
pub fn combined_loss_graph<T: Scalar>(
    ed: &Tensor<T>,
    rd: Option<&Tensor<T>>,
    cfg: &LossConfig<T>,
) -> Result<Tensor<T>, LossError> {
    if !cfg.rd_active() {
        return Ok(ed.clone());
    }
    let rd = rd.ok_or_else(|| {
        LossError::BadConfig("rd term requested but no rd loss supplied".into())
    })?;
    Ok(ed.add(&rd.scale(cfg.alpha))?)
}

/// MAE and rooted MSE over (ground truth, predicted) count pairs.
pub fn mae_mse<T: Scalar>(pairs: &[(T, T)]) -> Result<(T, T), LossError> {
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = sc::<T>(pairs.len() as f64);
    let mut abs = T::zero();
    let mut sq = T::zero();
    for &(y, yp) in pairs {
        let d = y - yp;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// One evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow<T: Scalar> {
    pub id: String,
    pub gt: T,
    pub pred: T,
}

/// Per-image counts plus the two summary metrics.
#[derive(Debug, Clone)]
pub struct EvalReport<T: Scalar> {
    pub rows: Vec<EvalRow<T>>,
    pub mae: T,
    pub mse: T,
}

impl<T: Scalar> EvalReport<T> {
    pub fn from_rows(rows: Vec<EvalRow<T>>) -> Result<Self, LossError> {
        let pairs: Vec<(T, T)> = rows.iter().map(|r| (r.gt, r.pred)).collect();
        let (mae, mse) = mae_mse(&pairs)?;
        Ok(EvalReport { rows, mae, mse })
    }

    /// `image_id,gt_count,pred_count` rows, then `MAE,` / `MSE,`
    /// trailer lines.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "image_id,gt_count,pred_count")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.id, r.gt, r.pred)?;
        }
        writeln!(w, "MAE,{}", self.mae)?;
        writeln!(w, "MSE,{}", self.mse)
    }
}

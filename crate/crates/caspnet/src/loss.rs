//! Training losses: a distance-aware focal loss over the class heat maps
//! plus a masked squared error over the sub-pixel offsets, averaged over the
//! future steps.

use crate::error::{Error, Result};
use crate::network::StepOutput;
use crate::raster::{GroundTruthSeq, OFFSET_CHANNELS};
use crate::tensor::{Element, GridTensor, NodeId, Tape};

#[derive(Debug, Clone)]
pub struct LossConfig {
    /// positive/negative balance of the focal loss
    pub alpha: f64,
    /// exponent on `1 - Y` that down-weights pixels near a peak
    pub beta: f64,
    /// focusing exponent on the prediction error
    pub gamma: f64,
    /// probabilities are clamped to `[eps, 1 - eps]` inside the logs
    pub clamp_eps: f64,
    /// per-class weights on the class loss
    pub class_weights: Vec<f64>,
}

impl LossConfig {
    pub fn for_classes(n: usize) -> Self {
        LossConfig {
            alpha: 0.25,
            beta: 4.0,
            gamma: 2.0,
            clamp_eps: 1e-6,
            class_weights: vec![1.0; n],
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.class_weights.len() != n_classes {
            return Err(Error::config(format!(
                "{} class weights for {n_classes} classes",
                self.class_weights.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("focal alpha must be in [0, 1]"));
        }
        if self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::config("focal exponents must be non-negative"));
        }
        if self.clamp_eps <= 0.0 || self.clamp_eps >= 0.5 {
            return Err(Error::config("clamp epsilon must be in (0, 0.5)"));
        }
        Ok(())
    }
}

/// Focal loss of one class channel against its ground-truth heat map,
/// normalized by `1 / (E + 1)` with `E` the number of supervised agents in
/// the region of interest. Pixels where the ground truth is exactly 1 are
/// the positives; everywhere else the `(1 - Y)^beta` factor fades the
/// penalty near peaks.
pub fn focal_loss_value<T: Element>(
    pred: &GridTensor<T>,
    gt: &GridTensor<T>,
    e_count: usize,
    cfg: &LossConfig,
) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "focal loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if gt.data().iter().any(|&y| y < T::zero() || y > T::one()) {
        return Err(Error::input("ground-truth heat map values must lie in [0, 1]"));
    }
    let alpha = T::from_f64(cfg.alpha);
    let beta = T::from_f64(cfg.beta);
    let gamma = T::from_f64(cfg.gamma);
    let eps = T::from_f64(cfg.clamp_eps);
    let one = T::one();
    let mut acc = T::zero();
    for (&p, &y) in pred.data().iter().zip(gt.data()) {
        let pc = p.max(eps).min(one - eps);
        if y == one {
            acc = acc + alpha * (one - p).powf(gamma) * pc.ln();
        } else {
            acc = acc + (one - alpha) * (one - y).powf(beta) * p.powf(gamma) * (one - pc).ln();
        }
    }
    let scale = T::from_f64(-1.0 / (e_count as f64 + 1.0));
    Ok((scale * acc).to_f64())
}

/// Pixels that carry offset supervision: exactly one class heat map peaks
/// there (the class channels sum to exactly 1).
pub fn offset_mask<T: Element>(gt_step: &GridTensor<T>, n_classes: usize) -> Result<Vec<bool>> {
    let (c, h, w) = gt_step.dims3()?;
    if c < n_classes + OFFSET_CHANNELS {
        return Err(Error::shape(format!(
            "ground-truth step has {c} channels, expected at least {}",
            n_classes + OFFSET_CHANNELS
        )));
    }
    let plane = h * w;
    let data = gt_step.data();
    let mut mask = vec![false; plane];
    for (idx, m) in mask.iter_mut().enumerate() {
        let mut s = T::zero();
        for ch in 0..n_classes {
            s = s + data[ch * plane + idx];
        }
        *m = s == T::one();
    }
    Ok(mask)
}

/// Squared error of the offset channels over the masked pixels (no
/// normalization).
pub fn offset_loss_value<T: Element>(
    pred: &GridTensor<T>,
    target: &GridTensor<T>,
    mask: &[bool],
) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "offset loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (c, h, w) = pred.dims3()?;
    if c != OFFSET_CHANNELS || mask.len() != h * w {
        return Err(Error::shape(format!(
            "offset loss wants (2, h, w) and an h*w mask, got {:?} and {}",
            pred.shape(),
            mask.len()
        )));
    }
    let plane = h * w;
    let mut acc = T::zero();
    for idx in 0..plane {
        if !mask[idx] {
            continue;
        }
        for ch in 0..c {
            let d = pred.data()[ch * plane + idx] - target.data()[ch * plane + idx];
            acc = acc + d * d;
        }
    }
    Ok(acc.to_f64())
}

/// The taped step losses and their values at build time.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    /// scalar node to call backward on
    pub total: NodeId,
    /// class-loss component of `total`
    pub l_class: f64,
    /// offset component of `total`
    pub l_offset: f64,
    /// value of `total`
    pub l_total: f64,
}

/// Record the full training loss on the tape: per step and class a focal
/// loss (weighted per class), per step a masked offset loss, everything
/// summed and divided by the number of future steps.
pub fn total_loss_on_tape<T: Element>(
    tape: &mut Tape<T>,
    steps: &[StepOutput],
    gt: &GroundTruthSeq<T>,
    cfg: &LossConfig,
) -> Result<LossNodes> {
    if steps.is_empty() || steps.len() != gt.steps.len() {
        return Err(Error::shape(format!(
            "{} predicted steps against {} ground-truth steps",
            steps.len(),
            gt.steps.len()
        )));
    }
    let n_classes = gt.n_classes;
    cfg.validate(n_classes)?;
    let mut class_acc: Option<NodeId> = None;
    let mut off_acc: Option<NodeId> = None;
    for (k, step) in steps.iter().enumerate() {
        let gt_grid = &gt.steps[k];
        for c in 0..n_classes {
            let y = gt_grid.slice_channels(c, c + 1)?;
            let p = tape.slice_channels(step.class_probs, c, c + 1)?;
            let lc = tape.focal_class_loss(
                p,
                y,
                gt.counts[k][c],
                T::from_f64(cfg.alpha),
                T::from_f64(cfg.beta),
                T::from_f64(cfg.gamma),
                T::from_f64(cfg.clamp_eps),
            )?;
            let weighted = tape.scale(lc, T::from_f64(cfg.class_weights[c]));
            class_acc = Some(match class_acc {
                None => weighted,
                Some(a) => tape.add(a, weighted)?,
            });
        }
        let target = gt_grid.slice_channels(n_classes, n_classes + OFFSET_CHANNELS)?;
        let mask = offset_mask(gt_grid, n_classes)?;
        let lo = tape.offset_loss(step.offsets, target, mask)?;
        off_acc = Some(match off_acc {
            None => lo,
            Some(a) => tape.add(a, lo)?,
        });
    }
    let inv_n = 1.0 / steps.len() as f64;
    let class_acc = class_acc.unwrap();
    let off_acc = off_acc.unwrap();
    let sum = tape.add(class_acc, off_acc)?;
    let total = tape.scale(sum, T::from_f64(inv_n));
    let l_class = tape.value(class_acc).item().to_f64() * inv_n;
    let l_offset = tape.value(off_acc).item().to_f64() * inv_n;
    let l_total = tape.value(total).item().to_f64();
    Ok(LossNodes {
        total,
        l_class,
        l_offset,
        l_total,
    })
}

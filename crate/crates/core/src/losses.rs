//! Training objectives for the detection and video-to-command models.
//!
//! Each loss records onto a [`Tape`]; `*_value` variants evaluate plain
//! numbers for reporting and tests.

use serde::{Deserialize, Serialize};

use crate::autodiff::{clamp_below, smooth_l1_scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, BoxOffset};
use crate::mask::LabelGrid;
use crate::params::{ParamKind, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Probabilities are clamped to this before any logarithm.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionTarget {
    pub class_id: usize,
    pub offset: BoxOffset,
    pub mask: LabelGrid,
}

impl DetectionTarget {
    pub fn new(class_id: usize, offset: BoxOffset, mask: LabelGrid) -> Result<Self> {
        if class_id == 0 && mask.labels().iter().any(|&l| l != 0) {
            return Err(Error::contract("background target must have an empty mask"));
        }
        Ok(Self { class_id, offset, mask })
    }
}

fn check_index(op: &str, len: usize, u: usize) -> Result<()> {
    if u >= len {
        return Err(Error::contract(format!("{op}: class {u} out of range for {len} classes")));
    }
    Ok(())
}

/// `−log max(p_u, ε)` for a probability vector `p`.
pub fn ce_class(tape: &mut Tape, p: Var, u: usize) -> Result<Var> {
    check_index("ce_class", tape.value(p).len(), u)?;
    let pu = tape.pick(p, &[u])?;
    let l = tape.log_clamped(pu, PROB_EPS);
    let s = tape.sum(l);
    Ok(tape.neg(s))
}

pub fn ce_class_value(p: &[f64], u: usize) -> Result<f64> {
    check_index("ce_class", p.len(), u)?;
    Ok(-clamp_below(p[u], PROB_EPS).ln())
}

/// Smooth L1 between a predicted offset vector `t` (length 4) and the target.
pub fn smooth_l1(tape: &mut Tape, t: Var, v: &BoxOffset) -> Result<Var> {
    let target = tape.constant(Tensor::vector(v.to_vec()));
    tape.smooth_l1(t, target)
}

pub fn smooth_l1_value(t: &BoxOffset, v: &BoxOffset) -> f64 {
    t.to_vec().iter().zip(v.to_vec()).map(|(a, b)| smooth_l1_scalar(a - b)).sum()
}

fn mask_indices(shape: &[usize], s: &LabelGrid) -> Result<Vec<usize>> {
    let [k, h, w] = shape else {
        return Err(Error::dim("aff_mask_loss", shape, &[0, s.height(), s.width()]));
    };
    if (*h, *w) != (s.height(), s.width()) {
        return Err(Error::dim("aff_mask_loss", shape, &[*k, s.height(), s.width()]));
    }
    s.check_classes(*k)?;
    let n = h * w;
    Ok(s.labels().iter().enumerate().map(|(i, &l)| l as usize * n + i).collect())
}

/// Mean over pixels of `−log m[s_i]` where `m` is `[k, H, W]` of per-pixel
/// probability vectors.
pub fn aff_mask_loss(tape: &mut Tape, m: Var, s: &LabelGrid) -> Result<Var> {
    let idx = mask_indices(tape.shape(m), s)?;
    let picked = tape.pick(m, &idx)?;
    let l = tape.log_clamped(picked, PROB_EPS);
    let mean = tape.mean(l);
    Ok(tape.neg(mean))
}

pub fn aff_mask_loss_value(m: &Tensor, s: &LabelGrid) -> Result<f64> {
    let idx = mask_indices(m.shape(), s)?;
    let total: f64 = idx.iter().map(|&i| -clamp_below(m.data()[i], PROB_EPS).ln()).sum();
    Ok(total / idx.len() as f64)
}

/// Classification loss plus, for foreground targets only, box regression and
/// mask losses. `t` holds the 4 offsets predicted for the target class.
pub fn detection_joint_loss(tape: &mut Tape, p: Var, t: Var, m: Var, target: &DetectionTarget) -> Result<Var> {
    let cls = ce_class(tape, p, target.class_id)?;
    if target.class_id == 0 {
        return Ok(cls);
    }
    let loc = smooth_l1(tape, t, &target.offset)?;
    let aff = aff_mask_loss(tape, m, &target.mask)?;
    tape.add_all(&[cls, loc, aff])
}

/// `−Σ log p_t(w_t)` over positions whose mask entry is `true`.
pub fn seq_nll(tape: &mut Tape, dists: &[Var], targets: &[usize], keep: &[bool]) -> Result<Var> {
    if dists.len() != targets.len() || targets.len() != keep.len() {
        return Err(Error::dim("seq_nll", &[dists.len()], &[targets.len(), keep.len()]));
    }
    let mut terms = Vec::new();
    for ((&d, &w), &k) in dists.iter().zip(targets).zip(keep) {
        if k {
            terms.push(ce_class(tape, d, w)?);
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    tape.add_all(&terms)
}

pub fn seq_nll_value(dists: &[Tensor], targets: &[usize], keep: &[bool]) -> Result<f64> {
    if dists.len() != targets.len() || targets.len() != keep.len() {
        return Err(Error::dim("seq_nll", &[dists.len()], &[targets.len(), keep.len()]));
    }
    let mut total = 0.0;
    for ((d, &w), &k) in dists.iter().zip(targets).zip(keep) {
        if k {
            total += ce_class_value(d.data(), w)?;
        }
    }
    Ok(total)
}

fn check_one_hot(y: &[f64]) -> Result<()> {
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(format!("action target is not one-hot: {y:?}")));
    }
    Ok(())
}

/// Per-class sigmoid binary cross-entropy against a one-hot target, summed.
pub fn action_sigmoid_ce(tape: &mut Tape, logits: Var, y: &[f64], positive_only: bool) -> Result<Var> {
    check_one_hot(y)?;
    tape.sigmoid_bce(logits, y, positive_only)
}

pub fn action_sigmoid_ce_value(logits: &[f64], y: &[f64]) -> Result<f64> {
    check_one_hot(y)?;
    if logits.len() != y.len() {
        return Err(Error::dim("action_sigmoid_ce", &[logits.len()], &[y.len()]));
    }
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    Ok(logits
        .iter()
        .zip(y)
        .map(|(&z, &t)| -(t * clamp_below(sig(z), PROB_EPS).ln() + (1.0 - t) * clamp_below(1.0 - sig(z), PROB_EPS).ln()))
        .sum())
}

/// Unweighted sum of the translation and action losses.
pub fn v2c_joint_loss(tape: &mut Tape, translation: Var, action: Var) -> Result<Var> {
    tape.add(translation, action)
}

/// `λ Σ ‖W‖²` over weight parameters; biases are not decayed.
pub fn weight_decay(tape: &mut Tape, store: &ParamStore, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::param(format!("weight decay must be nonnegative, got {lambda}")));
    }
    let mut terms = Vec::new();
    for id in store.ids().filter(|&id| store.kind(id) == ParamKind::Weight) {
        let w = tape.param(id);
        let sq = tape.mul(w, w)?;
        terms.push(tape.sum(sq));
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let total = tape.add_all(&terms)?;
    Ok(tape.scale(total, lambda))
}

pub fn weight_decay_value(store: &ParamStore, lambda: f64) -> f64 {
    lambda
        * store
            .ids()
            .filter(|&id| store.kind(id) == ParamKind::Weight)
            .map(|id| store.get(id).data().iter().map(|w| w * w).sum::<f64>())
            .sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampledRoi {
    pub index: usize,
    /// Matched ground-truth box for positives.
    pub gt: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSampling {
    pub batch: usize,
    pub positive_fraction: f64,
    pub fg_iou: f64,
}

impl Default for RoiSampling {
    fn default() -> Self {
        Self {
            batch: 64,
            positive_fraction: 0.25,
            fg_iou: 0.5,
        }
    }
}

/// Samples up to `cfg.batch` proposals at the configured positive fraction.
/// Missing positives are made up with extra negatives.
pub fn sample_rois(proposals: &[BoundingBox], gt: &[BoundingBox], cfg: &RoiSampling, rng: &mut SeededRng) -> Vec<SampledRoi> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        let best = gt
            .iter()
            .enumerate()
            .map(|(j, g)| (j, iou(p, g)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((j, v)),
            });
        match best {
            Some((j, v)) if v >= cfg.fg_iou => pos.push(SampledRoi { index: i, gt: Some(j) }),
            _ => neg.push(SampledRoi { index: i, gt: None }),
        }
    }
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    let want_pos = (cfg.batch as f64 * cfg.positive_fraction).round() as usize;
    pos.truncate(want_pos);
    let n_neg = cfg.batch.saturating_sub(pos.len()).min(neg.len());
    pos.extend_from_slice(&neg[..n_neg]);
    pos
}

//! Multi-task objective: dual-shot classification + regression over all
//! context branches (the progressive anchor scheme), per-level box-mask
//! segmentation, and the anchor-free objectness/IoU term.
//!
//! Each primitive loss exists twice: as a pure function of plain arrays (the
//! form the finite-difference tests exercise) and as a graph node routing the
//! analytic gradient back into the head tensors. Classification and
//! regression pool anchors across pyramid levels per (shot, branch), so
//! hard-negative mining competes globally the way the SSD lineage does.

use ndarray::{Array2, Array3, ArrayD};

use crate::anchors::{negative_filter_mask, AnchorLabel, TargetSet};
use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::network::HeadOutputs;
use crate::tensor::{scalar_tensor, sigmoid, stable_softplus, Tensor};

/// Per-term scalars of one training step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Branch-weighted first-shot classification (before the first-shot weight).
    pub cls_first: f64,
    pub cls_second: f64,
    pub reg_first: f64,
    pub reg_second: f64,
    pub seg: f64,
    pub anchor_free: f64,
    pub positives_first: usize,
    pub positives_second: usize,
}

impl LossReport {
    /// Recomputes the weighted sum from the stored terms.
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        self.cls_second
            + self.reg_second
            + w.first_shot_weight * (self.cls_first + self.reg_first)
            + w.segmentation_weight * self.seg
            + w.anchor_free_weight * self.anchor_free
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.cls_first,
            self.cls_second,
            self.reg_first,
            self.reg_second,
            self.seg,
            self.anchor_free,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// classification
// ---------------------------------------------------------------------------

/// Outcome of one pooled classification-loss evaluation.
pub struct ClsBreakdown {
    pub loss: f64,
    /// `d loss / d logits`, same shape as the input.
    pub grad: Array2<f64>,
    pub n_positive: usize,
    pub n_negative_kept: usize,
}

/// Softmax cross-entropy over positives plus the hardest retained negatives at
/// `mining_ratio`:1, normalized by the positive count clamped to >= 1.
///
/// `logits` is `[n, 2]` with column 0 = background, column 1 = face. Ignore
/// labels and filtered-out anchors never contribute. With zero positives the
/// `mining_ratio` hardest negatives still contribute, normalized by 1.
pub fn classification_loss_detailed(
    logits: &Array2<f64>,
    labels: &[AnchorLabel],
    retained: Option<&[bool]>,
    mining_ratio: usize,
) -> ClsBreakdown {
    let n = logits.nrows();
    debug_assert_eq!(n, labels.len());

    // per-anchor cross entropy toward each anchor's own class
    let ce = |i: usize, class: usize| -> f64 {
        let z0 = logits[[i, 0]];
        let z1 = logits[[i, 1]];
        let m = z0.max(z1);
        let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
        lse - logits[[i, class]]
    };

    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        match label {
            AnchorLabel::Positive(_) => positives.push(i),
            AnchorLabel::Negative => {
                if retained.map_or(true, |r| r[i]) {
                    negatives.push(i);
                }
            }
            AnchorLabel::Ignore => {}
        }
    }

    let keep = (mining_ratio * positives.len().max(1)).min(negatives.len());
    let mut neg_ce: Vec<(usize, f64)> = negatives.iter().map(|&i| (i, ce(i, 0))).collect();
    neg_ce.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    neg_ce.truncate(keep);

    let denom = positives.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, 2));
    let mut add = |i: usize, class: usize| {
        loss += ce(i, class);
        let z0 = logits[[i, 0]];
        let z1 = logits[[i, 1]];
        let p1 = sigmoid(z1 - z0);
        let p0 = 1.0 - p1;
        grad[[i, 0]] += (p0 - if class == 0 { 1.0 } else { 0.0 }) / denom;
        grad[[i, 1]] += (p1 - if class == 1 { 1.0 } else { 0.0 }) / denom;
    };
    for &i in &positives {
        add(i, 1);
    }
    for &(i, _) in &neg_ce {
        add(i, 0);
    }

    ClsBreakdown {
        loss: loss / denom,
        grad,
        n_positive: positives.len(),
        n_negative_kept: neg_ce.len(),
    }
}

pub fn classification_loss(
    logits: &Array2<f64>,
    labels: &[AnchorLabel],
    retained: Option<&[bool]>,
    mining_ratio: usize,
) -> f64 {
    classification_loss_detailed(logits, labels, retained, mining_ratio).loss
}

// ---------------------------------------------------------------------------
// regression
// ---------------------------------------------------------------------------

/// Smooth-L1 summed over positive anchors, normalized by the positive count
/// clamped to >= 1. Inputs are `[n, 4]`.
pub fn regression_loss_grad(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    positive: &[bool],
) -> (f64, Array2<f64>) {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let denom = n_pos.max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(pred.raw_dim());
    for (i, &is_pos) in positive.iter().enumerate() {
        if !is_pos {
            continue;
        }
        for k in 0..4 {
            let r = pred[[i, k]] - target[[i, k]];
            if r.abs() < 1.0 {
                loss += 0.5 * r * r;
                grad[[i, k]] = r / denom;
            } else {
                loss += r.abs() - 0.5;
                grad[[i, k]] = r.signum() / denom;
            }
        }
    }
    (loss / denom, grad)
}

pub fn regression_loss(pred: &Array2<f64>, target: &Array2<f64>, positive: &[bool]) -> f64 {
    regression_loss_grad(pred, target, positive).0
}

// ---------------------------------------------------------------------------
// segmentation
// ---------------------------------------------------------------------------

/// Mean per-pixel binary cross-entropy per level, averaged over levels.
/// Levels without positives still contribute their background term.
pub fn segmentation_loss_grad(
    logits: &[Array2<f64>],
    targets: &[Array2<f64>],
) -> (f64, Vec<Array2<f64>>) {
    debug_assert_eq!(logits.len(), targets.len());
    let n_levels = logits.len().max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (x, t) in logits.iter().zip(targets) {
        let n_pix = x.len().max(1) as f64;
        let mut level = 0.0;
        let mut g = Array2::zeros(x.raw_dim());
        for (idx, (&xv, &tv)) in x.iter().zip(t.iter()).enumerate() {
            level += stable_softplus(xv) - tv * xv;
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            g[[i, j]] = (sigmoid(xv) - tv) / (n_pix * n_levels);
        }
        total += level / n_pix;
        grads.push(g);
    }
    (total / n_levels, grads)
}

pub fn segmentation_loss(logits: &[Array2<f64>], targets: &[Array2<f64>]) -> f64 {
    segmentation_loss_grad(logits, targets).0
}

// ---------------------------------------------------------------------------
// anchor-free
// ---------------------------------------------------------------------------

/// Binary cross-entropy on objectness over all cells plus `-ln IoU` between
/// predicted and target side-distance boxes averaged over positive cells.
///
/// `distances` and `target_distances` are `[4, H, W]` (left/top/right/bottom,
/// all non-negative).
pub fn anchor_free_loss_grad(
    objectness: &Array2<f64>,
    distances: &Array3<f64>,
    target_obj: &Array2<f64>,
    target_distances: &Array3<f64>,
    positive: &Array2<bool>,
) -> (f64, Array2<f64>, Array3<f64>) {
    let (h, w) = objectness.dim();
    let n_cells = (h * w).max(1) as f64;
    let n_pos = positive.iter().filter(|&&p| p).count().max(1) as f64;

    let mut loss = 0.0;
    let mut d_obj = Array2::zeros((h, w));
    let mut d_dist = Array3::zeros(distances.raw_dim());

    for i in 0..h {
        for j in 0..w {
            let x = objectness[[i, j]];
            let t = target_obj[[i, j]];
            loss += (stable_softplus(x) - t * x) / n_cells;
            d_obj[[i, j]] = (sigmoid(x) - t) / n_cells;

            if !positive[[i, j]] {
                continue;
            }
            let p: [f64; 4] = std::array::from_fn(|k| distances[[k, i, j]]);
            let q: [f64; 4] = std::array::from_fn(|k| target_distances[[k, i, j]]);
            let ih = p[0].min(q[0]) + p[2].min(q[2]);
            let iv = p[1].min(q[1]) + p[3].min(q[3]);
            let inter = (ih * iv).max(1e-30);
            let area_p = (p[0] + p[2]) * (p[1] + p[3]);
            let area_q = (q[0] + q[2]) * (q[1] + q[3]);
            let union = (area_p + area_q - inter).max(1e-30);
            loss += (union.ln() - inter.ln()) / n_pos;

            for k in 0..4 {
                // opposite side pairs with k: horizontal (0, 2), vertical (1, 3)
                let (same, cross) = match k {
                    0 => (iv, p[1] + p[3]),
                    2 => (iv, p[1] + p[3]),
                    1 => (ih, p[0] + p[2]),
                    _ => (ih, p[0] + p[2]),
                };
                let d_inter = if p[k] < q[k] { same } else { 0.0 };
                let d_area = cross;
                let d_union = d_area - d_inter;
                d_dist[[k, i, j]] = (d_union / union - d_inter / inter) / n_pos;
            }
        }
    }
    (loss, d_obj, d_dist)
}

pub fn anchor_free_loss(
    objectness: &Array2<f64>,
    distances: &Array3<f64>,
    target_obj: &Array2<f64>,
    target_distances: &Array3<f64>,
    positive: &Array2<bool>,
) -> f64 {
    anchor_free_loss_grad(objectness, distances, target_obj, target_distances, positive).0
}

// ---------------------------------------------------------------------------
// graph nodes
// ---------------------------------------------------------------------------

/// Flattens per-level `[2, H, W]` logits into one `[n, 2]` matrix, anchors in
/// grid row-major order, levels concatenated in order.
fn pool_pairs(levels: &[Tensor]) -> Array2<f64> {
    let total: usize = levels.iter().map(|t| t.shape()[1] * t.shape()[2]).sum();
    let mut out = Array2::zeros((total, 2));
    let mut row = 0;
    for t in levels {
        let v = t.value();
        let (h, w) = (v.shape()[1], v.shape()[2]);
        for i in 0..h {
            for j in 0..w {
                out[[row, 0]] = v[[0, i, j]];
                out[[row, 1]] = v[[1, i, j]];
                row += 1;
            }
        }
    }
    out
}

fn pool_quads(levels: &[Tensor]) -> Array2<f64> {
    let total: usize = levels.iter().map(|t| t.shape()[1] * t.shape()[2]).sum();
    let mut out = Array2::zeros((total, 4));
    let mut row = 0;
    for t in levels {
        let v = t.value();
        let (h, w) = (v.shape()[1], v.shape()[2]);
        for i in 0..h {
            for j in 0..w {
                for k in 0..4 {
                    out[[row, k]] = v[[k, i, j]];
                }
                row += 1;
            }
        }
    }
    out
}

/// Scatters pooled `[n, c]` gradients back to per-level `[c, H, W]` parents.
fn scatter_rows(grad: &Array2<f64>, scale: f64, parents: &[Tensor]) {
    let c = grad.ncols();
    let mut row = 0;
    for p in parents {
        let sh = p.shape();
        let (h, w) = (sh[1], sh[2]);
        let mut dp = ArrayD::zeros(ndarray::IxDyn(&[c, h, w]));
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    dp[[k, i, j]] = grad[[row, k]] * scale;
                }
                row += 1;
            }
        }
        p.accumulate_grad(&dp);
    }
}

/// Pooled classification loss as a graph node over per-level logit tensors.
pub fn classification_node(
    levels: &[Tensor],
    labels: Vec<AnchorLabel>,
    retained: Option<Vec<bool>>,
    mining_ratio: usize,
) -> Tensor {
    let pooled = pool_pairs(levels);
    let detail =
        classification_loss_detailed(&pooled, &labels, retained.as_deref(), mining_ratio);
    let grad = detail.grad;
    Tensor::from_op(
        scalar_tensor(detail.loss),
        levels.to_vec(),
        Box::new(move |g, _v, parents| scatter_rows(&grad, g[[0]], parents)),
    )
}

/// Pooled smooth-L1 regression node.
pub fn regression_node(
    levels: &[Tensor],
    target: Array2<f64>,
    positive: Vec<bool>,
) -> Tensor {
    let pooled = pool_quads(levels);
    let (loss, grad) = regression_loss_grad(&pooled, &target, &positive);
    Tensor::from_op(
        scalar_tensor(loss),
        levels.to_vec(),
        Box::new(move |g, _v, parents| scatter_rows(&grad, g[[0]], parents)),
    )
}

/// Per-level segmentation node over `[1, H, W]` logit tensors.
pub fn segmentation_node(levels: &[Tensor], targets: &[Array2<f64>]) -> Tensor {
    let logits: Vec<Array2<f64>> = levels
        .iter()
        .map(|t| {
            let v = t.value();
            let (h, w) = (v.shape()[1], v.shape()[2]);
            Array2::from_shape_fn((h, w), |(i, j)| v[[0, i, j]])
        })
        .collect();
    let (loss, grads) = segmentation_loss_grad(&logits, targets);
    Tensor::from_op(
        scalar_tensor(loss),
        levels.to_vec(),
        Box::new(move |g, _v, parents| {
            for (p, lg) in parents.iter().zip(&grads) {
                let (h, w) = lg.dim();
                let mut dp = ArrayD::zeros(ndarray::IxDyn(&[1, h, w]));
                for i in 0..h {
                    for j in 0..w {
                        dp[[0, i, j]] = lg[[i, j]] * g[[0]];
                    }
                }
                p.accumulate_grad(&dp);
            }
        }),
    )
}

/// Anchor-free node over the objectness and distance tensors.
pub fn anchor_free_node(
    objectness: &Tensor,
    distances: &Tensor,
    target_obj: Array2<f64>,
    target_distances: Array3<f64>,
    positive: Array2<bool>,
) -> Tensor {
    let ov = objectness.value();
    let (h, w) = (ov.shape()[1], ov.shape()[2]);
    let obj = Array2::from_shape_fn((h, w), |(i, j)| ov[[0, i, j]]);
    let dv = distances.value();
    let dist = Array3::from_shape_fn((4, h, w), |(k, i, j)| dv[[k, i, j]]);
    let (loss, d_obj, d_dist) =
        anchor_free_loss_grad(&obj, &dist, &target_obj, &target_distances, &positive);
    Tensor::from_op(
        scalar_tensor(loss),
        vec![objectness.clone(), distances.clone()],
        Box::new(move |g, _v, parents| {
            let s = g[[0]];
            let (h, w) = d_obj.dim();
            let mut go = ArrayD::zeros(ndarray::IxDyn(&[1, h, w]));
            for i in 0..h {
                for j in 0..w {
                    go[[0, i, j]] = d_obj[[i, j]] * s;
                }
            }
            parents[0].accumulate_grad(&go);
            parents[1].accumulate_grad(&d_dist.mapv(|v| v * s).into_dyn());
        }),
    )
}

// ---------------------------------------------------------------------------
// assembly
// ---------------------------------------------------------------------------

/// Detection terms of the progressive anchor objective.
pub struct DetectionTerms {
    pub total: Tensor,
    pub cls_first: f64,
    pub cls_second: f64,
    pub reg_first: f64,
    pub reg_second: f64,
}

fn pooled_labels(targets: &[crate::anchors::ShotLevelTargets], branch: usize) -> Vec<AnchorLabel> {
    targets.iter().flat_map(|t| t.branch_labels[branch].iter().copied()).collect()
}

fn pooled_offsets(
    targets: &[crate::anchors::ShotLevelTargets],
) -> (Array2<f64>, Vec<bool>) {
    let n: usize = targets.iter().map(|t| t.offsets.len()).sum();
    let mut out = Array2::zeros((n, 4));
    let mut pos = vec![false; n];
    let mut row = 0;
    for t in targets {
        for off in &t.offsets {
            if let Some(o) = off {
                out[[row, 0]] = o.dx;
                out[[row, 1]] = o.dy;
                out[[row, 2]] = o.dw;
                out[[row, 3]] = o.dh;
                pos[row] = true;
            }
            row += 1;
        }
    }
    (out, pos)
}

/// First-shot face-branch background probabilities, pooled over levels in the
/// same order as the label pooling. These drive the easy-negative filter.
pub fn first_shot_background_probs(heads: &HeadOutputs) -> Vec<f64> {
    let pooled = pool_pairs(&heads.first_cls[0]);
    (0..pooled.nrows()).map(|i| sigmoid(pooled[[i, 0]] - pooled[[i, 1]])).collect()
}

/// Builds the dual-shot detection objective:
/// `sum_b w_b * cls2_b + w_r * reg2 + beta * (sum_b w_b * cls1_b + w_r * reg1)`,
/// where the regression terms exist on the face branch only. When
/// `first_shot_bg` is given, second-shot classification drops easy negatives
/// whose first-shot background probability exceeds the filter threshold.
pub fn progressive_anchor_loss(
    heads: &HeadOutputs,
    targets: &TargetSet,
    w: &LossWeights,
    first_shot_bg: Option<&[f64]>,
) -> Result<DetectionTerms> {
    let branches = heads.second_cls.len();
    if w.context_branch_weights.len() != branches {
        return Err(Error::InvalidConfig(format!(
            "{} branch weights for {branches} branches",
            w.context_branch_weights.len()
        )));
    }

    let mut cls_second_total: Option<Tensor> = None;
    let mut cls_first_total: Option<Tensor> = None;
    for b in 0..branches {
        let wb = w.context_branch_weights[b];
        let labels2 = pooled_labels(&targets.second, b);
        let retained = first_shot_bg.map(|bg| {
            negative_filter_mask(bg, &labels2, w.negative_filter_threshold)
        });
        let c2 = classification_node(&heads.second_cls[b], labels2, retained, w.mining_ratio)
            .scale(wb);
        cls_second_total = Some(match cls_second_total {
            None => c2,
            Some(acc) => acc.add(&c2),
        });

        let labels1 = pooled_labels(&targets.first, b);
        let c1 = classification_node(&heads.first_cls[b], labels1, None, w.mining_ratio)
            .scale(wb);
        cls_first_total = Some(match cls_first_total {
            None => c1,
            Some(acc) => acc.add(&c1),
        });
    }
    let cls_second_total = cls_second_total.expect("at least one branch");
    let cls_first_total = cls_first_total.expect("at least one branch");

    let w_reg = w.regression_weight * w.context_branch_weights[0];
    let (target2, pos2) = pooled_offsets(&targets.second);
    let reg_second = regression_node(&heads.second_reg, target2, pos2).scale(w_reg);
    let (target1, pos1) = pooled_offsets(&targets.first);
    let reg_first = regression_node(&heads.first_reg, target1, pos1).scale(w_reg);

    let total = cls_second_total
        .add(&reg_second)
        .add(&cls_first_total.add(&reg_first).scale(w.first_shot_weight));

    Ok(DetectionTerms {
        cls_first: cls_first_total.scalar(),
        cls_second: cls_second_total.scalar(),
        reg_first: reg_first.scalar(),
        reg_second: reg_second.scalar(),
        total,
    })
}

/// The full multi-task objective and its report. Zero-weight auxiliary terms
/// are skipped entirely, leaving the pure detection loss bit-for-bit.
pub fn total_loss(
    heads: &HeadOutputs,
    targets: &TargetSet,
    w: &LossWeights,
) -> Result<(Tensor, LossReport)> {
    let bg = first_shot_background_probs(heads);
    let det = progressive_anchor_loss(heads, targets, w, Some(&bg))?;

    let mut total = det.total.clone();
    let mut seg_value = 0.0;
    if w.segmentation_weight > 0.0 {
        let seg = segmentation_node(&heads.seg, &targets.segmentation);
        seg_value = seg.scalar();
        total = total.add(&seg.scale(w.segmentation_weight));
    }
    let mut af_value = 0.0;
    if w.anchor_free_weight > 0.0 {
        let af = anchor_free_node(
            &heads.af_objectness,
            &heads.af_distances,
            targets.af_objectness.clone(),
            targets.af_distances.clone(),
            targets.af_positive.clone(),
        );
        af_value = af.scalar();
        total = total.add(&af.scale(w.anchor_free_weight));
    }

    let report = LossReport {
        total: total.scalar(),
        cls_first: det.cls_first,
        cls_second: det.cls_second,
        reg_first: det.reg_first,
        reg_second: det.reg_second,
        seg: seg_value,
        anchor_free: af_value,
        positives_first: targets.positives(crate::anchors::Shot::First),
        positives_second: targets.positives(crate::anchors::Shot::Second),
    };
    Ok((total, report))
}

//! Anchor pyramids for both shots, context-region label generation, two-stage
//! matching, training-target encoding, and the first-shot negative filter.
//!
//! Each pyramid level carries one square anchor per cell. The second shot uses
//! the configured anchor sizes; the first shot uses exactly half of each, so
//! the early heads are supervised on proportionally smaller regions. Context
//! branches (face/head/body) match the same grid against regions scaled about
//! the face center.

use ndarray::{Array2, Array3};

use crate::config::{DetectorConfig, MatchConfig};
use crate::error::{Error, Result};
use crate::geometry::{encode, iou, BBox, EncodedOffset};
use crate::sampling::Sample;

/// Which of the two detection shots a grid belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shot {
    First,
    Second,
}

/// The tiled anchor set of one pyramid level of one shot.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub level: usize,
    pub shot: Shot,
    pub stride: u32,
    pub anchor_size: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major: index = i * width + j, centered at
    /// `(stride * (j + 0.5), stride * (i + 0.5))`.
    pub boxes: Vec<BBox>,
}

impl AnchorGrid {
    fn build(level: usize, shot: Shot, stride: u32, anchor_size: f64, image_size: u32) -> Self {
        let cells = (image_size / stride) as usize;
        let s = stride as f64;
        let mut boxes = Vec::with_capacity(cells * cells);
        for i in 0..cells {
            for j in 0..cells {
                let cx = s * (j as f64 + 0.5);
                let cy = s * (i as f64 + 0.5);
                boxes.push(BBox::centered_square(cx, cy, anchor_size));
            }
        }
        AnchorGrid { level, shot, stride, anchor_size, width: cells, height: cells, boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// All grids of both shots.
#[derive(Debug, Clone)]
pub struct AnchorPyramid {
    pub first: Vec<AnchorGrid>,
    pub second: Vec<AnchorGrid>,
    pub image_size: u32,
}

/// Builds the full dual-shot pyramid. The image side must be divisible by the
/// largest stride (config validation guarantees strides are nested, so it is
/// then divisible by every stride).
pub fn build_anchor_pyramid(image_size: u32, cfg: &DetectorConfig) -> Result<AnchorPyramid> {
    let strides = &cfg.network.strides;
    let sizes = &cfg.sampler.anchor_sizes;
    let largest = *strides.last().expect("validated config");
    if image_size % largest != 0 {
        return Err(Error::InvalidConfig(format!(
            "image size {image_size} is not divisible by the largest stride {largest}"
        )));
    }
    let mut first = Vec::with_capacity(strides.len());
    let mut second = Vec::with_capacity(strides.len());
    for (level, (&stride, &size)) in strides.iter().zip(sizes).enumerate() {
        first.push(AnchorGrid::build(level, Shot::First, stride, size / 2.0, image_size));
        second.push(AnchorGrid::build(level, Shot::Second, stride, size, image_size));
    }
    Ok(AnchorPyramid { first, second, image_size })
}

/// Region with the same center as `face` and both sides multiplied by `ratio`.
pub fn context_region(face: &BBox, ratio: f64) -> BBox {
    debug_assert!(ratio >= 1.0, "context ratios are >= 1");
    scale_about_center(face, ratio)
}

pub(crate) fn scale_about_center(b: &BBox, factor: f64) -> BBox {
    let (cx, cy) = b.center();
    let hw = b.width() * factor / 2.0;
    let hh = b.height() * factor / 2.0;
    BBox::raw(cx - hw, cy - hh, cx + hw, cy + hh)
}

/// Per-anchor assignment for one (grid, branch) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Negative,
    /// Matched to the face with this index.
    Positive(usize),
    /// Excluded from both the positive and negative loss pools.
    Ignore,
}

impl AnchorLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive(_))
    }
}

/// Two-stage matching of faces (scaled by `branch_ratio`) against a grid.
///
/// Stage 1 marks every anchor whose best IoU reaches `primary_iou` as positive
/// for its argmax face (ties to the lower face index). Stage 2 walks faces in
/// index order; a face with no stage-1 positives takes its `compensate_top_n`
/// best unassigned anchors among those with IoU at least `compensate_iou`
/// (ties to the lower anchor index).
pub fn match_anchors(
    faces: &[BBox],
    anchors: &[BBox],
    branch_ratio: f64,
    mc: &MatchConfig,
) -> Vec<AnchorLabel> {
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if faces.is_empty() {
        return labels;
    }
    let regions: Vec<BBox> = faces.iter().map(|f| context_region(f, branch_ratio)).collect();

    // iou_table[f] holds the IoU of every anchor against region f
    let iou_table: Vec<Vec<f64>> = regions
        .iter()
        .map(|r| anchors.iter().map(|a| iou(a, r)).collect())
        .collect();

    let mut stage1_count = vec![0usize; faces.len()];
    for (ai, label) in labels.iter_mut().enumerate() {
        let mut best_face = 0;
        let mut best_iou = -1.0;
        for fi in 0..faces.len() {
            let v = iou_table[fi][ai];
            if v > best_iou {
                best_iou = v;
                best_face = fi;
            }
        }
        if best_iou >= mc.primary_iou {
            *label = AnchorLabel::Positive(best_face);
            stage1_count[best_face] += 1;
        }
    }

    for fi in 0..faces.len() {
        if stage1_count[fi] > 0 {
            continue;
        }
        let mut candidates: Vec<(usize, f64)> = iou_table[fi]
            .iter()
            .enumerate()
            .filter(|&(ai, &v)| v >= mc.compensate_iou && !labels[ai].is_positive())
            .map(|(ai, &v)| (ai, v))
            .collect();
        candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(ai, _) in candidates.iter().take(mc.compensate_top_n) {
            labels[ai] = AnchorLabel::Positive(fi);
        }
    }
    labels
}

/// Marks anchors overlapping any ignore region beyond `ignore_iou` as ignore,
/// unless they are already positive.
fn apply_ignore_regions(
    labels: &mut [AnchorLabel],
    anchors: &[BBox],
    ignore_boxes: &[BBox],
    ignore_iou: f64,
) {
    if ignore_boxes.is_empty() {
        return;
    }
    for (ai, label) in labels.iter_mut().enumerate() {
        if label.is_positive() {
            continue;
        }
        if ignore_boxes.iter().any(|g| iou(&anchors[ai], g) > ignore_iou) {
            *label = AnchorLabel::Ignore;
        }
    }
}

/// Encoded training targets for one shot at one level.
#[derive(Debug, Clone)]
pub struct ShotLevelTargets {
    /// Labels per context branch, each `grid.len()` long.
    pub branch_labels: Vec<Vec<AnchorLabel>>,
    /// Face-branch regression target per anchor (positives only).
    pub offsets: Vec<Option<EncodedOffset>>,
}

/// Everything the losses need for one augmented sample.
#[derive(Debug, Clone)]
pub struct TargetSet {
    pub first: Vec<ShotLevelTargets>,
    pub second: Vec<ShotLevelTargets>,
    /// Per level, `{0,1}` at the level's stride resolution.
    pub segmentation: Vec<Array2<f64>>,
    pub af_objectness: Array2<f64>,
    /// `[4, H, W]`: distances from the cell center to the left/top/right/
    /// bottom sides of the matched face, in pixels.
    pub af_distances: Array3<f64>,
    pub af_positive: Array2<bool>,
}

impl TargetSet {
    /// Total face-branch positives of one shot.
    pub fn positives(&self, shot: Shot) -> usize {
        let levels = match shot {
            Shot::First => &self.first,
            Shot::Second => &self.second,
        };
        levels
            .iter()
            .map(|t| t.branch_labels[0].iter().filter(|l| l.is_positive()).count())
            .sum()
    }
}

/// Builds class labels, regression offsets, per-level segmentation maps and
/// the anchor-free maps for one augmented sample.
///
/// Invalid-flagged faces contribute ignore labels (anchors overlapping them
/// are excluded from both loss pools) and are excluded from the segmentation
/// and anchor-free targets.
pub fn build_targets(
    sample: &Sample,
    pyramid: &AnchorPyramid,
    cfg: &DetectorConfig,
) -> TargetSet {
    let mc = &cfg.matching;
    let mut valid_faces = Vec::new();
    let mut ignore_boxes = Vec::new();
    for (b, a) in sample.boxes.iter().zip(&sample.attributes) {
        if a.invalid || b.area() <= 0.0 {
            ignore_boxes.push(*b);
        } else {
            valid_faces.push(*b);
        }
    }

    let shot_targets = |grids: &[AnchorGrid], is_first: bool| -> Vec<ShotLevelTargets> {
        grids
            .iter()
            .map(|grid| {
                let branch_labels: Vec<Vec<AnchorLabel>> = mc
                    .context_ratios
                    .iter()
                    .enumerate()
                    .map(|(bi, &ratio)| {
                        if is_first && bi > 0 && !mc.first_shot_context_branches {
                            return vec![AnchorLabel::Ignore; grid.len()];
                        }
                        let mut labels = match_anchors(&valid_faces, &grid.boxes, ratio, mc);
                        apply_ignore_regions(
                            &mut labels,
                            &grid.boxes,
                            &ignore_boxes,
                            mc.ignore_iou,
                        );
                        labels
                    })
                    .collect();
                let offsets = branch_labels[0]
                    .iter()
                    .enumerate()
                    .map(|(ai, label)| match label {
                        AnchorLabel::Positive(fi) => Some(
                            encode(&valid_faces[*fi], &grid.boxes[ai], cfg.variances)
                                .expect("anchors have positive dimensions"),
                        ),
                        _ => None,
                    })
                    .collect();
                ShotLevelTargets { branch_labels, offsets }
            })
            .collect()
    };

    let first = shot_targets(&pyramid.first, true);
    let second = shot_targets(&pyramid.second, false);

    let segmentation = build_segmentation_maps(&valid_faces, pyramid, cfg);
    let (af_objectness, af_distances, af_positive) =
        build_anchor_free_maps(&valid_faces, pyramid, cfg);

    TargetSet { first, second, segmentation, af_objectness, af_distances, af_positive }
}

/// Level whose second-shot anchor size is nearest the face size in log space.
pub fn segmentation_level(face_size: f64, anchor_sizes: &[f64]) -> usize {
    let target = face_size.max(f64::MIN_POSITIVE).ln();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &a) in anchor_sizes.iter().enumerate() {
        let d = (a.ln() - target).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn build_segmentation_maps(
    faces: &[BBox],
    pyramid: &AnchorPyramid,
    cfg: &DetectorConfig,
) -> Vec<Array2<f64>> {
    let sizes = &cfg.sampler.anchor_sizes;
    let mut assigned: Vec<Vec<&BBox>> = vec![Vec::new(); pyramid.second.len()];
    for f in faces {
        assigned[segmentation_level(f.size(), sizes)].push(f);
    }
    pyramid
        .second
        .iter()
        .enumerate()
        .map(|(level, grid)| {
            let mut map = Array2::zeros((grid.height, grid.width));
            let s = grid.stride as f64;
            for f in &assigned[level] {
                for i in 0..grid.height {
                    let cy = s * (i as f64 + 0.5);
                    if cy <= f.y_min || cy >= f.y_max {
                        continue;
                    }
                    for j in 0..grid.width {
                        let cx = s * (j as f64 + 0.5);
                        if cx > f.x_min && cx < f.x_max {
                            map[[i, j]] = 1.0;
                        }
                    }
                }
            }
            map
        })
        .collect()
}

fn build_anchor_free_maps(
    faces: &[BBox],
    pyramid: &AnchorPyramid,
    cfg: &DetectorConfig,
) -> (Array2<f64>, Array3<f64>, Array2<bool>) {
    let grid = &pyramid.second[cfg.network.af_level];
    let (h, w) = (grid.height, grid.width);
    let mut objectness = Array2::zeros((h, w));
    let mut distances = Array3::zeros((4, h, w));
    let mut positive = Array2::from_elem((h, w), false);
    let s = grid.stride as f64;

    let shrunk: Vec<BBox> = faces
        .iter()
        .map(|f| scale_about_center(f, cfg.network.af_shrink))
        .collect();

    for i in 0..h {
        let cy = s * (i as f64 + 0.5);
        for j in 0..w {
            let cx = s * (j as f64 + 0.5);
            // smallest face whose center region strictly contains the cell center
            let mut chosen: Option<usize> = None;
            for (fi, sb) in shrunk.iter().enumerate() {
                if cx > sb.x_min && cx < sb.x_max && cy > sb.y_min && cy < sb.y_max {
                    match chosen {
                        Some(prev) if faces[prev].area() <= faces[fi].area() => {}
                        _ => chosen = Some(fi),
                    }
                }
            }
            if let Some(fi) = chosen {
                let f = &faces[fi];
                objectness[[i, j]] = 1.0;
                positive[[i, j]] = true;
                distances[[0, i, j]] = cx - f.x_min;
                distances[[1, i, j]] = cy - f.y_min;
                distances[[2, i, j]] = f.x_max - cx;
                distances[[3, i, j]] = f.y_max - cy;
            }
        }
    }
    (objectness, distances, positive)
}

/// First-shot negative filter: anchors that are negatives AND whose first-shot
/// background probability strictly exceeds `threshold` are dropped from the
/// second-shot classification loss. Positives are never dropped.
/// Returns `true` for retained anchors.
pub fn negative_filter_mask(
    background_probs: &[f64],
    labels: &[AnchorLabel],
    threshold: f64,
) -> Vec<bool> {
    debug_assert_eq!(background_probs.len(), labels.len());
    labels
        .iter()
        .zip(background_probs)
        .map(|(label, &p)| !(matches!(label, AnchorLabel::Negative) && p > threshold))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::BoxAttributes;
    use image::RgbImage;
    use proptest::prelude::*;

    fn desk() -> DetectorConfig {
        DetectorConfig::desk()
    }

    #[test]
    fn pyramid_shapes_full_scale() {
        let cfg = DetectorConfig::full_scale();
        let p = build_anchor_pyramid(640, &cfg).unwrap();
        assert_eq!(p.second.len(), 6);
        // level 0: stride 4 -> 160x160 cells, anchor 16 (second), 8 (first)
        assert_eq!(p.second[0].width, 160);
        assert_eq!(p.second[0].height, 160);
        assert_eq!(p.second[0].anchor_size, 16.0);
        assert_eq!(p.first[0].anchor_size, 8.0);
        assert_eq!(p.second[0].len(), 160 * 160);
    }

    #[test]
    fn first_shot_is_half_size_everywhere() {
        for cfg in [DetectorConfig::full_scale(), desk()] {
            let p = build_anchor_pyramid(cfg.sampler.crop_size, &cfg).unwrap();
            for (f, s) in p.first.iter().zip(&p.second) {
                assert_eq!(f.anchor_size * 2.0, s.anchor_size);
                assert_eq!(f.stride, s.stride);
                assert_eq!(f.len(), s.len());
            }
        }
    }

    #[test]
    fn anchor_centering_arithmetic() {
        let cfg = DetectorConfig::full_scale();
        let p = build_anchor_pyramid(640, &cfg).unwrap();
        let g = &p.second[0]; // stride 4, size 16
        let b = &g.boxes[0];
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (-6.0, -6.0, 10.0, 10.0));
        assert_eq!(b.center(), (2.0, 2.0));
        // row-major: cell (i=2, j=5) centered at (22, 10)
        let b = &g.boxes[2 * g.width + 5];
        assert_eq!(b.center(), (22.0, 10.0));
    }

    #[test]
    fn indivisible_image_rejected() {
        let cfg = DetectorConfig::full_scale();
        assert!(build_anchor_pyramid(641, &cfg).is_err());
        assert!(build_anchor_pyramid(1280, &cfg).is_ok());
    }

    #[test]
    fn context_region_examples() {
        let f = BBox::raw(100.0, 100.0, 150.0, 150.0);
        assert_eq!(context_region(&f, 1.0), f);
        let r2 = context_region(&f, 2.0);
        assert_eq!((r2.x_min, r2.y_min, r2.x_max, r2.y_max), (75.0, 75.0, 175.0, 175.0));
        let r4 = context_region(&f, 4.0);
        assert_eq!(r4.center(), f.center());
        assert_eq!(r4.width(), 4.0 * f.width());
        assert_eq!(r4.height(), 4.0 * f.height());
    }

    #[test]
    fn exact_anchor_match_is_positive() {
        let cfg = desk();
        let p = build_anchor_pyramid(160, &cfg).unwrap();
        let g = &p.second[2]; // stride 4, size 16
        let face = g.boxes[g.width * 3 + 4];
        let labels = match_anchors(&[face], &g.boxes, 1.0, &cfg.matching);
        assert_eq!(labels[g.width * 3 + 4], AnchorLabel::Positive(0));
    }

    #[test]
    fn low_iou_face_is_force_matched_in_stage_two() {
        let cfg = desk();
        let p = build_anchor_pyramid(160, &cfg).unwrap();
        let g = &p.second[0]; // stride 1, size 4
        // a tiny face between cell centers: best IoU well below 0.35 but
        // above 0.1
        let face = BBox::raw(10.3, 10.3, 12.3, 12.3);
        let best = g.boxes.iter().map(|a| iou(a, &face)).fold(0.0, f64::max);
        assert!(best < cfg.matching.primary_iou, "setup: best IoU {best}");
        assert!(best >= cfg.matching.compensate_iou, "setup: best IoU {best}");
        let labels = match_anchors(&[face], &g.boxes, 1.0, &cfg.matching);
        let positives = labels.iter().filter(|l| l.is_positive()).count();
        assert!(positives >= 1 && positives <= cfg.matching.compensate_top_n);
    }

    #[test]
    fn empty_faces_all_negative() {
        let cfg = desk();
        let p = build_anchor_pyramid(160, &cfg).unwrap();
        let labels = match_anchors(&[], &p.second[3].boxes, 1.0, &cfg.matching);
        assert!(labels.iter().all(|l| *l == AnchorLabel::Negative));
    }

    /// Deliberately naive restatement of the matching law.
    fn match_oracle(
        faces: &[BBox],
        anchors: &[BBox],
        ratio: f64,
        mc: &MatchConfig,
    ) -> Vec<AnchorLabel> {
        let mut labels = vec![AnchorLabel::Negative; anchors.len()];
        let region =
            |fi: usize| -> BBox { context_region(&faces[fi], ratio) };
        // stage 1
        for ai in 0..anchors.len() {
            let mut best: Option<(usize, f64)> = None;
            for fi in 0..faces.len() {
                let v = iou(&anchors[ai], &region(fi));
                let better = match best {
                    None => true,
                    Some((_, bv)) => v > bv,
                };
                if better {
                    best = Some((fi, v));
                }
            }
            if let Some((fi, v)) = best {
                if v >= mc.primary_iou {
                    labels[ai] = AnchorLabel::Positive(fi);
                }
            }
        }
        // stage 2
        for fi in 0..faces.len() {
            let got_stage1 = (0..anchors.len()).any(|ai| {
                labels[ai] == AnchorLabel::Positive(fi)
                    && iou(&anchors[ai], &region(fi)) >= mc.primary_iou
            });
            let stage1_count = (0..anchors.len())
                .filter(|&ai| {
                    // count only anchors whose argmax face was fi in stage 1
                    matches!(labels[ai], AnchorLabel::Positive(f) if f == fi)
                        && iou(&anchors[ai], &region(fi)) >= mc.primary_iou
                })
                .count();
            let _ = got_stage1;
            if stage1_count > 0 {
                continue;
            }
            let mut cands: Vec<(usize, f64)> = Vec::new();
            for ai in 0..anchors.len() {
                if labels[ai].is_positive() {
                    continue;
                }
                let v = iou(&anchors[ai], &region(fi));
                if v >= mc.compensate_iou {
                    cands.push((ai, v));
                }
            }
            cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for &(ai, _) in cands.iter().take(mc.compensate_top_n) {
                labels[ai] = AnchorLabel::Positive(fi);
            }
        }
        labels
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn prop_matching_equals_oracle(
            seed in 0u64..10_000,
            n_faces in 1usize..20,
            ratio_idx in 0usize..3,
        ) {
            use rand::{Rng, SeedableRng};
            let cfg = desk();
            let p = build_anchor_pyramid(160, &cfg).unwrap();
            let g = &p.second[3]; // 20x20 grid, size 32
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let faces: Vec<BBox> = (0..n_faces)
                .map(|_| {
                    let s = rng.gen_range(4.0..80.0);
                    let x = rng.gen_range(0.0..(160.0 - s));
                    let y = rng.gen_range(0.0..(160.0 - s));
                    BBox::raw(x, y, x + s, y + s)
                })
                .collect();
            let ratio = cfg.matching.context_ratios[ratio_idx];
            let fast = match_anchors(&faces, &g.boxes, ratio, &cfg.matching);
            let slow = match_oracle(&faces, &g.boxes, ratio, &cfg.matching);
            prop_assert_eq!(fast, slow);
        }
    }

    fn synthetic_sample(cfg: &DetectorConfig, boxes: Vec<BBox>) -> Sample {
        let crop = cfg.sampler.crop_size;
        let attrs = vec![BoxAttributes::default(); boxes.len()];
        Sample::new(RgbImage::new(crop, crop), boxes, attrs)
    }

    #[test]
    fn empty_sample_targets_are_all_negative_and_zero() {
        let cfg = desk();
        let p = build_anchor_pyramid(160, &cfg).unwrap();
        let sample = synthetic_sample(&cfg, vec![]);
        let t = build_targets(&sample, &p, &cfg);
        for shot in [&t.first, &t.second] {
            for lvl in shot.iter() {
                for branch in &lvl.branch_labels {
                    assert!(branch.iter().all(|l| *l == AnchorLabel::Negative));
                }
                assert!(lvl.offsets.iter().all(|o| o.is_none()));
            }
        }
        assert!(t.segmentation.iter().all(|m| m.iter().all(|&v| v == 0.0)));
        assert!(t.af_objectness.iter().all(|&v| v == 0.0));
        assert!(t.af_distances.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segmentation_positives_land_on_assigned_level_with_cell_count() {
        let cfg = desk();
        let p = build_anchor_pyramid(160, &cfg).unwrap();
        // face of exactly anchor_sizes[2] = 16 px
        let face = BBox::raw(40.0, 56.0, 56.0, 72.0);
        let sample = synthetic_sample(&cfg, vec![face]);
        let t = build_targets(&sample, &p, &cfg);
        for (level, map) in t.segmentation.iter().enumerate() {
            let count = map.iter().filter(|&&v| v == 1.0).count();
            if level == 2 {
                // independent cell-center count at stride 4
                let s = 4.0;
                let mut expect = 0;
                for i in 0..40 {
                    for j in 0..40 {
                        let cx = s * (j as f64 + 0.5);
                        let cy = s * (i as f64 + 0.5);
                        if cx > face.x_min && cx < face.x_max && cy > face.y_min && cy < face.y_max
                        {
                            expect += 1;
                        }
                    }
                }
                assert_eq!(count, expect);
                assert!(count > 0);
            } else {
                assert_eq!(count, 0, "level {level} should be empty");
            }
        }
    }

    #[test]
    fn segmentation_flip_symmetry() {
        use rand::{Rng, SeedableRng};
        let cfg = desk();
        let crop = cfg.sampler.crop_size as f64;
        let p = build_anchor_pyramid(160, &cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let boxes: Vec<BBox> = (0..4)
                .map(|_| {
                    let s = rng.gen_range(5.0..70.0f64).round();
                    let x = rng.gen_range(0.0..(crop - s)).round();
                    let y = rng.gen_range(0.0..(crop - s)).round();
                    BBox::raw(x, y, x + s, y + s)
                })
                .collect();
            let flipped: Vec<BBox> = boxes.iter().map(|b| b.hflipped(crop)).collect();
            let t = build_targets(&synthetic_sample(&cfg, boxes), &p, &cfg);
            let tf = build_targets(&synthetic_sample(&cfg, flipped), &p, &cfg);
            for (m, mf) in t.segmentation.iter().zip(&tf.segmentation) {
                let w = m.shape()[1];
                for i in 0..m.shape()[0] {
                    for j in 0..w {
                        assert_eq!(m[[i, j]], mf[[i, w - 1 - j]]);
                    }
                }
            }
        }
    }

    #[test]
    fn matched_faces_get_second_shot_positives() {
        use rand::{Rng, SeedableRng};
        let cfg = desk();
        let p = build_anchor_pyramid(160, &cfg).unwrap();
        let lo = cfg.sampler.anchor_sizes[0] / 2.0;
        let hi = *cfg.sampler.anchor_sizes.last().unwrap() * 2.0;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let s = rng.gen_range(lo..hi.min(150.0));
            let x = rng.gen_range(0.0..(160.0 - s.min(159.0)));
            let y = rng.gen_range(0.0..(160.0 - s.min(159.0)));
            let face = BBox::raw(x, y, x + s, y + s);
            let t = build_targets(&synthetic_sample(&cfg, vec![face]), &p, &cfg);
            assert!(t.positives(Shot::Second) >= 1, "face of size {s} unmatched");
            // positives carry finite offsets
            for lvl in &t.second {
                for (label, off) in lvl.branch_labels[0].iter().zip(&lvl.offsets) {
                    if label.is_positive() {
                        assert!(off.expect("offset present").is_finite());
                    } else {
                        assert!(off.is_none());
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_faces_become_ignore_regions() {
        let cfg = desk();
        let p = build_anchor_pyramid(160, &cfg).unwrap();
        let crop = cfg.sampler.crop_size;
        let face = BBox::raw(64.0, 64.0, 96.0, 96.0); // size 32, level 3
        let mut sample = synthetic_sample(&cfg, vec![face]);
        sample.attributes[0].invalid = true;
        let t = build_targets(&sample, &p, &cfg);
        // no positives anywhere, but ignores where the region overlaps
        assert_eq!(t.positives(Shot::Second), 0);
        let ignores: usize = t
            .second
            .iter()
            .map(|lvl| {
                lvl.branch_labels[0].iter().filter(|l| **l == AnchorLabel::Ignore).count()
            })
            .sum();
        assert!(ignores > 0);
        // and it is excluded from segmentation
        assert!(t.segmentation.iter().all(|m| m.iter().all(|&v| v == 0.0)));
        let _ = crop;
    }

    #[test]
    fn anchor_free_targets_describe_face_geometry() {
        let cfg = desk();
        let p = build_anchor_pyramid(160, &cfg).unwrap();
        let face = BBox::raw(60.0, 60.0, 100.0, 100.0);
        let t = build_targets(&synthetic_sample(&cfg, vec![face]), &p, &cfg);
        let stride = cfg.network.strides[cfg.network.af_level] as f64;
        let mut n_pos = 0;
        for i in 0..t.af_positive.shape()[0] {
            for j in 0..t.af_positive.shape()[1] {
                if !t.af_positive[[i, j]] {
                    assert_eq!(t.af_objectness[[i, j]], 0.0);
                    continue;
                }
                n_pos += 1;
                let cx = stride * (j as f64 + 0.5);
                let cy = stride * (i as f64 + 0.5);
                // distances reconstruct the face box
                assert_eq!(cx - t.af_distances[[0, i, j]], face.x_min);
                assert_eq!(cy - t.af_distances[[1, i, j]], face.y_min);
                assert_eq!(cx + t.af_distances[[2, i, j]], face.x_max);
                assert_eq!(cy + t.af_distances[[3, i, j]], face.y_max);
                // cell center lies in the shrunk core
                let core = scale_about_center(&face, cfg.network.af_shrink);
                assert!(cx > core.x_min && cx < core.x_max);
                assert!(cy > core.y_min && cy < core.y_max);
            }
        }
        // 0.3-shrunk core of a 40px face is 12px: at stride 1 that is ~144 cells
        assert!(n_pos > 0, "no anchor-free positives");
    }

    #[test]
    fn negative_filter_never_drops_positives() {
        let labels = vec![
            AnchorLabel::Negative,
            AnchorLabel::Positive(0),
            AnchorLabel::Ignore,
            AnchorLabel::Negative,
        ];
        let probs = vec![1.0, 0.999, 1.0, 0.99];
        let mask = negative_filter_mask(&probs, &labels, 0.99);
        assert_eq!(mask, vec![false, true, true, true]);
    }

    #[test]
    fn negative_filter_boundary_is_strict() {
        let labels = vec![AnchorLabel::Negative];
        assert_eq!(negative_filter_mask(&[0.99], &labels, 0.99), vec![true]);
        assert_eq!(negative_filter_mask(&[0.9900001], &labels, 0.99), vec![false]);
    }

    #[test]
    fn negative_filter_excluded_count_monotone_in_threshold() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<AnchorLabel> = (0..500)
            .map(|i| if i % 7 == 0 { AnchorLabel::Positive(0) } else { AnchorLabel::Negative })
            .collect();
        let probs: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();
        let excluded = |t: f64| {
            negative_filter_mask(&probs, &labels, t).iter().filter(|&&r| !r).count()
        };
        let mut prev = usize::MAX;
        for t in [0.0, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0] {
            let e = excluded(t);
            assert!(e <= prev, "excluded count rose from {prev} to {e} at {t}");
            prev = e;
        }
    }
}

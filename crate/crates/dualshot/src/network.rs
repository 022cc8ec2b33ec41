//! The detector graph: a configurable strided backbone, low-level feature
//! pyramid with element-wise *product* fusion, a densely connected context
//! block per level, dual-shot classification/regression heads, a per-level
//! segmentation head, and an anchor-free head.
//!
//! Only the second shot's face-branch classification and regression tensors
//! feed inference; every other head exists purely as training supervision.
//! [`Model::forward_detect`] builds nothing else, which the test suite
//! verifies by walking the produced graph.

use image::RgbImage;
use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::anchors::{build_anchor_pyramid, AnchorPyramid};
use crate::config::{DenseContextConfig, DetectorConfig};
use crate::error::{Error, Result};
use crate::geometry::{decode, nms, BBox, EncodedOffset};
use crate::tensor::{sigmoid, Tensor};

/// Feature tensor plus its pyramid placement.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub level: usize,
    pub stride: u32,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }
}

/// Ordered, named trainable parameters.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    fn register(&mut self, name: String, value: ArrayD<f64>) -> Tensor {
        let t = Tensor::param(value);
        t.set_tag(format!("param.{name}"));
        self.entries.push((name, t.clone()));
        t
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    #[cfg(test)]
    pub(crate) fn _push_for_tests(&mut self, name: String, t: Tensor) {
        self.entries.push((name, t));
    }
}

/// One convolution with xavier-uniform weights and zero bias.
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let fan_out = (out_c * k * k) as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        let n = out_c * in_c * k * k;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        let weight = store.register(
            format!("{name}.weight"),
            ArrayD::from_shape_vec(IxDyn(&[out_c, in_c, k, k]), data).unwrap(),
        );
        let bias = store.register(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_c])));
        ConvLayer { weight, bias, stride, pad: k / 2 }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight, &self.bias, self.stride, self.pad)
    }
}

/// Plain stack of strided 3x3 convolutions, one stage per pyramid level.
pub struct StridedStack {
    stages: Vec<ConvLayer>,
    strides: Vec<u32>,
}

impl StridedStack {
    fn new(cfg: &DetectorConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let mut stages = Vec::new();
        let mut in_c = 3;
        let mut prev_stride = 1;
        for (l, (&stride, &width)) in
            cfg.network.strides.iter().zip(&cfg.network.channels).enumerate()
        {
            let rel = (stride / prev_stride) as usize;
            stages.push(ConvLayer::new(store, &format!("backbone.l{l}"), in_c, width, 3, rel, rng));
            in_c = width;
            prev_stride = stride;
        }
        StridedStack { stages, strides: cfg.network.strides.clone() }
    }

    fn forward(&self, image: &Tensor) -> Vec<FeatureMap> {
        let mut maps = Vec::with_capacity(self.stages.len());
        let mut x = image.clone();
        for (level, stage) in self.stages.iter().enumerate() {
            x = stage.forward(&x).relu();
            x.set_tag(format!("backbone.l{level}"));
            maps.push(FeatureMap { tensor: x.clone(), level, stride: self.strides[level] });
        }
        maps
    }
}

/// Names accepted by the backbone registry.
pub const BACKBONES: &[&str] = &["strided"];

fn build_backbone(
    cfg: &DetectorConfig,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<StridedStack> {
    match cfg.network.backbone.as_str() {
        "strided" => Ok(StridedStack::new(cfg, store, rng)),
        other => Err(Error::InvalidConfig(format!(
            "unknown backbone `{other}` (known: {BACKBONES:?})"
        ))),
    }
}

/// Product-fusion of two adjacent pyramid levels.
pub struct LfpnFuse {
    proj_deep: ConvLayer,
    proj_shallow: ConvLayer,
}

impl LfpnFuse {
    fn new(
        store: &mut ParamStore,
        name: &str,
        deep_c: usize,
        shallow_c: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        LfpnFuse {
            proj_deep: ConvLayer::new(store, &format!("{name}.deep"), deep_c, shallow_c, 1, 1, rng),
            proj_shallow: ConvLayer::new(
                store,
                &format!("{name}.shallow"),
                shallow_c,
                shallow_c,
                1,
                1,
                rng,
            ),
        }
    }

    /// Upsamples `deep` by 2, projects both inputs to the shallow width, and
    /// combines them by element-wise product. `deep` must sit exactly one
    /// level above `shallow`.
    pub fn fuse(&self, deep: &FeatureMap, shallow: &FeatureMap) -> Result<FeatureMap> {
        if deep.stride != shallow.stride * 2 || deep.level != shallow.level + 1 {
            return Err(Error::Shape(format!(
                "fusing non-adjacent levels {} (stride {}) and {} (stride {})",
                deep.level, deep.stride, shallow.level, shallow.stride
            )));
        }
        let up = self.proj_deep.forward(&deep.tensor).upsample_nearest(2);
        let lateral = self.proj_shallow.forward(&shallow.tensor);
        let fused = lateral.mul(&up);
        fused.set_tag(format!("lfpn.l{}", shallow.level));
        Ok(FeatureMap { tensor: fused, level: shallow.level, stride: shallow.stride })
    }
}

/// Densely connected prediction block: stage `l` consumes the concatenation of
/// the block input and all previous stage outputs; the output is a 1x1
/// projection of everything.
pub struct DenseContext {
    stage_convs: Vec<ConvLayer>,
    projection: ConvLayer,
    pub cfg: DenseContextConfig,
}

/// Intermediate tensors of one dense-block forward, for structural tests.
pub struct DenseTrace {
    pub stage_inputs: Vec<Tensor>,
    pub stage_outputs: Vec<Tensor>,
    pub output: Tensor,
}

impl DenseContext {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        cfg: &DenseContextConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut stage_convs = Vec::new();
        for l in 0..cfg.stages {
            let stage_in = in_c + l * cfg.growth_channels;
            stage_convs.push(ConvLayer::new(
                store,
                &format!("{name}.stage{l}"),
                stage_in,
                cfg.growth_channels,
                3,
                1,
                rng,
            ));
        }
        let concat_c = in_c + cfg.stages * cfg.growth_channels;
        let projection = ConvLayer::new(
            store,
            &format!("{name}.proj"),
            concat_c,
            cfg.projection_channels,
            1,
            1,
            rng,
        );
        DenseContext { stage_convs, projection, cfg: cfg.clone() }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_traced(x, None).output
    }

    /// Forward pass that records stage tensors; `zero_stage` replaces that
    /// stage's output with zeros (numeric connectivity ablation).
    pub fn forward_traced(&self, x: &Tensor, zero_stage: Option<usize>) -> DenseTrace {
        let mut feats: Vec<Tensor> = vec![x.clone()];
        let mut stage_inputs = Vec::new();
        let mut stage_outputs = Vec::new();
        for (l, conv) in self.stage_convs.iter().enumerate() {
            let input = if feats.len() == 1 {
                feats[0].clone()
            } else {
                Tensor::concat_channels(&feats)
            };
            stage_inputs.push(input.clone());
            let mut out = conv.forward(&input).relu();
            if zero_stage == Some(l) {
                out = out.scale(0.0);
            }
            stage_outputs.push(out.clone());
            feats.push(out);
        }
        let all = Tensor::concat_channels(&feats);
        let output = self.projection.forward(&all);
        DenseTrace { stage_inputs, stage_outputs, output }
    }
}

/// Per-level heads of one shot: one 2-channel classifier per context branch
/// plus a 4-channel box regressor.
struct ShotLevelHeads {
    cls: Vec<ConvLayer>,
    reg: ConvLayer,
}

impl ShotLevelHeads {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        branches: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cls = (0..branches)
            .map(|b| ConvLayer::new(store, &format!("{name}.cls{b}"), in_c, 2, 3, 1, rng))
            .collect();
        let reg = ConvLayer::new(store, &format!("{name}.reg"), in_c, 4, 3, 1, rng);
        ShotLevelHeads { cls, reg }
    }
}

/// Every tensor the training objective consumes.
pub struct HeadOutputs {
    /// `[branch][level]`, each `[2, H, W]`.
    pub first_cls: Vec<Vec<Tensor>>,
    /// `[level]`, each `[4, H, W]`.
    pub first_reg: Vec<Tensor>,
    pub second_cls: Vec<Vec<Tensor>>,
    pub second_reg: Vec<Tensor>,
    /// `[level]`, each `[1, H, W]`.
    pub seg: Vec<Tensor>,
    pub af_objectness: Tensor,
    pub af_distances: Tensor,
}

/// The full detector.
pub struct Model {
    pub cfg: DetectorConfig,
    pub params: ParamStore,
    backbone: StridedStack,
    lfpn: Vec<LfpnFuse>,
    dense: Vec<DenseContext>,
    first_heads: Vec<ShotLevelHeads>,
    second_heads: Vec<ShotLevelHeads>,
    seg_heads: Vec<ConvLayer>,
    af_obj: ConvLayer,
    af_dist: ConvLayer,
}

impl Model {
    /// Builds a freshly initialized model; all weights come from a stream
    /// seeded with `cfg.seed`.
    pub fn new(cfg: &DetectorConfig) -> Result<Self> {
        use rand::SeedableRng;
        cfg.validate()?;
        let net = &cfg.network;
        for l in 0..net.lfpn_levels {
            if net.strides[l + 1] != net.strides[l] * 2 {
                return Err(Error::InvalidConfig(format!(
                    "pyramid fusion needs stride ratio 2 between levels {l} and {}",
                    l + 1
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::default();
        let backbone = build_backbone(cfg, &mut store, &mut rng)?;

        let mut lfpn = Vec::new();
        for l in 0..net.lfpn_levels {
            // deep input is the already-fused level above when that level is
            // itself fused, otherwise the raw backbone width
            let deep_c = if l + 1 < net.lfpn_levels {
                net.channels[l + 1]
            } else {
                net.channels[l + 1]
            };
            lfpn.push(LfpnFuse::new(
                &mut store,
                &format!("lfpn.l{l}"),
                deep_c,
                net.channels[l],
                &mut rng,
            ));
        }

        let branches = cfg.branches();
        let mut dense = Vec::new();
        let mut second_heads = Vec::new();
        let mut first_heads = Vec::new();
        let mut seg_heads = Vec::new();
        for l in 0..cfg.levels() {
            dense.push(DenseContext::new(
                &mut store,
                &format!("dense.l{l}"),
                net.channels[l],
                &net.dense,
                &mut rng,
            ));
            first_heads.push(ShotLevelHeads::new(
                &mut store,
                &format!("head.first.l{l}"),
                net.channels[l],
                branches,
                &mut rng,
            ));
            second_heads.push(ShotLevelHeads::new(
                &mut store,
                &format!("head.second.l{l}"),
                net.dense.projection_channels,
                branches,
                &mut rng,
            ));
            seg_heads.push(ConvLayer::new(
                &mut store,
                &format!("head.seg.l{l}"),
                net.dense.projection_channels,
                1,
                3,
                1,
                &mut rng,
            ));
        }
        let af_in = net.dense.projection_channels;
        let af_obj = ConvLayer::new(&mut store, "head.af.obj", af_in, 1, 3, 1, &mut rng);
        let af_dist = ConvLayer::new(&mut store, "head.af.dist", af_in, 4, 3, 1, &mut rng);

        Ok(Model {
            cfg: cfg.clone(),
            params: store,
            backbone,
            lfpn,
            dense,
            first_heads,
            second_heads,
            seg_heads,
            af_obj,
            af_dist,
        })
    }

    fn check_input(&self, image: &Array3<f64>) -> Result<()> {
        let (c, h, w) = image.dim();
        let largest = *self.cfg.network.strides.last().unwrap() as usize;
        if c != 3 || h == 0 || w == 0 || h % largest != 0 || w % largest != 0 || h != w {
            return Err(Error::Shape(format!(
                "expected square [3, S, S] input with S divisible by {largest}, got [{c}, {h}, {w}]"
            )));
        }
        Ok(())
    }

    /// Backbone features for a normalized `[3, S, S]` input.
    pub fn backbone_forward(&self, image: &Array3<f64>) -> Result<Vec<FeatureMap>> {
        self.check_input(image)?;
        let x = Tensor::constant(image.clone().into_dyn());
        Ok(self.backbone.forward(&x))
    }

    /// Second-shot feature maps: product-fused pyramid on the lowest levels,
    /// then the dense context block of each level.
    fn second_shot_features(&self, backbone: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        let nl = self.cfg.network.lfpn_levels;
        let mut base: Vec<Option<FeatureMap>> = backbone.iter().map(|m| Some(m.clone())).collect();
        // top-down pass over the fused range
        for l in (0..nl).rev() {
            let deep = base[l + 1].clone().unwrap();
            let shallow = backbone[l].clone();
            base[l] = Some(self.lfpn[l].fuse(&deep, &shallow)?);
        }
        Ok(base
            .into_iter()
            .enumerate()
            .map(|(l, m)| {
                let m = m.unwrap();
                let out = self.dense[l].forward(&m.tensor);
                out.set_tag(format!("dense.l{l}"));
                FeatureMap { tensor: out, level: l, stride: m.stride }
            })
            .collect())
    }

    /// Full training forward pass, emitting every head tensor.
    pub fn forward(&self, image: &Array3<f64>) -> Result<HeadOutputs> {
        let backbone = self.backbone_forward(image)?;
        let second = self.second_shot_features(&backbone)?;
        let branches = self.cfg.branches();

        let mut first_cls: Vec<Vec<Tensor>> = vec![Vec::new(); branches];
        let mut first_reg = Vec::new();
        for (l, feat) in backbone.iter().enumerate() {
            for (b, conv) in self.first_heads[l].cls.iter().enumerate() {
                let t = conv.forward(&feat.tensor);
                t.set_tag(format!("first.cls.b{b}.l{l}"));
                first_cls[b].push(t);
            }
            let r = self.first_heads[l].reg.forward(&feat.tensor);
            r.set_tag(format!("first.reg.l{l}"));
            first_reg.push(r);
        }

        let mut second_cls: Vec<Vec<Tensor>> = vec![Vec::new(); branches];
        let mut second_reg = Vec::new();
        let mut seg = Vec::new();
        for (l, feat) in second.iter().enumerate() {
            for (b, conv) in self.second_heads[l].cls.iter().enumerate() {
                let t = conv.forward(&feat.tensor);
                t.set_tag(format!("second.cls.b{b}.l{l}"));
                second_cls[b].push(t);
            }
            let r = self.second_heads[l].reg.forward(&feat.tensor);
            r.set_tag(format!("second.reg.l{l}"));
            second_reg.push(r);
            let s = self.seg_heads[l].forward(&feat.tensor);
            s.set_tag(format!("seg.l{l}"));
            seg.push(s);
        }

        let af_feat = &second[self.cfg.network.af_level].tensor;
        let af_objectness = self.af_obj.forward(af_feat);
        af_objectness.set_tag("af.obj");
        let af_distances = self.af_dist.forward(af_feat).softplus();
        af_distances.set_tag("af.dist");

        Ok(HeadOutputs {
            first_cls,
            first_reg,
            second_cls,
            second_reg,
            seg,
            af_objectness,
            af_distances,
        })
    }

    /// Inference forward pass: builds only the second-shot face branch.
    /// Returns `(face_cls, reg)` per level.
    pub fn forward_detect(&self, image: &Array3<f64>) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let backbone = self.backbone_forward(image)?;
        let second = self.second_shot_features(&backbone)?;
        let mut cls = Vec::new();
        let mut reg = Vec::new();
        for (l, feat) in second.iter().enumerate() {
            let t = self.second_heads[l].cls[0].forward(&feat.tensor);
            t.set_tag(format!("second.cls.b0.l{l}"));
            cls.push(t);
            let r = self.second_heads[l].reg.forward(&feat.tensor);
            r.set_tag(format!("second.reg.l{l}"));
            reg.push(r);
        }
        Ok((cls, reg))
    }

    /// Detects faces in an arbitrary RGB image: pads to stride divisibility,
    /// decodes the second-shot face branch, clamps to the original bounds and
    /// applies greedy suppression.
    pub fn detect(&self, image: &RgbImage) -> Result<Vec<(BBox, f64)>> {
        let (w, h) = image.dimensions();
        let largest = *self.cfg.network.strides.last().unwrap();
        let side = w.max(h).max(largest).div_ceil(largest) * largest;
        let input = normalize_image(image, side, &self.cfg);
        let (cls, reg) = self.forward_detect(&input)?;
        let pyramid = build_anchor_pyramid(side, &self.cfg)?;
        let candidates =
            decode_detections(&cls, &reg, &pyramid, &self.cfg, w as f64, h as f64);
        Ok(nms(&candidates, self.cfg.eval.nms_iou, self.cfg.eval.max_detections))
    }
}

/// Converts an image to a normalized `[3, side, side]` tensor, zero-padding
/// the right/bottom margins.
pub fn normalize_image(image: &RgbImage, side: u32, cfg: &DetectorConfig) -> Array3<f64> {
    let mean = cfg.network.normalize_mean;
    let std = cfg.network.normalize_std;
    let mut out = Array3::zeros((3, side as usize, side as usize));
    for c in 0..3 {
        let pad = (0.0 - mean[c]) / std[c];
        out.index_axis_mut(ndarray::Axis(0), c).fill(pad);
    }
    for (x, y, px) in image.enumerate_pixels() {
        if x >= side || y >= side {
            continue;
        }
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = (px[c] as f64 / 255.0 - mean[c]) / std[c];
        }
    }
    out
}

/// Decodes per-level face logits + offsets against the second-shot grids.
pub fn decode_detections(
    cls: &[Tensor],
    reg: &[Tensor],
    pyramid: &AnchorPyramid,
    cfg: &DetectorConfig,
    clamp_w: f64,
    clamp_h: f64,
) -> Vec<(BBox, f64)> {
    let mut out = Vec::new();
    for (level, grid) in pyramid.second.iter().enumerate() {
        let c = cls[level].value();
        let r = reg[level].value();
        for i in 0..grid.height {
            for j in 0..grid.width {
                let score = sigmoid(c[[1, i, j]] - c[[0, i, j]]);
                if !score.is_finite() || score < cfg.eval.score_threshold {
                    continue;
                }
                let off = EncodedOffset {
                    dx: r[[0, i, j]],
                    dy: r[[1, i, j]],
                    dw: r[[2, i, j]],
                    dh: r[[3, i, j]],
                };
                let anchor = &grid.boxes[i * grid.width + j];
                let b = decode(&off, anchor, cfg.variances).clamp_to(clamp_w, clamp_h);
                if b.area() > 0.0 {
                    out.push((b, score));
                }
            }
        }
    }
    out
}

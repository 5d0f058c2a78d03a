//! Two-stage detector: convolutional backbone, region proposal network,
//! RoIAlign, fully connected RoI head and class/box predict head.

pub mod boxes;
mod checkpoint;

use std::fmt;

use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

use crate::autograd::{roi_align_plan, Float, Graph, ParamId, ParamStore, Var};
use crate::dataset::ClassId;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::Raster;
use crate::rng::Rng;
use boxes::{clip, grid_anchors, nms, BoxCoder, Corners};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorSize {
    #[default]
    Tiny,
    Full,
}

impl fmt::Display for DetectorSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectorSize::Tiny => "tiny",
            DetectorSize::Full => "full",
        })
    }
}

impl std::str::FromStr for DetectorSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tiny" => Ok(DetectorSize::Tiny),
            "full" => Ok(DetectorSize::Full),
            _ => Err(Error::Config(format!(
                "unknown detector size {s:?} (expected tiny|full)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub size: DetectorSize,
    /// Output channels and stride of each 3x3 backbone convolution.
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub rpn_channels: usize,
    pub anchor_sizes: Vec<f64>,
    /// Height over width.
    pub anchor_ratios: Vec<f64>,
    pub pre_nms_top_n: usize,
    pub post_nms_top_n_train: usize,
    pub post_nms_top_n_test: usize,
    pub nms_threshold: f64,
    pub min_proposal_size: f64,
    pub pooled: usize,
    pub sampling_ratio: usize,
    /// Widths of the RoI-head layers; the last one is the feature width d.
    pub fc_dims: Vec<usize>,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    pub roi_batch: usize,
    pub roi_positive_fraction: f64,
    pub roi_fg_iou: f64,
    pub score_threshold: f64,
    pub detection_nms: f64,
    pub max_detections: usize,
    pub pixel_mean: [f32; 3],
    pub pixel_std: [f32; 3],
    /// Standard deviation of new class-score rows; box rows use a tenth.
    pub head_init_std: f64,
}

impl DetectorConfig {
    pub fn tiny() -> Self {
        DetectorConfig {
            size: DetectorSize::Tiny,
            backbone_channels: vec![16, 32, 64, 64],
            backbone_strides: vec![2, 2, 2, 1],
            rpn_channels: 64,
            anchor_sizes: vec![16.0, 24.0, 32.0],
            anchor_ratios: vec![1.0],
            pre_nms_top_n: 300,
            post_nms_top_n_train: 100,
            post_nms_top_n_test: 50,
            nms_threshold: 0.7,
            min_proposal_size: 1.0,
            pooled: 7,
            sampling_ratio: 2,
            fc_dims: vec![256, 256],
            rpn_batch: 128,
            rpn_positive_fraction: 0.5,
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            roi_batch: 64,
            roi_positive_fraction: 0.25,
            roi_fg_iou: 0.5,
            score_threshold: 0.05,
            detection_nms: 0.5,
            max_detections: 100,
            pixel_mean: [123.675, 116.28, 103.53],
            pixel_std: [58.395, 57.12, 57.375],
            head_init_std: 0.01,
        }
    }

    pub fn full() -> Self {
        DetectorConfig {
            size: DetectorSize::Full,
            backbone_channels: vec![64, 128, 256, 512, 512],
            backbone_strides: vec![2, 2, 2, 2, 1],
            rpn_channels: 512,
            anchor_sizes: vec![32.0, 64.0, 128.0, 256.0, 512.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            pre_nms_top_n: 6000,
            post_nms_top_n_train: 2000,
            post_nms_top_n_test: 300,
            rpn_batch: 256,
            roi_batch: 512,
            fc_dims: vec![1024, 1024],
            ..DetectorConfig::tiny()
        }
    }

    pub fn for_size(size: DetectorSize) -> Self {
        match size {
            DetectorSize::Tiny => Self::tiny(),
            DetectorSize::Full => Self::full(),
        }
    }

    pub fn stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    /// RoI feature width.
    pub fn d(&self) -> usize {
        *self.fc_dims.last().expect("validated")
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().expect("validated")
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("detector config: {m}")));
        if self.backbone_channels.is_empty() || self.backbone_channels.len() != self.backbone_strides.len() {
            return bad("backbone_channels and backbone_strides must be non-empty and equally long");
        }
        if self.backbone_strides.iter().any(|&s| s == 0 || s > 2) {
            return bad("backbone strides must be 1 or 2");
        }
        if self.fc_dims.is_empty() || self.fc_dims.contains(&0) {
            return bad("fc_dims must be non-empty and positive");
        }
        if self.anchor_sizes.is_empty() || self.anchor_ratios.is_empty() {
            return bad("anchor sizes and ratios must be non-empty");
        }
        if self.pooled == 0 || self.sampling_ratio == 0 {
            return bad("pooled and sampling_ratio must be positive");
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) || !(0.0..=1.0).contains(&self.detection_nms) {
            return bad("nms thresholds must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn rpn_coder(&self) -> BoxCoder {
        BoxCoder::new([1.0, 1.0, 1.0, 1.0])
    }

    pub fn roi_coder(&self) -> BoxCoder {
        BoxCoder::new([10.0, 10.0, 5.0, 5.0])
    }
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

impl Linear {
    fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: Corners,
    /// Objectness probability.
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: ClassId,
    pub score: f64,
    pub bbox: BBox,
}

/// Parameter handles of one detector inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub backbone: Vec<Conv>,
    pub rpn_conv: Conv,
    pub rpn_cls: Conv,
    pub rpn_bbox: Conv,
    pub roi_head: Vec<Linear>,
    pub cls_score: Linear,
    pub bbox_pred: Linear,
    num_classes: usize,
}

fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> ArrayD<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng) as f32)
}

impl Detector {
    /// Registers freshly initialised parameters for `num_classes` foreground
    /// classes.
    pub fn init(
        config: DetectorConfig,
        num_classes: usize,
        store: &mut ParamStore<f32>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("detector needs at least one class".into()));
        }
        let mut conv = |store: &mut ParamStore<f32>,
                        name: &str,
                        cin: usize,
                        cout: usize,
                        k: usize,
                        stride: usize,
                        std: Option<f64>| {
            let fan_in = (cin * k * k) as f64;
            let std = std.unwrap_or((2.0 / fan_in).sqrt());
            let weight = store.add(format!("{name}.weight"), normal(rng, &[cout, cin, k, k], std))?;
            let bias = store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])))?;
            Ok::<_, Error>(Conv {
                weight,
                bias,
                stride,
                pad: k / 2,
            })
        };
        let mut backbone = Vec::new();
        let mut cin = 3;
        for (i, (&cout, &stride)) in config
            .backbone_channels
            .iter()
            .zip(&config.backbone_strides)
            .enumerate()
        {
            backbone.push(conv(store, &format!("backbone.conv{i}"), cin, cout, 3, stride, None)?);
            cin = cout;
        }
        let a = config.anchors_per_cell();
        let rpn_conv = conv(store, "rpn.conv", cin, config.rpn_channels, 3, 1, Some(0.01))?;
        let rpn_cls = conv(store, "rpn.cls", config.rpn_channels, a, 1, 1, Some(0.01))?;
        let rpn_bbox = conv(store, "rpn.bbox", config.rpn_channels, 4 * a, 1, 1, Some(0.01))?;

        let mut linear = |store: &mut ParamStore<f32>, name: &str, fin: usize, fout: usize, std: Option<f64>| {
            let std = std.unwrap_or((2.0 / fin as f64).sqrt());
            let weight = store.add(format!("{name}.weight"), normal(rng, &[fout, fin], std))?;
            let bias = store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[fout])))?;
            Ok::<_, Error>(Linear { weight, bias })
        };
        let mut fin = config.feature_channels() * config.pooled * config.pooled;
        let mut roi_head = Vec::new();
        for (i, &fout) in config.fc_dims.iter().enumerate() {
            roi_head.push(linear(store, &format!("roi_head.fc{i}"), fin, fout, None)?);
            fin = fout;
        }
        let std = config.head_init_std;
        let cls_score = linear(store, "predict.cls", fin, num_classes + 1, Some(std))?;
        let bbox_pred = linear(store, "predict.bbox", fin, 4 * num_classes, Some(std / 10.0))?;
        Ok(Detector {
            config,
            backbone,
            rpn_conv,
            rpn_cls,
            rpn_bbox,
            roi_head,
            cls_score,
            bbox_pred,
            num_classes,
        })
    }

    /// Re-attaches to parameters previously registered by [`Detector::init`].
    pub fn bind(config: DetectorConfig, store: &ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        let id = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let conv = |name: &str, stride: usize| -> Result<Conv> {
            let weight = id(format!("{name}.weight"))?;
            let k = store.value(weight).shape()[2];
            Ok(Conv {
                weight,
                bias: id(format!("{name}.bias"))?,
                stride,
                pad: k / 2,
            })
        };
        let linear = |name: &str| -> Result<Linear> {
            Ok(Linear {
                weight: id(format!("{name}.weight"))?,
                bias: id(format!("{name}.bias"))?,
            })
        };
        let backbone = config
            .backbone_strides
            .iter()
            .enumerate()
            .map(|(i, &s)| conv(&format!("backbone.conv{i}"), s))
            .collect::<Result<Vec<_>>>()?;
        let roi_head = (0..config.fc_dims.len())
            .map(|i| linear(&format!("roi_head.fc{i}")))
            .collect::<Result<Vec<_>>>()?;
        let cls_score = linear("predict.cls")?;
        let num_classes = store.value(cls_score.weight).shape()[0] - 1;
        let det = Detector {
            rpn_conv: conv("rpn.conv", 1)?,
            rpn_cls: conv("rpn.cls", 1)?,
            rpn_bbox: conv("rpn.bbox", 1)?,
            bbox_pred: linear("predict.bbox")?,
            config,
            backbone,
            roi_head,
            cls_score,
            num_classes,
        };
        det.check_shapes(store)?;
        Ok(det)
    }

    fn check_shapes(&self, store: &ParamStore<f32>) -> Result<()> {
        let mut cin = 3;
        for (conv, &cout) in self.backbone.iter().zip(&self.config.backbone_channels) {
            if store.value(conv.weight).shape() != [cout, cin, 3, 3] {
                return Err(Error::Checkpoint(format!(
                    "{} has unexpected shape",
                    store.get(conv.weight).name
                )));
            }
            cin = cout;
        }
        let d = self.config.d();
        if store.value(self.cls_score.weight).shape() != [self.num_classes + 1, d]
            || store.value(self.bbox_pred.weight).shape() != [4 * self.num_classes, d]
        {
            return Err(Error::Checkpoint(
                "predict head does not match the feature width".into(),
            ));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Every parameter of the detector, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for c in self
            .backbone
            .iter()
            .chain([&self.rpn_conv, &self.rpn_cls, &self.rpn_bbox])
        {
            ids.extend([c.weight, c.bias]);
        }
        for l in self.roi_head.iter().chain([&self.cls_score, &self.bbox_pred]) {
            ids.extend([l.weight, l.bias]);
        }
        ids
    }

    /// Parameters of the backbone and the RoI head, the ones support
    /// encoding shares.
    pub fn shared_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for c in &self.backbone {
            ids.extend([c.weight, c.bias]);
        }
        for l in &self.roi_head {
            ids.extend([l.weight, l.bias]);
        }
        ids
    }

    /// Normalised `1 x 3 x H x W` tensor.
    pub fn preprocess<T: Float>(&self, image: &Raster) -> Result<ArrayD<T>> {
        if image.channels() != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {}", image.channels())));
        }
        let (h, w) = (image.height(), image.width());
        let mut out = ArrayD::zeros(IxDyn(&[1, 3, h, w]));
        let dst = out.as_slice_mut().expect("fresh array");
        for c in 0..3 {
            let (m, s) = (self.config.pixel_mean[c], self.config.pixel_std[c]);
            for (d, &v) in dst[c * h * w..(c + 1) * h * w].iter_mut().zip(image.plane(c)) {
                *d = T::from_f32((v - m) / s).expect("finite");
            }
        }
        Ok(out)
    }

    /// Feature map of stride [`DetectorConfig::stride`];
    /// `ceil(H / stride) x ceil(W / stride)`.
    pub fn backbone_forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        let stride = self.config.stride();
        match g.shape(image) {
            &[_, 3, h, w] if h >= stride && w >= stride => {}
            s => {
                return Err(Error::shape(format!(
                    "image {s:?} is smaller than the backbone stride {stride}"
                )))
            }
        }
        let mut x = image;
        for conv in &self.backbone {
            x = conv.forward(g, store, x)?;
            x = g.relu(x);
        }
        Ok(x)
    }

    /// Objectness logits `1 x A x h x w` and deltas `1 x 4A x h x w`.
    pub fn rpn_head<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feat: Var) -> Result<(Var, Var)> {
        let x = self.rpn_conv.forward(g, store, feat)?;
        let x = g.relu(x);
        Ok((self.rpn_cls.forward(g, store, x)?, self.rpn_bbox.forward(g, store, x)?))
    }

    pub fn anchors(&self, feat_h: usize, feat_w: usize) -> Vec<Corners> {
        grid_anchors(
            feat_h,
            feat_w,
            self.config.stride(),
            &self.config.anchor_sizes,
            &self.config.anchor_ratios,
        )
    }

    /// Decodes, clips, ranks and suppresses RPN outputs.
    pub fn propose<T: Float>(
        &self,
        objectness: &ArrayD<T>,
        deltas: &ArrayD<T>,
        image_w: usize,
        image_h: usize,
        training: bool,
    ) -> Vec<Proposal> {
        let (a, fh, fw) = match objectness.shape() {
            &[1, a, h, w] => (a, h, w),
            _ => return Vec::new(),
        };
        let anchors = self.anchors(fh, fw);
        let obj = objectness.as_slice().expect("layout");
        let del = deltas.as_slice().expect("layout");
        let coder = self.config.rpn_coder();
        let mut cand: Vec<(Corners, f64)> = Vec::with_capacity(anchors.len());
        for (i, anchor) in anchors.iter().enumerate() {
            let [li, _] = rpn_index(i, a, fh, fw);
            let d = rpn_delta_indices(i, a, fh, fw).map(|j| del[j].to_f64().expect("finite"));
            let b = clip(&coder.decode(anchor, d), image_w as f64, image_h as f64);
            let min = self.config.min_proposal_size;
            if b[2] - b[0] >= min && b[3] - b[1] >= min {
                cand.push((b, crate::autograd::sigmoid(obj[li]).to_f64().expect("finite")));
            }
        }
        let mut order: Vec<usize> = (0..cand.len()).collect();
        order.sort_by(|&x, &y| cand[y].1.total_cmp(&cand[x].1).then(x.cmp(&y)));
        order.truncate(self.config.pre_nms_top_n);
        let boxes: Vec<Corners> = order.iter().map(|&i| cand[i].0).collect();
        let scores: Vec<f64> = order.iter().map(|&i| cand[i].1).collect();
        let limit = if training {
            self.config.post_nms_top_n_train
        } else {
            self.config.post_nms_top_n_test
        };
        nms(&boxes, &scores, self.config.nms_threshold)
            .into_iter()
            .take(limit)
            .map(|i| Proposal {
                bbox: boxes[i],
                score: scores[i],
            })
            .collect()
    }

    /// RoIAlign of boxes given in image coordinates: `R x C x P x P`.
    pub fn roi_align<T: Float>(&self, g: &mut Graph<T>, feat: Var, rois: &[Corners]) -> Result<Var> {
        if let Some(r) = rois.iter().find(|r| !(r[2] > r[0] && r[3] > r[1])) {
            return Err(Error::InvalidBox(format!("degenerate RoI {r:?}")));
        }
        let (fh, fw) = match g.shape(feat) {
            &[1, _, h, w] => (h, w),
            s => return Err(Error::shape(format!("roi_align features {s:?}"))),
        };
        let plan = roi_align_plan(
            rois,
            fh,
            fw,
            self.config.pooled,
            1.0 / self.config.stride() as f64,
            self.config.sampling_ratio,
        );
        g.roi_align(feat, plan)
    }

    /// Fully connected RoI head on pooled `N x C x P x P` tensors: `N x d`.
    pub fn roi_head_forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pooled: Var) -> Result<Var> {
        let shape = g.shape(pooled).to_vec();
        let p = self.config.pooled;
        let expected = [self.config.feature_channels(), p, p];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::shape(format!(
                "roi head input {shape:?}, expected N x {expected:?}"
            )));
        }
        let mut x = g.reshape(pooled, &[shape[0], shape[1] * p * p])?;
        for layer in &self.roi_head {
            x = layer.forward(g, store, x)?;
            x = g.relu(x);
        }
        Ok(x)
    }

    /// Class logits `N x (K+1)` and class-specific deltas `N x 4K`.
    pub fn predict_head<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<(Var, Var)> {
        match g.shape(features) {
            &[_, d] if d == self.config.d() => {}
            s => return Err(Error::shape(format!("predict head input {s:?}"))),
        }
        Ok((
            self.cls_score.forward(g, store, features)?,
            self.bbox_pred.forward(g, store, features)?,
        ))
    }

    /// Grows the predict head to `new_count` foreground classes. Existing
    /// rows are kept bit for bit; new score rows are drawn from
    /// `N(0, head_init_std^2)`, new box rows from `N(0, (head_init_std/10)^2)`,
    /// and new biases are zero.
    pub fn expand_predict_head(&mut self, store: &mut ParamStore<f32>, new_count: usize, rng: &mut Rng) -> Result<()> {
        if new_count <= self.num_classes {
            return Err(Error::Config(format!(
                "cannot expand predict head from {} to {new_count} classes",
                self.num_classes
            )));
        }
        let d = self.config.d();
        let extra = new_count - self.num_classes;
        let std = self.config.head_init_std;
        let grow = |store: &mut ParamStore<f32>, layer: Linear, rows: usize, std: f64, rng: &mut Rng| {
            let w = store.value(layer.weight);
            let fresh = normal(rng, &[rows, d], std);
            let w = ndarray::concatenate(ndarray::Axis(0), &[w.view(), fresh.view()]).expect("same width");
            store.replace(layer.weight, w);
            let b = store.value(layer.bias);
            let zeros = ArrayD::<f32>::zeros(IxDyn(&[rows]));
            let b = ndarray::concatenate(ndarray::Axis(0), &[b.view(), zeros.view()]).expect("vector");
            store.replace(layer.bias, b);
        };
        grow(store, self.cls_score, extra, std, rng);
        grow(store, self.bbox_pred, 4 * extra, std / 10.0, rng);
        self.num_classes = new_count;
        Ok(())
    }
}

/// Flat indices of anchor `i`'s objectness logit and its four deltas in the
/// `1 x A x h x w` / `1 x 4A x h x w` RPN outputs.
pub fn rpn_index(i: usize, a: usize, h: usize, w: usize) -> [usize; 2] {
    let cell = i / a;
    let k = i % a;
    let plane = h * w;
    [k * plane + cell, 4 * k * plane + cell]
}

/// Flat indices of the four deltas of anchor `i`.
pub fn rpn_delta_indices(i: usize, a: usize, h: usize, w: usize) -> [usize; 4] {
    let [_, base] = rpn_index(i, a, h, w);
    let plane = h * w;
    [base, base + plane, base + 2 * plane, base + 3 * plane]
}

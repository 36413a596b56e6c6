//! One-stage anchor-free detection head: shared conv tower, center-sampling
//! target assignment, focal + IoU losses, decoding and NMS.
//!
//! A location `(iy, ix)` on a level with stride `s` sits at pixel
//! `(ix · s, iy · s)`. Box regression predicts the four distances
//! `(l, t, r, b)` from the location to the box edges, in stride units, made
//! positive by an exponential.

use std::cmp::Ordering;

use crate::boxes::{iou, BBox, Detection};
use crate::error::{shape_err, Error, Result};
use crate::neck::NeckOutput;
use crate::nn::Conv2d;
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Initial positive probability of the classifier.
const PRIOR_PROB: f64 = 0.01;

/// Upper edges of the sqrt-area bands assigned to strides 4, 8 and 16; the
/// stride-32 band is open-ended.
pub const SCALE_BANDS: [f64; 3] = [16.0, 32.0, 64.0];

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub num_convs: usize,
    /// Center-sampling radius in strides.
    pub center_radius: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_convs: 2,
            center_radius: 1.5,
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            seed: 3,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("score_threshold", self.score_threshold), ("nms_iou", self.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("head.{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.center_radius <= 0.0 {
            return Err(Error::Config("head.center_radius must be positive".into()));
        }
        Ok(())
    }
}

/// Head outputs for one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelOutput {
    /// `(B, 1, h, w)` logits.
    pub cls_logits: Var,
    /// `(B, 4, h, w)` positive `(l, t, r, b)` distances in stride units.
    pub box_reg: Var,
    pub stride: usize,
}

/// Owned copy of a level's predictions, detached from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPrediction<T> {
    pub cls_logits: Tensor<T>,
    pub box_reg: Tensor<T>,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub config: HeadConfig,
    tower: Vec<Conv2d>,
    cls: Conv2d,
    reg: Conv2d,
}

impl Head {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &HeadConfig, channels: usize) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let tower = (0..config.num_convs)
            .map(|i| Conv2d::same3(store, &format!("head.tower{i}"), channels, channels, seed))
            .collect::<Result<_>>()?;
        let cls = Conv2d::same3(store, "head.cls", channels, 1, seed)?;
        let reg = Conv2d::same3(store, "head.reg", channels, 4, seed)?;
        if let Some(b) = cls.bias {
            let prior = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
            store.get_mut(b).value.fill(T::lit(prior));
        }
        if let Some(b) = reg.bias {
            store.get_mut(b).value.fill(T::zero());
        }
        Ok(Self {
            config: config.clone(),
            tower,
            cls,
            reg,
        })
    }

    /// Applies the shared tower and predictors to every neck level.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        neck_out: &NeckOutput,
    ) -> Result<Vec<LevelOutput>> {
        neck_out
            .levels
            .iter()
            .zip(&neck_out.strides)
            .map(|(&x, &stride)| {
                let mut h = x;
                for conv in &self.tower {
                    let y = conv.forward(tape, store, h)?;
                    h = tape.relu(y);
                }
                let cls_logits = self.cls.forward(tape, store, h)?;
                let raw = self.reg.forward(tape, store, h)?;
                let box_reg = tape.exp(raw);
                Ok(LevelOutput {
                    cls_logits,
                    box_reg,
                    stride,
                })
            })
            .collect()
    }

    pub fn predictions<T: Scalar>(tape: &Tape<T>, outputs: &[LevelOutput]) -> Vec<LevelPrediction<T>> {
        outputs
            .iter()
            .map(|o| LevelPrediction {
                cls_logits: tape.value(o.cls_logits).clone(),
                box_reg: tape.value(o.box_reg).clone(),
                stride: o.stride,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tower
            .iter()
            .chain([&self.cls, &self.reg])
            .map(Conv2d::param_count)
            .sum()
    }
}

/// A positive location with its regression target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub y: usize,
    pub x: usize,
    /// `(l, t, r, b)` in stride units, all strictly positive.
    pub ltrb: [f64; 4],
    /// Index of the assigned ground truth.
    pub gt: usize,
}

/// Assignment for one image on one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width` positive flags.
    pub labels: Vec<bool>,
    pub positives: Vec<Positive>,
}

impl LevelTargets {
    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }
}

/// Pyramid level index (0..=3) whose sqrt-area band contains the box.
pub fn scale_band_level(b: &BBox) -> usize {
    let s = b.area().sqrt();
    SCALE_BANDS.iter().position(|&hi| s < hi).unwrap_or(SCALE_BANDS.len())
}

/// Distances from the location at pixel `(px, py)` to the box edges, in
/// units of `stride`.
pub fn encode_box(b: &BBox, px: f64, py: f64, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    [(px - b.x1) / s, (py - b.y1) / s, (b.x2 - px) / s, (b.y2 - py) / s]
}

/// Inverse of [`encode_box`].
pub fn decode_box(ltrb: [f64; 4], px: f64, py: f64, stride: usize) -> BBox {
    let s = stride as f64;
    BBox {
        x1: px - ltrb[0] * s,
        y1: py - ltrb[1] * s,
        x2: px + ltrb[2] * s,
        y2: py + ltrb[3] * s,
    }
}

/// Center-sampling assignment for one image of size `image_h × image_w`.
///
/// A location on level `i` is positive for a ground truth when the box's
/// sqrt-area falls in that level's band, the location is within
/// `center_radius · stride` of the box center along both axes, and it lies
/// strictly inside the box. Contested locations go to the smallest box.
pub fn assign_targets(
    gts: &[BBox],
    strides: &[usize],
    image_h: usize,
    image_w: usize,
    config: &HeadConfig,
) -> Vec<LevelTargets> {
    strides
        .iter()
        .enumerate()
        .map(|(level, &stride)| {
            let (h, w) = (image_h / stride, image_w / stride);
            let mut owner: Vec<Option<usize>> = vec![None; h * w];
            let radius = config.center_radius * stride as f64;
            for (g, b) in gts.iter().enumerate() {
                if scale_band_level(b).min(strides.len() - 1) != level {
                    continue;
                }
                let (cx, cy) = b.center();
                for iy in 0..h {
                    let py = (iy * stride) as f64;
                    if (py - cy).abs() > radius || py <= b.y1 || py >= b.y2 {
                        continue;
                    }
                    for ix in 0..w {
                        let px = (ix * stride) as f64;
                        if (px - cx).abs() > radius || px <= b.x1 || px >= b.x2 {
                            continue;
                        }
                        let slot = &mut owner[iy * w + ix];
                        let better = match *slot {
                            None => true,
                            Some(prev) => b.area() < gts[prev].area(),
                        };
                        if better {
                            *slot = Some(g);
                        }
                    }
                }
            }
            let mut positives = Vec::new();
            let labels = owner
                .iter()
                .enumerate()
                .map(|(i, o)| {
                    if let Some(g) = *o {
                        let (y, x) = (i / w, i % w);
                        let ltrb = encode_box(&gts[g], (x * stride) as f64, (y * stride) as f64, stride);
                        positives.push(Positive { y, x, ltrb, gt: g });
                    }
                    o.is_some()
                })
                .collect();
            LevelTargets {
                stride,
                height: h,
                width: w,
                labels,
                positives,
            }
        })
        .collect()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Focal loss of one logit and its derivative.
pub fn focal_term(z: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let q = 1.0 - p;
    if positive {
        // -alpha q^gamma ln p
        let ln_p = -softplus(-z);
        let value = -alpha * q.powf(gamma) * ln_p;
        let grad = alpha * q.powf(gamma) * (gamma * p * ln_p - q);
        (value, grad)
    } else {
        // -(1 - alpha) p^gamma ln q
        let ln_q = -softplus(z);
        let value = -(1.0 - alpha) * p.powf(gamma) * ln_q;
        let grad = (1.0 - alpha) * p.powf(gamma) * (p - gamma * q * ln_q);
        (value, grad)
    }
}

/// `Σ_b weight_b Σ_locations focal(logit, label)` over a `(B, 1, h, w)` logit
/// map; `labels` is `B · h · w` long.
pub fn focal_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[bool], item_weights: &[f64]) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.channels() != 1 || labels.len() != shape.numel() || item_weights.len() != shape.batch() {
        return Err(shape_err(
            "focal_loss",
            format!(
                "logits {shape}, {} labels, {} item weights",
                labels.len(),
                item_weights.len()
            ),
        ));
    }
    let per = shape.plane();
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(labels.len());
    for (i, (&z, &y)) in tape.value(logits).data().iter().zip(labels).enumerate() {
        let w = item_weights[i / per];
        let (v, g) = focal_term(z.as_f64(), y, FOCAL_ALPHA, FOCAL_GAMMA);
        total += w * v;
        grad.push(T::lit(w * g));
    }
    let local = Tensor::from_vec(shape, grad)?;
    tape.fused_scalar(logits, T::lit(total), local)
}

/// A positive location of batch item `batch` on one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegTarget {
    pub batch: usize,
    pub y: usize,
    pub x: usize,
    pub ltrb: [f64; 4],
}

/// `-ln IoU` between predicted and target distance boxes anchored at the
/// same location, and its gradient with respect to the prediction.
pub fn iou_term(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let [l, t, r, b] = pred;
    let [lt, tt, rt, bt] = target;
    let wi = l.min(lt) + r.min(rt);
    let hi = t.min(tt) + b.min(bt);
    let inter = wi * hi;
    let area_p = (l + r) * (t + b);
    let area_t = (lt + rt) * (tt + bt);
    let union = area_p + area_t - inter;
    let value = union.ln() - inter.ln();
    // d inter / d pred: width terms scale with hi, height terms with wi.
    let di = [
        if l < lt { hi } else { 0.0 },
        if t < tt { wi } else { 0.0 },
        if r < rt { hi } else { 0.0 },
        if b < bt { wi } else { 0.0 },
    ];
    let dap = [t + b, l + r, t + b, l + r];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = -di[k] / inter + (dap[k] - di[k]) / union;
    }
    (value, grad)
}

/// `Σ weight_b · (-ln IoU)` over positives of a `(B, 4, h, w)` distance map.
pub fn iou_loss<T: Scalar>(tape: &mut Tape<T>, reg: Var, targets: &[RegTarget], item_weights: &[f64]) -> Result<Var> {
    let shape = tape.shape(reg);
    if shape.channels() != 4 || item_weights.len() != shape.batch() {
        return Err(shape_err(
            "iou_loss",
            format!("regression {shape} with {} item weights", item_weights.len()),
        ));
    }
    let value = tape.value(reg);
    let mut local = Tensor::zeros(shape);
    let mut total = 0.0;
    for tgt in targets {
        if tgt.batch >= shape.batch() || tgt.y >= shape.height() || tgt.x >= shape.width() {
            return Err(shape_err("iou_loss", format!("target location out of range for {shape}")));
        }
        let pred: [f64; 4] = std::array::from_fn(|k| value.get(tgt.batch, k, tgt.y, tgt.x).as_f64());
        let (v, g) = iou_term(pred, tgt.ltrb);
        let w = item_weights[tgt.batch];
        total += w * v;
        for (k, gk) in g.iter().enumerate() {
            let cur = local.get(tgt.batch, k, tgt.y, tgt.x);
            local.set(tgt.batch, k, tgt.y, tgt.x, cur + T::lit(w * gk));
        }
    }
    tape.fused_scalar(reg, T::lit(total), local)
}

/// Focal classification loss over all locations plus IoU loss over positives,
/// each image normalized by its positive count (at least 1), averaged over
/// the batch. `targets[b]` is the per-level assignment of batch item `b`.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &[LevelOutput],
    targets: &[Vec<LevelTargets>],
) -> Result<Var> {
    let batch = targets.len();
    if batch == 0 || outputs.is_empty() {
        return Err(shape_err("detection_loss", "empty batch or no head outputs"));
    }
    let weights: Vec<f64> = targets
        .iter()
        .map(|levels| {
            let npos: usize = levels.iter().map(LevelTargets::num_positive).sum();
            1.0 / (batch as f64 * npos.max(1) as f64)
        })
        .collect();
    let mut terms = Vec::with_capacity(2 * outputs.len());
    for (li, out) in outputs.iter().enumerate() {
        let shape = tape.shape(out.cls_logits);
        if shape.batch() != batch {
            return Err(shape_err(
                "detection_loss",
                format!("logits {shape} for a batch of {batch} targets"),
            ));
        }
        let mut labels = Vec::with_capacity(shape.numel());
        let mut regs = Vec::new();
        for (b, levels) in targets.iter().enumerate() {
            let lt = levels
                .get(li)
                .ok_or_else(|| shape_err("detection_loss", "missing level targets"))?;
            if (lt.height, lt.width) != (shape.height(), shape.width()) {
                return Err(shape_err(
                    "detection_loss",
                    format!(
                        "targets {}x{} vs logits {}x{}",
                        lt.height,
                        lt.width,
                        shape.height(),
                        shape.width()
                    ),
                ));
            }
            labels.extend_from_slice(&lt.labels);
            regs.extend(lt.positives.iter().map(|p| RegTarget {
                batch: b,
                y: p.y,
                x: p.x,
                ltrb: p.ltrb,
            }));
        }
        terms.push(focal_loss(tape, out.cls_logits, &labels, &weights)?);
        if !regs.is_empty() {
            terms.push(iou_loss(tape, out.box_reg, &regs, &weights)?);
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Greedy NMS by descending score (stable for equal scores): a box is
/// dropped when its IoU with an already kept box exceeds `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Turns level predictions into per-image detections: sigmoid scores,
/// threshold, distance decoding, clipping to the image, NMS and truncation
/// to `max_detections`.
pub fn decode_detections<T: Scalar>(
    levels: &[LevelPrediction<T>],
    image_h: usize,
    image_w: usize,
    config: &HeadConfig,
) -> Result<Vec<Vec<Detection>>> {
    let batch = levels.first().map_or(0, |l| l.cls_logits.shape().batch());
    let mut out = vec![Vec::new(); batch];
    for lvl in levels {
        let s = lvl.cls_logits.shape();
        if lvl.box_reg.shape() != Shape::new(s.batch(), 4, s.height(), s.width()) || s.batch() != batch {
            return Err(shape_err(
                "decode_detections",
                format!("logits {s} vs regression {}", lvl.box_reg.shape()),
            ));
        }
        for (b, dets) in out.iter_mut().enumerate() {
            for y in 0..s.height() {
                for x in 0..s.width() {
                    let score = sigmoid(lvl.cls_logits.get(b, 0, y, x).as_f64());
                    if score < config.score_threshold {
                        continue;
                    }
                    let ltrb = std::array::from_fn(|k| lvl.box_reg.get(b, k, y, x).as_f64());
                    let px = (x * lvl.stride) as f64;
                    let py = (y * lvl.stride) as f64;
                    if let Some(bbox) = decode_box(ltrb, px, py, lvl.stride).clip(image_w as f64, image_h as f64) {
                        dets.push(Detection { bbox, score });
                    }
                }
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|dets| {
            let mut kept = nms(&dets, config.nms_iou);
            kept.truncate(config.max_detections);
            kept
        })
        .collect())
}

//! Box arithmetic for region-based detection: IoU, greedy NMS, anchors,
//! anchor-relative offsets and RoIAlign pooling.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box in continuous pixel coordinates, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 <= x2 && y1 <= y2) {
            return Err(Error::contract(format!(
                "box corners out of order: ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }

    fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }
}

/// Scale-invariant center shift and log-space size change relative to an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxOffset {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxOffset {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.tx, self.ty, self.tw, self.th]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
}

/// Intersection over union; zero for disjoint boxes or an empty union.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression. Equal scores keep input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::param(format!("nms threshold must be in (0, 1), got {iou_threshold}")));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.iter().all(|k| iou(&k.bbox, &dets[i].bbox) < iou_threshold) {
            kept.push(dets[i]);
        }
    }
    Ok(kept)
}

pub const DETECTION_SCORE_THRESHOLD: f64 = 0.9;

/// Keeps detections scoring above `threshold`; when none do, keeps the single
/// best one.
pub fn select_detections(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let confident: Vec<Detection> = dets.iter().copied().filter(|d| d.score > threshold).collect();
    if !confident.is_empty() || dets.is_empty() {
        return confident;
    }
    let best = dets
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.score.total_cmp(&b.score).then(j.cmp(i)))
        .map(|(_, d)| *d)
        .expect("nonempty");
    vec![best]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    /// Square-root areas in input pixels.
    pub scales: Vec<f64>,
    /// Height / width ratios.
    pub ratios: Vec<f64>,
    /// Input pixels per feature-map cell.
    pub stride: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![32.0, 64.0, 128.0, 256.0, 512.0],
            ratios: vec![0.5, 1.0, 2.0],
            stride: 16.0,
        }
    }
}

/// `scales × ratios` anchors per cell, centered on cell centers, row-major
/// over cells, then scale-major within a cell.
pub fn generate_anchors(cfg: &AnchorConfig, feat_h: usize, feat_w: usize) -> Result<Vec<BoundingBox>> {
    if cfg.scales.is_empty() || cfg.ratios.is_empty() {
        return Err(Error::param("anchor scales and ratios must be nonempty"));
    }
    if cfg.scales.iter().chain(&cfg.ratios).any(|&v| v <= 0.0) || cfg.stride <= 0.0 {
        return Err(Error::param("anchor scales, ratios and stride must be positive"));
    }
    let mut out = Vec::with_capacity(feat_h * feat_w * cfg.scales.len() * cfg.ratios.len());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let cx = (x as f64 + 0.5) * cfg.stride;
            let cy = (y as f64 + 0.5) * cfg.stride;
            for &s in &cfg.scales {
                for &r in &cfg.ratios {
                    let w = s / r.sqrt();
                    let h = s * r.sqrt();
                    out.push(BoundingBox::from_center(cx, cy, w, h));
                }
            }
        }
    }
    Ok(out)
}

pub fn encode_offset(b: &BoundingBox, anchor: &BoundingBox) -> Result<BoxOffset> {
    if anchor.width() <= 0.0 || anchor.height() <= 0.0 {
        return Err(Error::contract("anchor must have positive width and height"));
    }
    if b.width() <= 0.0 || b.height() <= 0.0 {
        return Err(Error::contract("encoded box must have positive width and height"));
    }
    let (cx, cy) = b.center();
    let (ax, ay) = anchor.center();
    Ok(BoxOffset {
        tx: (cx - ax) / anchor.width(),
        ty: (cy - ay) / anchor.height(),
        tw: (b.width() / anchor.width()).ln(),
        th: (b.height() / anchor.height()).ln(),
    })
}

pub fn decode_offset(t: &BoxOffset, anchor: &BoundingBox) -> BoundingBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BoundingBox::from_center(ax + t.tx * aw, ay + t.ty * ah, aw * t.tw.exp(), ah * t.th.exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiAlignConfig {
    pub out_size: (usize, usize),
    /// Samples per bin along each axis (2 gives 4 per bin).
    pub sampling: usize,
    /// Input pixels per feature cell; RoIs are divided by this, never rounded.
    pub stride: f64,
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        Self {
            out_size: (7, 7),
            sampling: 2,
            stride: 16.0,
        }
    }
}

/// Bilinear corners (flat feature offset, weight) of the sample that won the
/// max for one output cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSample {
    pub corners: Vec<(usize, f64)>,
}

/// Bilinear taps at continuous `(y, x)` where feature cell `i` sits at
/// coordinate `i`. Samples beyond one cell outside the map read zero.
pub(crate) fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> Vec<(usize, f64)> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return Vec::new();
    }
    let axis = |v: f64, n: usize| -> (usize, usize, f64) {
        let v = v.max(0.0);
        let lo = v.floor() as usize;
        if lo >= n - 1 {
            (n - 1, n - 1, 0.0)
        } else {
            (lo, lo + 1, v - lo as f64)
        }
    };
    let (y0, y1, ly) = axis(y, h);
    let (x0, x1, lx) = axis(x, w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    vec![
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ]
}

pub(crate) fn roi_align_forward(feat: &Tensor, roi: &BoundingBox, cfg: &RoiAlignConfig) -> Result<(Tensor, Vec<RoiSample>)> {
    let [c, h, w] = *feat.shape() else {
        return Err(Error::dim("roi_align", feat.shape(), &[0, 0, 0]));
    };
    if cfg.sampling == 0 || cfg.out_size.0 == 0 || cfg.out_size.1 == 0 || cfg.stride <= 0.0 {
        return Err(Error::param(format!("invalid roi_align config {cfg:?}")));
    }
    let r = roi.scale(1.0 / cfg.stride);
    if r.x2 < 0.0 || r.y2 < 0.0 || r.x1 > (w - 1) as f64 || r.y1 > (h - 1) as f64 {
        return Err(Error::contract(format!(
            "roi {roi:?} lies outside the {h}x{w} feature map"
        )));
    }
    let (oh, ow) = cfg.out_size;
    let bin_h = r.height() / oh as f64;
    let bin_w = r.width() / ow as f64;
    let n = cfg.sampling;
    let fd = feat.data();
    let plane = h * w;
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut samples = Vec::with_capacity(c * oh * ow);
    // Taps depend only on the bin, not the channel.
    let mut bin_taps: Vec<Vec<Vec<(usize, f64)>>> = Vec::with_capacity(oh * ow);
    for by in 0..oh {
        for bx in 0..ow {
            let mut taps = Vec::with_capacity(n * n);
            for sy in 0..n {
                let y = r.y1 + bin_h * (by as f64 + (sy as f64 + 0.5) / n as f64);
                for sx in 0..n {
                    let x = r.x1 + bin_w * (bx as f64 + (sx as f64 + 0.5) / n as f64);
                    taps.push(bilinear_taps(y, x, h, w));
                }
            }
            bin_taps.push(taps);
        }
    }
    for ci in 0..c {
        let base = ci * plane;
        for taps in &bin_taps {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (s, t) in taps.iter().enumerate() {
                let v: f64 = t.iter().map(|&(k, wt)| wt * fd[base + k]).sum();
                if v > best {
                    best = v;
                    arg = s;
                }
            }
            out.push(best);
            samples.push(RoiSample {
                corners: taps[arg].iter().map(|&(k, wt)| (base + k, wt)).collect(),
            });
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, samples))
}

/// Pools `feature[c×H×W]` inside `roi` (input-image coordinates) to
/// `c × out_size` by max over bilinearly interpolated samples per bin.
pub fn roi_align(tape: &mut Tape, feature: Var, roi: &BoundingBox, cfg: &RoiAlignConfig) -> Result<Var> {
    let (value, samples) = roi_align_forward(tape.value(feature), roi, cfg)?;
    Ok(tape.roi_align_op(feature, value, samples))
}

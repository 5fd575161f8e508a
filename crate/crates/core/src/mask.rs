//! Per-pixel affordance label grids: band-thresholded resizing, priority
//! merging of overlapping detections and multi-scale score fusion.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::tensor::Tensor;

/// Band half-width used when resizing label masks.
pub const RESIZE_ALPHA: f64 = 0.005;
/// Number of image scales fused at test time.
pub const DEFAULT_SCALES: usize = 3;

/// Row-major grid of affordance labels, 0 being background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract(format!("label grid must be nonempty, got {height}x{width}")));
        }
        if labels.len() != height * width {
            return Err(Error::dim("label_grid", &[height, width], &[labels.len()]));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    /// Sorted distinct labels.
    pub fn palette(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= num_classes) {
            Some(l) => Err(Error::contract(format!("label {l} outside {num_classes} classes"))),
            None => Ok(()),
        }
    }

    /// Fraction of pixels on which two equally sized grids agree.
    pub fn agreement(&self, other: &LabelGrid) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim("agreement", &[self.height, self.width], &[other.height, other.width]));
        }
        let same = self.labels.iter().zip(&other.labels).filter(|(a, b)| a == b).count();
        Ok(same as f64 / self.labels.len() as f64)
    }
}

/// Bilinear resize of a single `h×w` plane with half-pixel centers and edge
/// clamping. Equal sizes reproduce the input exactly.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let axis = |o: usize, n: usize, out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n as f64 / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, s - lo as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Resizes every channel of a `[k, h, w]` tensor.
pub fn resize_channels(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [k, h, w] = t.shape() else {
        return Err(Error::dim("resize_channels", t.shape(), &[0, out_h, out_w]));
    };
    let (k, h, w) = (*k, *h, *w);
    let mut data = Vec::with_capacity(k * out_h * out_w);
    for c in 0..k {
        data.extend(resize_bilinear(&t.data()[c * h * w..(c + 1) * h * w], h, w, out_h, out_w));
    }
    Tensor::new(vec![k, out_h, out_w], data)
}

/// Snaps an interpolated index value to the nearest integer in `0..n` when
/// it lies within `alpha` of it.
pub fn quantize_band(value: f64, n: usize, alpha: f64) -> Option<usize> {
    let r = value.round();
    if r < 0.0 || r >= n as f64 || (value - r).abs() > alpha {
        None
    } else {
        Some(r as usize)
    }
}

/// Resizes a label grid by remapping its labels to consecutive indices,
/// interpolating bilinearly, keeping only values within `alpha` of an index
/// and mapping back. Everything else becomes background.
pub fn resize_mask_multithreshold(src: &LabelGrid, out_h: usize, out_w: usize, alpha: f64) -> Result<LabelGrid> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::param(format!("alpha must be in (0, 0.5), got {alpha}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::param(format!("output size must be positive, got {out_h}x{out_w}")));
    }
    let palette = src.palette();
    let mut index = [0usize; 256];
    for (i, &l) in palette.iter().enumerate() {
        index[l as usize] = i;
    }
    let remapped: Vec<f64> = src.labels.iter().map(|&l| index[l as usize] as f64).collect();
    let resized = resize_bilinear(&remapped, src.height, src.width, out_h, out_w);
    let labels = resized
        .iter()
        .map(|&v| quantize_band(v, palette.len(), alpha).map_or(0, |i| palette[i]))
        .collect();
    LabelGrid::new(out_h, out_w, labels)
}

/// Affordance ids ordered from lowest to highest priority.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffordancePriority {
    order: Vec<u8>,
    rank: Vec<Option<usize>>,
}

impl AffordancePriority {
    /// `order` must be a permutation of `1..=n` for some `n`.
    pub fn new(order: Vec<u8>) -> Result<Self> {
        let n = order.len();
        let mut rank = vec![None; n + 1];
        for (r, &id) in order.iter().enumerate() {
            let i = id as usize;
            if i == 0 || i > n || rank[i].is_some() {
                return Err(Error::param(format!("priority {order:?} is not a permutation of 1..={n}")));
            }
            rank[i] = Some(r);
        }
        Ok(Self { order, rank })
    }

    /// `lowest` first, the rest in id order.
    pub fn with_lowest(num_affordances: usize, lowest: u8) -> Result<Self> {
        let mut order = vec![lowest];
        order.extend((1..=num_affordances as u8).filter(|&i| i != lowest));
        Self::new(order)
    }

    pub fn order(&self) -> &[u8] {
        &self.order
    }

    pub fn rank(&self, label: u8) -> Option<usize> {
        self.rank.get(label as usize).copied().flatten()
    }

    /// Whether `candidate` should replace `current` at a pixel.
    fn wins(&self, candidate: u8, current: u8) -> bool {
        candidate != 0 && (current == 0 || self.rank(candidate) > self.rank(current))
    }
}

/// Top-left pixel a detection's mask is pasted at.
pub fn mask_origin(det: &Detection) -> (i64, i64) {
    (det.bbox.y1.round() as i64, det.bbox.x1.round() as i64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedMask {
    pub grid: LabelGrid,
    /// Indices of detections whose mask extended past the image.
    pub clipped: Vec<usize>,
}

/// Pastes each detection's mask into a `height×width` image. Overlaps go to
/// the higher-priority affordance and background never overwrites a label.
pub fn merge_detections(
    masks: &[(Detection, LabelGrid)],
    priority: &AffordancePriority,
    height: usize,
    width: usize,
) -> Result<MergedMask> {
    let mut grid = LabelGrid::filled(height, width, 0)?;
    let mut clipped = Vec::new();
    for (i, (det, m)) in masks.iter().enumerate() {
        if let Some(&l) = m.labels.iter().find(|&&l| l != 0 && priority.rank(l).is_none()) {
            return Err(Error::contract(format!("label {l} of detection {i} has no priority")));
        }
        let (oy, ox) = mask_origin(det);
        let mut outside = false;
        for my in 0..m.height {
            for mx in 0..m.width {
                let (y, x) = (oy + my as i64, ox + mx as i64);
                if y < 0 || x < 0 || y >= height as i64 || x >= width as i64 {
                    outside = true;
                    continue;
                }
                let (y, x) = (y as usize, x as usize);
                let l = m.get(my, mx);
                if priority.wins(l, grid.get(y, x)) {
                    grid.set(y, x, l);
                }
            }
        }
        if outside {
            warn!("detection {i} mask extends past the {height}x{width} image; clipped");
            clipped.push(i);
        }
    }
    Ok(MergedMask { grid, clipped })
}

/// Resizes each `[k, h_i, w_i]` score map to the target size and takes the
/// per-pixel, per-class maximum.
pub fn multi_scale_fuse(maps: &[Tensor], expected_scales: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
    if maps.len() != expected_scales {
        return Err(Error::contract(format!("expected {expected_scales} score maps, got {}", maps.len())));
    }
    let first = maps.first().ok_or_else(|| Error::contract("no score maps"))?;
    let k = first.shape().first().copied().unwrap_or(0);
    let mut fused: Option<Tensor> = None;
    for m in maps {
        if m.ndim() != 3 || m.shape()[0] != k {
            return Err(Error::dim("multi_scale_fuse", first.shape(), m.shape()));
        }
        let r = resize_channels(m, out_h, out_w)?;
        fused = Some(match fused {
            None => r,
            Some(acc) => acc.zip_map(&r, f64::max)?,
        });
    }
    Ok(fused.expect("at least one map"))
}

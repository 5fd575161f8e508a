//! Fully connected CRF over per-pixel label costs, with Gaussian
//! appearance/smoothness kernels and mean-field inference.
//!
//! Messages are summed exactly over all pixel pairs, so images are limited
//! to [`MAX_PIXELS`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::clamp_below;
use crate::error::{Error, Result};
use crate::losses::PROB_EPS;
use crate::mask::LabelGrid;
use crate::tensor::{argmax, Tensor};

pub const MAX_PIXELS: usize = 64 * 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfConfig {
    pub w1: f64,
    pub w2: f64,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    pub sigma_gamma: f64,
    pub iterations: usize,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 1.0,
            sigma_alpha: 30.0,
            sigma_beta: 13.0,
            sigma_gamma: 3.0,
            iterations: 5,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_alpha > 0.0 && self.sigma_beta > 0.0 && self.sigma_gamma > 0.0) {
            return Err(Error::param(format!("CRF bandwidths must be positive: {self:?}")));
        }
        if self.iterations == 0 {
            return Err(Error::param("CRF needs at least one mean-field iteration"));
        }
        Ok(())
    }
}

/// RGB image with channel values on the 0..255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn new(height: usize, width: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != height * width || pixels.is_empty() {
            return Err(Error::dim("color_image", &[height, width], &[pixels.len()]));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn uniform(height: usize, width: usize, color: [f64; 3]) -> Result<Self> {
        Self::new(height, width, vec![color; height * width])
    }

    pub fn feature(&self, i: usize) -> PixelFeature {
        PixelFeature {
            pos: ((i / self.width) as f64, (i % self.width) as f64),
            color: self.pixels[i],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelFeature {
    /// (row, column)
    pub pos: (f64, f64),
    pub color: [f64; 3],
}

/// Label costs `θ_p(l)` laid out `[labels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnaryField {
    costs: Tensor,
}

impl UnaryField {
    pub fn new(costs: Tensor) -> Result<Self> {
        if costs.ndim() != 3 {
            return Err(Error::dim("unary_field", costs.shape(), &[0, 0, 0]));
        }
        if !costs.all_finite() {
            return Err(Error::contract("unary costs must be finite"));
        }
        Ok(Self { costs })
    }

    /// `−log max(p, ε)` of per-pixel probabilities.
    pub fn from_probabilities(probs: &Tensor) -> Result<Self> {
        Self::new(probs.map(|p| -clamp_below(p, PROB_EPS).ln()))
    }

    pub fn labels(&self) -> usize {
        self.costs.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.costs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.costs.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn cost(&self, pixel: usize, label: usize) -> f64 {
        self.costs.data()[label * self.pixels() + pixel]
    }

    pub fn costs(&self) -> &Tensor {
        &self.costs
    }
}

pub fn bilateral_kernel(p: &PixelFeature, q: &PixelFeature, cfg: &CrfConfig) -> f64 {
    let dp = (p.pos.0 - q.pos.0).powi(2) + (p.pos.1 - q.pos.1).powi(2);
    let dc: f64 = p.color.iter().zip(&q.color).map(|(a, b)| (a - b).powi(2)).sum();
    let appearance = (-dp / (2.0 * cfg.sigma_alpha.powi(2)) - dc / (2.0 * cfg.sigma_beta.powi(2))).exp();
    let smoothness = (-dp / (2.0 * cfg.sigma_gamma.powi(2))).exp();
    cfg.w1 * appearance + cfg.w2 * smoothness
}

fn check_shapes(unary: &UnaryField, image: &ColorImage) -> Result<()> {
    if (unary.height(), unary.width()) != (image.height, image.width) {
        return Err(Error::dim("crf", unary.costs.shape(), &[image.height, image.width]));
    }
    if unary.pixels() > MAX_PIXELS {
        return Err(Error::param(format!("CRF input has {} pixels, limit is {MAX_PIXELS}", unary.pixels())));
    }
    Ok(())
}

/// Unary cost of `labeling` plus the kernel weight of every unordered pixel
/// pair whose labels differ.
pub fn crf_energy(labeling: &LabelGrid, unary: &UnaryField, image: &ColorImage, cfg: &CrfConfig) -> Result<f64> {
    check_shapes(unary, image)?;
    if (labeling.height(), labeling.width()) != (image.height, image.width) {
        return Err(Error::dim("crf_energy", &[labeling.height(), labeling.width()], &[image.height, image.width]));
    }
    labeling.check_classes(unary.labels())?;
    let x = labeling.labels();
    let n = x.len();
    let mut e: f64 = (0..n).map(|p| unary.cost(p, x[p] as usize)).sum();
    for p in 0..n {
        let fp = image.feature(p);
        for q in p + 1..n {
            if x[p] != x[q] {
                e += bilateral_kernel(&fp, &image.feature(q), cfg);
            }
        }
    }
    Ok(e)
}

/// Per-pixel softmax over labels of `−θ − penalty`, `[L, H, W]` layout.
fn normalize(unary: &UnaryField, penalty: impl Fn(usize, usize) -> f64 + Sync) -> Tensor {
    let (l, n) = (unary.labels(), unary.pixels());
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let z: Vec<f64> = (0..l).map(|k| -unary.cost(p, k) - penalty(p, k)).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let mut data = vec![0.0; l * n];
    for (p, col) in cols.iter().enumerate() {
        for k in 0..l {
            data[k * n + p] = col[k];
        }
    }
    Tensor::new(vec![l, unary.height(), unary.width()], data).expect("shape from unary")
}

/// One mean-field update from marginals `q`.
pub fn mean_field_step(unary: &UnaryField, image: &ColorImage, cfg: &CrfConfig, q: &Tensor) -> Result<Tensor> {
    check_shapes(unary, image)?;
    if q.shape() != unary.costs.shape() {
        return Err(Error::dim("mean_field_step", q.shape(), unary.costs.shape()));
    }
    let (l, n) = (unary.labels(), unary.pixels());
    let qd = q.data();
    let messages: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let fp = image.feature(p);
            let mut m = vec![0.0; l];
            for j in (0..n).filter(|&j| j != p) {
                let k = bilateral_kernel(&fp, &image.feature(j), cfg);
                for (lab, mv) in m.iter_mut().enumerate() {
                    *mv += k * qd[lab * n + j];
                }
            }
            m
        })
        .collect();
    // Potts: the penalty for label k is the message mass on every other label.
    Ok(normalize(unary, |p, k| {
        let total: f64 = messages[p].iter().sum();
        total - messages[p][k]
    }))
}

/// Approximate marginals after `cfg.iterations` mean-field updates.
pub fn mean_field(unary: &UnaryField, image: &ColorImage, cfg: &CrfConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_shapes(unary, image)?;
    let mut q = normalize(unary, |_, _| 0.0);
    for _ in 0..cfg.iterations {
        q = mean_field_step(unary, image, cfg, &q)?;
    }
    Ok(q)
}

/// Per-pixel most probable label of `[L, H, W]` marginals, ties to the lowest.
pub fn map_labeling(q: &Tensor) -> Result<LabelGrid> {
    let [l, h, w] = q.shape() else {
        return Err(Error::dim("map_labeling", q.shape(), &[0, 0, 0]));
    };
    if *l > 256 {
        return Err(Error::contract(format!("{l} labels do not fit a label grid")));
    }
    let n = h * w;
    let labels = (0..n)
        .map(|p| {
            let col: Vec<f64> = (0..*l).map(|k| q.data()[k * n + p]).collect();
            argmax(&col) as u8
        })
        .collect();
    LabelGrid::new(*h, *w, labels)
}

/// Number of horizontally or vertically adjacent pixel pairs with different labels.
pub fn neighbor_disagreements(g: &LabelGrid) -> usize {
    let mut count = 0;
    for y in 0..g.height() {
        for x in 0..g.width() {
            if x + 1 < g.width() && g.get(y, x) != g.get(y, x + 1) {
                count += 1;
            }
            if y + 1 < g.height() && g.get(y, x) != g.get(y + 1, x) {
                count += 1;
            }
        }
    }
    count
}

//! Evaluation measures: weighted F-measure for label masks, BLEU and
//! ROUGE-L for commands, and action success rate.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelGrid;

/// Reported full-dataset scores of the reference system. They need pretrained
/// backbones and the real datasets, so nothing in this crate tries to match them.
pub mod published {
    /// Mean weighted F-measure (percent) over affordances on IIT-AFF.
    pub const IIT_AFF_MEAN_F_BETA_W: f64 = 73.35;
    /// Mean weighted F-measure on UMD.
    pub const UMD_MEAN_F_BETA_W: f64 = 0.799;
    pub const V2C_BLEU_1: f64 = 0.406;
    pub const V2C_CIDER: f64 = 1.656;
    /// Fine-grained action success rate, percent.
    pub const ACTION_SUCCESS_RATE: f64 = 34.81;
}

/// Bandwidth of the distance weighting applied to false positives.
pub const DEFAULT_WEIGHT_SIGMA: f64 = 5.0;
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FMeasureConfig {
    pub beta: f64,
    /// `None` gives plain pixel precision and recall.
    pub weight_sigma: Option<f64>,
}

impl Default for FMeasureConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            weight_sigma: Some(DEFAULT_WEIGHT_SIGMA),
        }
    }
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas).
fn dt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[k]].is_infinite() {
            v[k] = q;
            continue;
        }
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if f[v[0]].is_infinite() {
        return vec![f64::INFINITY; n];
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as f64 - v[k] as f64;
        *dq = diff * diff + f[v[k]];
    }
    d
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel;
/// infinite everywhere when there is none.
pub fn squared_distance_transform(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut g: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    for x in 0..w {
        let col: Vec<f64> = (0..h).map(|y| g[y * w + x]).collect();
        for (y, v) in dt_1d(&col).into_iter().enumerate() {
            g[y * w + x] = v;
        }
    }
    for y in 0..h {
        let row = dt_1d(&g[y * w..(y + 1) * w]);
        g[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    g
}

/// Weighted F-measure of one class. With weighting on, a false positive at
/// distance `d` from the ground-truth region costs `2 − exp(−d²/2σ²)`; true
/// positives and misses cost 1. Zero when precision and recall are both zero.
pub fn f_beta_w(pred: &LabelGrid, gt: &LabelGrid, class: u8, cfg: &FMeasureConfig) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::dim("f_beta_w", &[pred.height(), pred.width()], &[gt.height(), gt.width()]));
    }
    let p: Vec<bool> = pred.labels().iter().map(|&l| l == class).collect();
    let g: Vec<bool> = gt.labels().iter().map(|&l| l == class).collect();
    let dist = cfg
        .weight_sigma
        .map(|s| (squared_distance_transform(&g, gt.height(), gt.width()), s));
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        match (p[i], g[i]) {
            (true, true) => tp += 1.0,
            (false, true) => fn_ += 1.0,
            (true, false) => {
                fp += match &dist {
                    Some((d2, s)) => 2.0 - (-d2[i] / (2.0 * s * s)).exp(),
                    None => 1.0,
                }
            }
            (false, false) => {}
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let b2 = cfg.beta * cfg.beta;
    if precision == 0.0 && recall == 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 + b2) * precision * recall / (b2 * precision + recall))
}

fn ngram_counts<'a, 'b>(tokens: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and candidate n-gram total.
fn clipped_matches(cand: &[&str], refs: &[Vec<&str>], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
    for r in refs {
        for (g, k) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(k);
        }
    }
    let matched = c.iter().map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`, ties to the shorter.
fn closest_ref_len(c: usize, refs: &[Vec<&str>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn combine(matches: &[(usize, usize)], c: usize, r: usize) -> Vec<f64> {
    let bp = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(matches.len());
    let mut log_sum = 0.0;
    for (k, &(m, total)) in matches.iter().enumerate() {
        log_sum += if m == 0 || total == 0 {
            f64::NEG_INFINITY
        } else {
            (m as f64 / total as f64).ln()
        };
        out.push(bp * (log_sum / (k + 1) as f64).exp());
    }
    out
}

/// Sentence BLEU-1..BLEU-`max_n`: clipped n-gram precisions, geometric mean
/// over orders up to each n, and brevity penalty against the closest
/// reference length.
pub fn bleu_n(candidate: &[&str], references: &[Vec<&str>], max_n: usize) -> Vec<f64> {
    if candidate.is_empty() || references.is_empty() {
        return vec![0.0; max_n];
    }
    let m: Vec<(usize, usize)> = (1..=max_n).map(|n| clipped_matches(candidate, references, n)).collect();
    combine(&m, candidate.len(), closest_ref_len(candidate.len(), references))
}

/// Corpus BLEU: counts and lengths pooled over all sentences before combining.
pub fn corpus_bleu(candidates: &[Vec<&str>], references: &[Vec<Vec<&str>>], max_n: usize) -> Result<Vec<f64>> {
    if candidates.len() != references.len() {
        return Err(Error::dim("corpus_bleu", &[candidates.len()], &[references.len()]));
    }
    let mut pooled = vec![(0usize, 0usize); max_n];
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::contract("every candidate needs a reference"));
        }
        for (n, slot) in pooled.iter_mut().enumerate() {
            let (m, t) = clipped_matches(cand, refs, n + 1);
            slot.0 += m;
            slot.1 += t;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
    }
    Ok(combine(&pooled, c, r))
}

pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS-based F-measure with recall weighted by [`ROUGE_BETA`].
pub fn rouge_l(candidate: &[&str], reference: &[&str]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let r = l / reference.len() as f64;
    let p = l / candidate.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * r * p / (r + b2 * p)
}

/// Percentage of positions where the predicted verb equals the ground truth.
pub fn action_success_rate<S: AsRef<str>>(predicted: &[S], truth: &[S]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::dim("action_success_rate", &[predicted.len()], &[truth.len()]));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a.as_ref() == b.as_ref()).count();
    Ok(100.0 * hits as f64 / truth.len() as f64)
}

/// Lowercased whitespace tokens.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Named metric values, printed in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        self.values.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn to_key_value(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.values).expect("finite map serializes")
    }
}

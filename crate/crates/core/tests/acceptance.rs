//! Acceptance suite. Runs without the libtest harness so that every verdict
//! line reaches the output, then exits non-zero if any criterion failed.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use affkit::backbone::{
    make_affordance_toyset, make_v2c_toyset, mask_pixel_accuracy, prepare_affordance_data, train_affordance,
    AffordanceTrainConfig, ToyAffordanceNet, TOY_FEATURE_DIM,
};
use affkit::crf::{
    crf_energy, map_labeling, mean_field, mean_field_step, neighbor_disagreements, ColorImage, CrfConfig, UnaryField,
};
use affkit::geometry::{iou, nms, roi_align, BoundingBox, Detection, RoiAlignConfig};
use affkit::gradcheck::gradient_suite;
use affkit::io::{Checkpoint, Dtype};
use affkit::layers::{deconv2d_size, Conv2dParams};
use affkit::mask::{quantize_band, resize_mask_multithreshold, LabelGrid, RESIZE_ALPHA};
use affkit::metrics::{action_success_rate, bleu_n, f_beta_w, published, rouge_l, FMeasureConfig};
use affkit::optim::Adam;
use affkit::recurrent::CellKind;
use affkit::v2c::{fit_rates, train_v2c, v2c_train_step, TrainConfig, V2CConfig, V2CExample, V2CNet};
use affkit::{SeededRng, Tape, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

// ---------------------------------------------------------------- oracles

/// Result of running one brute-force comparison suite.
#[derive(Debug, PartialEq)]
struct OracleRun {
    instances: usize,
    max_err: f64,
    /// Bit patterns of every value the implementation produced.
    digest: Vec<u64>,
}

/// Bilinear read as a tent-weighted sum over every cell; reads more than one
/// cell outside the map are zero, coordinates inside that margin clamp.
fn tent_sample(f: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return 0.0;
    }
    let (y, x) = (y.clamp(0.0, (h - 1) as f64), x.clamp(0.0, (w - 1) as f64));
    let mut v = 0.0;
    for i in 0..h {
        for j in 0..w {
            let wy = (1.0 - (y - i as f64).abs()).max(0.0);
            let wx = (1.0 - (x - j as f64).abs()).max(0.0);
            v += f[i * w + j] * wy * wx;
        }
    }
    v
}

fn roi_oracle(feat: &Tensor, roi: &BoundingBox, cfg: &RoiAlignConfig) -> Vec<f64> {
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let (oh, ow) = cfg.out_size;
    let n = cfg.sampling as f64;
    let (y0, x0) = (roi.y1 / cfg.stride, roi.x1 / cfg.stride);
    let bh = (roi.y2 - roi.y1) / cfg.stride / oh as f64;
    let bw = (roi.x2 - roi.x1) / cfg.stride / ow as f64;
    let mut out = Vec::new();
    for ci in 0..c {
        let plane = &feat.data()[ci * h * w..(ci + 1) * h * w];
        for by in 0..oh {
            for bx in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for sy in 0..cfg.sampling {
                    for sx in 0..cfg.sampling {
                        let y = y0 + bh * (by as f64 + (sy as f64 + 0.5) / n);
                        let x = x0 + bw * (bx as f64 + (sx as f64 + 0.5) / n);
                        best = best.max(tent_sample(plane, h, w, y, x));
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

fn oracle_roi_align(seed: u64) -> OracleRun {
    let mut rng = SeededRng::new(seed);
    let (mut max_err, mut digest) = (0.0f64, Vec::new());
    let instances = 150;
    for _ in 0..instances {
        let (c, h, w) = (1 + rng.below(3), 2 + rng.below(7), 2 + rng.below(7));
        let stride = [1.0, 2.0, 4.0, 16.0][rng.below(4)];
        let feat = rng.uniform_tensor(&[c, h, w], -2.0, 2.0);
        let x1 = rng.uniform(0.0, (w - 1) as f64) * stride;
        let y1 = rng.uniform(0.0, (h - 1) as f64) * stride;
        let roi = BoundingBox::new(x1, y1, x1 + rng.uniform(0.2, 5.0) * stride, y1 + rng.uniform(0.2, 5.0) * stride).unwrap();
        let cfg = RoiAlignConfig { out_size: (1 + rng.below(4), 1 + rng.below(4)), sampling: 1 + rng.below(3), stride };
        let mut tape = Tape::new();
        let f = tape.leaf(feat.clone());
        let out = roi_align(&mut tape, f, &roi, &cfg).unwrap();
        let got = tape.value(out).data().to_vec();
        for (a, b) in got.iter().zip(roi_oracle(&feat, &roi, &cfg)) {
            max_err = max_err.max((a - b).abs());
        }
        digest.extend(bits(&got));
    }
    OracleRun { instances, max_err, digest }
}

/// Greedy suppression has exactly one fixed point: a box is kept iff no kept
/// box ranked above it overlaps it at or above the threshold.
fn nms_fixed_point_violations(dets: &[Detection], kept: &[bool], thr: f64) -> usize {
    let above = |j: usize, i: usize| dets[j].score > dets[i].score || (dets[j].score == dets[i].score && j < i);
    (0..dets.len())
        .filter(|&i| {
            let blocked = (0..dets.len()).any(|j| j != i && kept[j] && above(j, i) && iou(&dets[j].bbox, &dets[i].bbox) >= thr);
            kept[i] == blocked
        })
        .count()
}

fn oracle_nms(seed: u64) -> OracleRun {
    let mut rng = SeededRng::new(seed);
    let (mut max_err, mut digest) = (0.0f64, Vec::new());
    let instances = 150;
    for _ in 0..instances {
        let n = 20;
        let dets: Vec<Detection> = (0..n)
            .map(|i| {
                let x1 = rng.uniform(0.0, 30.0);
                let y1 = rng.uniform(0.0, 30.0);
                Detection {
                    bbox: BoundingBox::new(x1, y1, x1 + rng.uniform(2.0, 15.0), y1 + rng.uniform(2.0, 15.0)).unwrap(),
                    class_id: i,
                    // Coarse scores so that ties occur.
                    score: rng.below(8) as f64 / 8.0,
                }
            })
            .collect();
        let thr = rng.uniform(0.05, 0.95);
        let out = nms(&dets, thr).unwrap();
        let mut kept = vec![false; n];
        for d in &out {
            kept[d.class_id] = true;
        }
        let mut err = nms_fixed_point_violations(&dets, &kept, thr) as f64;
        if out.windows(2).any(|w| w[0].score < w[1].score) || out.len() != kept.iter().filter(|&&k| k).count() {
            err += 1.0;
        }
        max_err = max_err.max(err);
        digest.extend(out.iter().map(|d| d.class_id as u64));
        digest.push(u64::MAX);
    }
    OracleRun { instances, max_err, digest }
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, p: &Conv2dParams) -> (Vec<usize>, Vec<f64>) {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (f, k) = (w.shape()[0], w.shape()[2]);
    let (s, pad, d) = (p.stride.0 as i64, p.padding.0 as i64, p.dilation as i64);
    let span = d * (k as i64 - 1) + 1;
    let oh = ((h as i64 + 2 * pad - span) / s + 1) as usize;
    let ow = ((wd as i64 + 2 * pad - span) / s + 1) as usize;
    let mut out = Vec::with_capacity(f * oh * ow);
    for fi in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[fi];
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy as i64 * s - pad + ky as i64 * d;
                            let ix = ox as i64 * s - pad + kx as i64 * d;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                continue;
                            }
                            acc += w.data()[((fi * c + ci) * k + ky) * k + kx] * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    (vec![f, oh, ow], out)
}

fn oracle_conv2d(seed: u64) -> OracleRun {
    let mut rng = SeededRng::new(seed);
    let (mut max_err, mut digest) = (0.0f64, Vec::new());
    let instances = 150;
    for _ in 0..instances {
        let (c, f, k) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(4));
        let p = Conv2dParams::square(f, k, 1 + rng.below(3), rng.below(3)).dilated(1 + rng.below(2));
        let span = (k - 1) * p.dilation + 1;
        let (h, w) = (span + rng.below(6), span + rng.below(6));
        let x = rng.uniform_tensor(&[c, h, w], -1.0, 1.0);
        let wt = rng.uniform_tensor(&[f, c, k, k], -1.0, 1.0);
        let b = rng.uniform_tensor(&[f], -1.0, 1.0);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(wt.clone()), tape.leaf(b.clone()));
        let y = tape.conv2d(xv, wv, bv, &p).unwrap();
        let got = tape.value(y);
        let (shape, want) = conv_oracle(&x, &wt, &b, &p);
        if got.shape() != shape.as_slice() {
            max_err = f64::INFINITY;
            continue;
        }
        for (a, b) in got.data().iter().zip(&want) {
            max_err = max_err.max((a - b).abs());
        }
        digest.extend(bits(got.data()));
    }
    OracleRun { instances, max_err, digest }
}

fn kernel(img: &[[f64; 3]], w: usize, p: usize, q: usize, cfg: &CrfConfig) -> f64 {
    let (py, px) = ((p / w) as f64, (p % w) as f64);
    let (qy, qx) = ((q / w) as f64, (q % w) as f64);
    let pos = (py - qy) * (py - qy) + (px - qx) * (px - qx);
    let col: f64 = (0..3).map(|i| (img[p][i] - img[q][i]) * (img[p][i] - img[q][i])).sum();
    cfg.w1 * (-pos / (2.0 * cfg.sigma_alpha * cfg.sigma_alpha) - col / (2.0 * cfg.sigma_beta * cfg.sigma_beta)).exp()
        + cfg.w2 * (-pos / (2.0 * cfg.sigma_gamma * cfg.sigma_gamma)).exp()
}

fn random_crf(rng: &mut SeededRng) -> (usize, usize, usize, Vec<f64>, Vec<[f64; 3]>, CrfConfig) {
    let (l, h, w) = (2 + rng.below(2), 2 + rng.below(3), 2 + rng.below(3));
    let costs: Vec<f64> = (0..l * h * w).map(|_| rng.uniform(0.0, 4.0)).collect();
    let img: Vec<[f64; 3]> = (0..h * w).map(|_| [rng.uniform(0.0, 255.0), rng.uniform(0.0, 255.0), rng.uniform(0.0, 255.0)]).collect();
    let cfg = CrfConfig {
        w1: rng.uniform(0.0, 4.0),
        w2: rng.uniform(0.0, 4.0),
        sigma_alpha: rng.uniform(0.5, 5.0),
        sigma_beta: rng.uniform(10.0, 120.0),
        sigma_gamma: rng.uniform(0.5, 3.0),
        iterations: 1,
    };
    (l, h, w, costs, img, cfg)
}

fn oracle_mean_field_step(seed: u64) -> OracleRun {
    let mut rng = SeededRng::new(seed);
    let (mut max_err, mut digest) = (0.0f64, Vec::new());
    let instances = 120;
    for i in 0..instances {
        // Every third instance is the 4×4 two-label case.
        let (l, h, w, costs, img, cfg) = if i % 3 == 0 {
            let (_, _, _, _, _, cfg) = random_crf(&mut rng);
            let costs: Vec<f64> = (0..32).map(|_| rng.uniform(0.0, 4.0)).collect();
            let img: Vec<[f64; 3]> = (0..16).map(|_| [rng.uniform(0.0, 255.0), rng.uniform(0.0, 255.0), rng.uniform(0.0, 255.0)]).collect();
            (2, 4, 4, costs, img, cfg)
        } else {
            random_crf(&mut rng)
        };
        let n = h * w;
        let mut q: Vec<f64> = (0..l * n).map(|_| rng.uniform(0.05, 1.0)).collect();
        for p in 0..n {
            let s: f64 = (0..l).map(|k| q[k * n + p]).sum();
            for k in 0..l {
                q[k * n + p] /= s;
            }
        }
        let unary = UnaryField::new(Tensor::new(vec![l, h, w], costs.clone()).unwrap()).unwrap();
        let image = ColorImage::new(h, w, img.clone()).unwrap();
        let got = mean_field_step(&unary, &image, &cfg, &Tensor::new(vec![l, h, w], q.clone()).unwrap()).unwrap();
        for p in 0..n {
            let mut z = vec![0.0; l];
            for (lab, zl) in z.iter_mut().enumerate() {
                let mut penalty = 0.0;
                for other in 0..n {
                    if other == p {
                        continue;
                    }
                    for lp in 0..l {
                        if lp != lab {
                            penalty += kernel(&img, w, p, other, &cfg) * q[lp * n + other];
                        }
                    }
                }
                *zl = (-costs[lab * n + p] - penalty).exp();
            }
            let total: f64 = z.iter().sum();
            for lab in 0..l {
                max_err = max_err.max((got.data()[lab * n + p] - z[lab] / total).abs());
            }
        }
        digest.extend(bits(got.data()));
    }
    OracleRun { instances, max_err, digest }
}

fn oracle_crf_energy(seed: u64) -> OracleRun {
    let mut rng = SeededRng::new(seed);
    let (mut max_err, mut digest) = (0.0f64, Vec::new());
    let instances = 150;
    for _ in 0..instances {
        let (l, h, w, costs, img, cfg) = random_crf(&mut rng);
        let n = h * w;
        let labels: Vec<u8> = (0..n).map(|_| rng.below(l) as u8).collect();
        let unary = UnaryField::new(Tensor::new(vec![l, h, w], costs.clone()).unwrap()).unwrap();
        let image = ColorImage::new(h, w, img.clone()).unwrap();
        let got = crf_energy(&LabelGrid::new(h, w, labels.clone()).unwrap(), &unary, &image, &cfg).unwrap();
        let mut want: f64 = (0..n).map(|p| costs[labels[p] as usize * n + p]).sum();
        for p in 0..n {
            for q in 0..n {
                if p < q && labels[p] != labels[q] {
                    want += kernel(&img, w, p, q, &cfg);
                }
            }
        }
        max_err = max_err.max((got - want).abs() / want.abs().max(1.0));
        digest.push(got.to_bits());
    }
    OracleRun { instances, max_err, digest }
}

/// Sentence BLEU with counts taken by linear scans.
fn naive_bleu(cand: &[&str], refs: &[Vec<&str>], max_n: usize) -> Vec<f64> {
    let grams = |s: &[&str], n: usize| -> Vec<Vec<String>> {
        if s.len() < n {
            return Vec::new();
        }
        (0..=s.len() - n).map(|i| s[i..i + n].iter().map(|t| t.to_string()).collect()).collect()
    };
    let count = |list: &[Vec<String>], g: &Vec<String>| list.iter().filter(|x| *x == g).count();
    let c = cand.len();
    let mut r = refs[0].len();
    for rf in refs {
        let (d_new, d_old) = ((rf.len() as i64 - c as i64).abs(), (r as i64 - c as i64).abs());
        if d_new < d_old || (d_new == d_old && rf.len() < r) {
            r = rf.len();
        }
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    let mut precisions = Vec::new();
    let mut out = Vec::new();
    for n in 1..=max_n {
        let cg = grams(cand, n);
        let mut seen: Vec<Vec<String>> = Vec::new();
        let mut matched = 0;
        for g in &cg {
            if seen.contains(g) {
                continue;
            }
            seen.push(g.clone());
            let best_ref = refs.iter().map(|rf| count(&grams(rf, n), g)).max().unwrap_or(0);
            matched += count(&cg, g).min(best_ref);
        }
        precisions.push(if cg.is_empty() { 0.0 } else { matched as f64 / cg.len() as f64 });
        if precisions.contains(&0.0) {
            out.push(0.0);
        } else {
            let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / n as f64;
            out.push(bp * mean_log.exp());
        }
    }
    out
}

fn oracle_bleu(seed: u64) -> OracleRun {
    const WORDS: [&str; 6] = ["cut", "pour", "apple", "water", "lefthand", "box"];
    let mut rng = SeededRng::new(seed);
    let (mut max_err, mut digest) = (0.0f64, Vec::new());
    let instances = 300;
    for _ in 0..instances {
        let sentence = |rng: &mut SeededRng| -> Vec<&str> {
            let (len, spread) = (1 + rng.below(8), 3 + rng.below(4));
            (0..len).map(|_| WORDS[rng.below(spread)]).collect()
        };
        let cand = sentence(&mut rng);
        let nrefs = 1 + rng.below(3);
        let refs: Vec<Vec<&str>> = (0..nrefs).map(|_| sentence(&mut rng)).collect();
        let got = bleu_n(&cand, &refs, 4);
        for (a, b) in got.iter().zip(naive_bleu(&cand, &refs, 4)) {
            max_err = max_err.max((a - b).abs());
        }
        digest.extend(bits(&got));
    }
    OracleRun { instances, max_err, digest }
}

type OracleSuite = (&'static str, fn(u64) -> OracleRun, f64);

const ORACLES: [OracleSuite; 6] = [
    ("roi_align", oracle_roi_align, 1e-12),
    ("nms", oracle_nms, 0.0),
    ("conv2d", oracle_conv2d, 1e-12),
    ("mean_field_step", oracle_mean_field_step, 1e-9),
    ("crf_energy", oracle_crf_energy, 1e-12),
    ("bleu", oracle_bleu, 1e-12),
];

const ORACLE_SEED: u64 = 2024;

// ---------------------------------------------------------------- criteria

fn deconv_chain() -> Verdict {
    let steps = [(7, 4, 8, 1, 30), (30, 4, 8, 1, 122), (122, 2, 4, 1, 244)];
    let mut sizes = vec![7];
    let mut ok = true;
    for (input, s, k, d, want) in steps {
        let got = deconv2d_size(input, s, k, d).unwrap();
        ok &= got == want;
        sizes.push(got);
    }
    let chain: Vec<String> = sizes.iter().map(usize::to_string).collect();
    verdict(ok, chain.join(" -> "))
}

fn gradients() -> Verdict {
    let t = Instant::now();
    let suite = gradient_suite(1).unwrap();
    let elapsed = t.elapsed();
    let failed: Vec<&str> = suite.iter().filter(|e| !e.report.passed()).map(|e| e.name).collect();
    let worst = suite.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    verdict(
        failed.is_empty() && elapsed < Duration::from_secs(60) && suite.len() >= 20,
        format!("{} checks, worst relative error {worst:.2e}, failed {failed:?}, {:.1}s", suite.len(), elapsed.as_secs_f64()),
    )
}

fn oracles() -> Verdict {
    let t = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, run, tol) in ORACLES {
        let r = run(ORACLE_SEED);
        let pass = r.instances >= 100 && r.max_err <= tol;
        ok &= pass;
        parts.push(format!("{name} {}x err {:.1e}", r.instances, r.max_err));
    }
    let elapsed = t.elapsed();
    ok &= elapsed < Duration::from_secs(120);
    verdict(ok, format!("{}, {:.1}s", parts.join("; "), elapsed.as_secs_f64()))
}

/// Two-region scene whose unary prefers the true label on most pixels.
fn noisy_scene(rng: &mut SeededRng, h: usize, w: usize) -> (UnaryField, ColorImage) {
    let mut costs = vec![0.0; 2 * h * w];
    let mut px = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let truth = usize::from(y * w + x >= h * w / 2);
            let shown = if rng.bernoulli(0.2) { 1 - truth } else { truth };
            let conf = rng.uniform(0.55, 0.8);
            costs[shown * h * w + y * w + x] = -conf.ln();
            costs[(1 - shown) * h * w + y * w + x] = -(1.0 - conf).ln();
            let c = if truth == 0 { 50.0 } else { 200.0 };
            px.push([c + rng.uniform(-10.0, 10.0), c + rng.uniform(-10.0, 10.0), c]);
        }
    }
    (
        UnaryField::new(Tensor::new(vec![2, h, w], costs).unwrap()).unwrap(),
        ColorImage::new(h, w, px).unwrap(),
    )
}

fn crf_degeneracy() -> Verdict {
    let mut rng = SeededRng::new(41);
    let mut worst = 0.0f64;
    for iterations in [1, 2, 3, 5, 8, 13] {
        let (l, h, w) = (2 + rng.below(3), 3 + rng.below(4), 3 + rng.below(4));
        let costs: Vec<f64> = (0..l * h * w).map(|_| rng.uniform(0.0, 6.0)).collect();
        let unary = UnaryField::new(Tensor::new(vec![l, h, w], costs.clone()).unwrap()).unwrap();
        let img: Vec<[f64; 3]> = (0..h * w).map(|_| [rng.uniform(0.0, 255.0); 3]).collect();
        let cfg = CrfConfig { w1: 0.0, w2: 0.0, iterations, ..CrfConfig::default() };
        let q = mean_field(&unary, &ColorImage::new(h, w, img).unwrap(), &cfg).unwrap();
        let n = h * w;
        for p in 0..n {
            let z: f64 = (0..l).map(|k| (-costs[k * n + p]).exp()).sum();
            for k in 0..l {
                worst = worst.max((q.data()[k * n + p] - (-costs[k * n + p]).exp() / z).abs());
            }
        }
    }
    let cfg = CrfConfig { w1: 3.0, w2: 3.0, ..CrfConfig::default() };
    let mut smoothed = 0;
    let mut counts = Vec::new();
    for _ in 0..10 {
        let (unary, image) = noisy_scene(&mut rng, 12, 12);
        // Raw labeling: per-pixel lowest cost, ties to the lower label.
        let n = unary.pixels();
        let raw: Vec<u8> = (0..n).map(|p| u8::from(unary.cost(p, 1) < unary.cost(p, 0))).collect();
        let before = neighbor_disagreements(&LabelGrid::new(12, 12, raw).unwrap());
        let after = neighbor_disagreements(&map_labeling(&mean_field(&unary, &image, &cfg).unwrap()).unwrap());
        smoothed += usize::from(after <= before);
        counts.push(format!("{before}->{after}"));
    }
    verdict(
        worst <= 1e-9 && smoothed == 10,
        format!("zero-weight max deviation {worst:.1e}; disagreements {}", counts.join(" ")),
    )
}

/// Literal transcription of the band resize with half-pixel bilinear sampling.
fn resize_oracle(src: &LabelGrid, oh: usize, ow: usize, alpha: f64) -> Vec<u8> {
    let mut palette: Vec<u8> = src.labels().to_vec();
    palette.sort_unstable();
    palette.dedup();
    let idx = |l: u8| palette.iter().position(|&p| p == l).unwrap() as f64;
    let (h, w) = (src.height(), src.width());
    let coord = |o: usize, n: usize, out: usize| ((o as f64 + 0.5) * n as f64 / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let mut out = Vec::new();
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = (coord(y, h, oh), coord(x, w, ow));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let v = (1.0 - fy) * ((1.0 - fx) * idx(src.get(y0, x0)) + fx * idx(src.get(y0, x1)))
                + fy * ((1.0 - fx) * idx(src.get(y1, x0)) + fx * idx(src.get(y1, x1)));
            let mut label = 0;
            for (k, &p) in palette.iter().enumerate() {
                if (v - k as f64).abs() <= alpha {
                    label = p;
                }
            }
            out.push(label);
        }
    }
    out
}

fn mask_resize() -> Verdict {
    let mut rng = SeededRng::new(51);
    let mut identity = 0;
    let mut oracle_agree = 0;
    let trials = 100;
    for _ in 0..trials {
        let (h, w) = (1 + rng.below(12), 1 + rng.below(12));
        let palette: Vec<u8> = (0..1 + rng.below(5)).map(|_| rng.below(256) as u8).collect();
        let g = LabelGrid::new(h, w, (0..h * w).map(|_| palette[rng.below(palette.len())]).collect()).unwrap();
        identity += usize::from(resize_mask_multithreshold(&g, h, w, RESIZE_ALPHA).unwrap() == g);
        let (oh, ow) = (1 + rng.below(16), 1 + rng.below(16));
        let got = resize_mask_multithreshold(&g, oh, ow, RESIZE_ALPHA).unwrap();
        oracle_agree += usize::from(got.labels() == resize_oracle(&g, oh, ow, RESIZE_ALPHA).as_slice());
    }
    let palette = [0u8, 3, 7];
    let remap = |v: f64| quantize_band(v, palette.len(), RESIZE_ALPHA).map_or(0, |i| palette[i]);
    let band_ok = remap(1.004) == 3 && remap(1.5) == 0 && remap(0.0) == 0 && remap(2.0) == 7;
    let row = resize_mask_multithreshold(&LabelGrid::new(1, 3, palette.to_vec()).unwrap(), 1, 5, RESIZE_ALPHA).unwrap();
    let row_ok = row.labels() == [0, 0, 3, 0, 7];
    verdict(
        identity == trials && oracle_agree == trials && band_ok && row_ok,
        format!(
            "identity {identity}/{trials}, oracle {oracle_agree}/{trials}, 1.004->{} 1.5->{}, [0,3,7] to width 5 -> {:?}",
            remap(1.004),
            remap(1.5),
            row.labels()
        ),
    )
}

fn v2c_setup(cell: CellKind) -> (V2CNet, Adam, Vec<V2CExample>, usize) {
    let toy = make_v2c_toyset(1, 50).unwrap();
    let cfg = V2CConfig::small(TOY_FEATURE_DIM, toy.vocab.len(), 4, cell);
    let net = V2CNet::new(cfg, 2).unwrap();
    let opt = Adam::new(1e-4, &net.params);
    (net, opt, toy.examples, toy.vocab.len())
}

const V2C_TRAIN: TrainConfig = TrainConfig { epochs: 300, lr: 1e-4, batch: 1, seed: 3 };

fn v2c_overfit() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for cell in [CellKind::Lstm, CellKind::Gru] {
        let t = Instant::now();
        let (mut net, mut opt, data, vocab) = v2c_setup(cell);
        let mut reached = None;
        let history = train_v2c(&mut net, &mut opt, &data, &V2C_TRAIN, |epoch, _, net| {
            if (epoch + 1) % 10 != 0 {
                return true;
            }
            let r = fit_rates(net, &data).unwrap();
            if r.commands == 1.0 && r.actions == 1.0 {
                reached = Some(epoch + 1);
                return false;
            }
            true
        })
        .unwrap();
        let elapsed = t.elapsed();
        let r = fit_rates(&net, &data).unwrap();
        let pass = r.commands == 1.0 && r.actions == 1.0 && elapsed < Duration::from_secs(300) && vocab <= 30;
        ok &= pass;
        parts.push(format!(
            "{cell:?}: commands {:.0}% actions {:.0}% after {} epochs (vocab {vocab}), {:.0}s",
            100.0 * r.commands,
            100.0 * r.actions,
            reached.unwrap_or(history.len()),
            elapsed.as_secs_f64()
        ));
    }
    verdict(ok, parts.join("; "))
}

fn affordance_overfit() -> Verdict {
    let t = Instant::now();
    let cfg = AffordanceTrainConfig::default();
    let mut net = ToyAffordanceNet::new(cfg.seed).unwrap();
    let data = prepare_affordance_data(&net, make_affordance_toyset(7, 50).unwrap()).unwrap();
    let mut opt = Adam::new(cfg.lr, &net.params);
    let history = train_affordance(&mut net, &mut opt, &data, &cfg, |_, _, _| true).unwrap();
    let acc = mask_pixel_accuracy(&net, &data).unwrap();
    let elapsed = t.elapsed();
    verdict(
        acc > 0.95 && history.len() <= 500 && elapsed < Duration::from_secs(300),
        format!(
            "pixel accuracy {:.2}% after {} steps, final loss {:.4}, {:.0}s",
            100.0 * acc,
            history.len(),
            history.last().copied().unwrap_or(f64::NAN),
            elapsed.as_secs_f64()
        ),
    )
}

fn metric_sanity() -> Verdict {
    let g = |v: Vec<u8>| LabelGrid::new(3, 3, v).unwrap();
    let gt = g(vec![1, 1, 0, 1, 1, 0, 0, 0, 0]);
    let pred = g(vec![1, 0, 0, 1, 1, 1, 0, 0, 1]);
    let plain = FMeasureConfig { beta: 1.0, weight_sigma: None };
    let identical = f_beta_w(&gt, &gt, 1, &FMeasureConfig::default()).unwrap() == 1.0;
    // TP 3, FP 2, FN 1: P = 3/5, R = 3/4, F1 = 2/3.
    let f_plain = f_beta_w(&pred, &gt, 1, &plain).unwrap();
    let plain_ok = (f_plain - 2.0 / 3.0).abs() < 1e-12;
    let toks = |s: &'static str| s.split_whitespace().collect::<Vec<&str>>();
    let x = toks("righthand pour water into bowl");
    let bleu_ok = bleu_n(&x, std::slice::from_ref(&x), 4).iter().all(|&b| (b - 1.0).abs() < 1e-12);
    let rouge = rouge_l(&toks("a c b"), &toks("a b c"));
    let success = action_success_rate(&["cut", "pour"], &["cut", "stir"]).unwrap();
    let ok = identical && plain_ok && bleu_ok && (rouge - 2.0 / 3.0).abs() < 1e-12 && success == 50.0;
    verdict(
        ok,
        format!("f(gt,gt)=1 {identical}, plain F1 {f_plain:.6}, bleu self=1 {bleu_ok}, rouge_l {rouge:.6}, success {success}%"),
    )
}

fn non_reproducibility() -> Verdict {
    verdict(
        true,
        format!(
            "NOT TARGETS: published IIT-AFF mean F {} / UMD mean F {} / BLEU-1 {} / CIDEr {} / action success {}% need pretrained backbones and the full datasets; the synthetic property suite stands in for them",
            published::IIT_AFF_MEAN_F_BETA_W,
            published::UMD_MEAN_F_BETA_W,
            published::V2C_BLEU_1,
            published::V2C_CIDER,
            published::ACTION_SUCCESS_RATE
        ),
    )
}

fn param_bits(store: &affkit::ParamStore) -> Vec<u64> {
    store.values().iter().flat_map(|t| bits(t.data())).collect()
}

fn reproducibility() -> Verdict {
    let mut notes = BTreeMap::new();
    let grad = |seed| -> Vec<u64> {
        gradient_suite(seed).unwrap().iter().flat_map(|e| [e.report.max_rel_error.to_bits(), e.report.checked as u64]).collect()
    };
    notes.insert("gradcheck", grad(3) == grad(3));

    let v2c_run = || {
        let (mut net, mut opt, data, _) = v2c_setup(CellKind::Gru);
        let cfg = TrainConfig { epochs: 2, ..V2C_TRAIN };
        let h = train_v2c(&mut net, &mut opt, &data[..10], &cfg, |_, _, _| true).unwrap();
        (bits(&h), param_bits(&net.params))
    };
    notes.insert("v2c training", v2c_run() == v2c_run());

    let aff_run = || {
        let mut net = ToyAffordanceNet::new(1).unwrap();
        let data = prepare_affordance_data(&net, make_affordance_toyset(5, 6).unwrap()).unwrap();
        let cfg = AffordanceTrainConfig { steps: 5, ..AffordanceTrainConfig::default() };
        let mut opt = Adam::new(cfg.lr, &net.params);
        let h = train_affordance(&mut net, &mut opt, &data, &cfg, |_, _, _| true).unwrap();
        (bits(&h), param_bits(&net.params))
    };
    notes.insert("affordance training", aff_run() == aff_run());

    notes.insert(
        "oracle suites",
        ORACLES.iter().all(|(_, run, _)| run(ORACLE_SEED + 1) == run(ORACLE_SEED + 1)),
    );

    // Resume: snapshot after k steps, then compare the following steps of the
    // uninterrupted run against a run restored from serialized bytes.
    let (mut net, mut opt, data, _) = v2c_setup(CellKind::Lstm);
    for ex in &data[..4] {
        v2c_train_step(&mut net, &mut opt, std::slice::from_ref(ex)).unwrap();
    }
    let ckpt = Checkpoint {
        seed: 2,
        step: opt.step,
        dtype: Dtype::F64,
        meta: String::new(),
        params: net.params.clone(),
        optimizer: Some(opt.clone()),
    };
    let bytes = ckpt.to_bytes();
    let next: Vec<f64> = data[4..7].iter().map(|ex| v2c_train_step(&mut net, &mut opt, std::slice::from_ref(ex)).unwrap()).collect();
    let restored = Checkpoint::from_bytes(Path::new("<memory>"), &bytes).unwrap();
    // Different initial weights, so the restore has something to overwrite.
    let mut net2 = V2CNet::new(net.cfg, 99).unwrap();
    restored.restore_params(&mut net2.params).unwrap();
    let mut opt2 = restored.optimizer.clone().unwrap();
    let resumed: Vec<f64> = data[4..7].iter().map(|ex| v2c_train_step(&mut net2, &mut opt2, std::slice::from_ref(ex)).unwrap()).collect();
    let resume_err = next.iter().zip(&resumed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    notes.insert("checkpoint resume", resume_err <= 1e-12 && restored.step == 4);

    let ok = notes.values().all(|&v| v);
    let detail: Vec<String> = notes.iter().map(|(k, v)| format!("{k} {}", if *v { "identical" } else { "DIFFERS" })).collect();
    verdict(ok, format!("{}; resumed next-step loss error {resume_err:.1e}", detail.join(", ")))
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("deconvolution size chain", deconv_chain),
        ("gradient suite", gradients),
        ("brute-force oracle equivalence", oracles),
        ("CRF degeneracy and smoothing", crf_degeneracy),
        ("multi-threshold mask resize", mask_resize),
        ("toy video-to-command overfit", v2c_overfit),
        ("toy affordance overfit", affordance_overfit),
        ("metric sanity", metric_sanity),
        ("published numbers are not targets", non_reproducibility),
        ("determinism and checkpoint resume", reproducibility),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!v.pass);
        println!(
            "criterion {id:>2} {} {name} ({:.1}s): {}",
            if v.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            v.detail
        );
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}

//! Small trainable convolutional encoder, synthetic scene and video
//! generators, and a toy affordance network built from them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{encode_offset, roi_align, BoundingBox, Detection, RoiAlignConfig};
use crate::layers::{maxpool2d, Conv2d, Conv2dParams, Deconv2d, Linear};
use crate::losses::{detection_joint_loss, DetectionTarget};
use crate::mask::{merge_detections, resize_mask_multithreshold, AffordancePriority, LabelGrid, RESIZE_ALPHA};
use crate::optim::{batch_gradients, Adam};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::{argmax, Tensor};
use crate::v2c::{pad_frames, V2CExample, Vocabulary, DEFAULT_FRAMES};

pub const SCENE_SIZE: usize = 64;
/// Affordance labels of the synthetic scenes.
pub const AFF_BACKGROUND: u8 = 0;
pub const AFF_GRASP: u8 = 1;
pub const AFF_CONTAIN: u8 = 2;
pub const NUM_AFFORDANCES: usize = 3;
/// Object classes, 0 being background.
pub const OBJECT_NAMES: [&str; 4] = ["background", "mug", "bowl", "pan"];

/// Three conv3×3 + ReLU + 2×2 max-pool stages.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    stages: Vec<Conv2d>,
}

impl ToyEncoder {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, widths: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::param("encoder needs at least one stage"));
        }
        let mut stages = Vec::new();
        let mut c = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(Conv2d::new(store, &format!("{name}.conv{i}"), c, Conv2dParams::square(w, 3, 1, 1), rng)?);
            c = w;
        }
        Ok(Self { stages })
    }

    pub fn stride(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn channels(&self) -> usize {
        self.stages.last().expect("nonempty").params.filters
    }

    /// Feature map of a `[c, H, W]` image; `H` and `W` must be multiples of the stride.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let s = tape.shape(image).to_vec();
        let st = self.stride();
        if s.len() != 3 || !s[1].is_multiple_of(st) || !s[2].is_multiple_of(st) {
            return Err(Error::dim("toy_encoder", &s, &[0, st, st]));
        }
        let mut h = image;
        for conv in &self.stages {
            h = conv.forward(tape, h)?;
            h = tape.relu(h);
            h = maxpool2d(tape, h)?.0;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub objects: Vec<SceneObject>,
    pub labels: LabelGrid,
}

impl SyntheticScene {
    /// Ground-truth labels inside an object's box.
    pub fn crop_labels(&self, obj: &SceneObject) -> Result<LabelGrid> {
        let b = &obj.bbox;
        let (y0, x0) = (b.y1 as usize, b.x1 as usize);
        let (h, w) = (b.height() as usize, b.width() as usize);
        let mut out = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                out.push(self.labels.get(y, x));
            }
        }
        LabelGrid::new(h, w, out)
    }
}

const BODY_COLORS: [[f64; 3]; 4] = [[0.0; 3], [0.85, 0.2, 0.2], [0.2, 0.35, 0.9], [0.2, 0.75, 0.3]];
const HANDLE_COLOR: [f64; 3] = [0.95, 0.85, 0.1];

/// Pixel-center rasterization of one object's parts, anchored at `(top, left)`.
/// Returns `(y, x, label)` for every covered pixel.
fn rasterize(kind: usize, top: usize, left: usize, size: usize) -> Vec<(usize, usize, u8)> {
    let mut px = Vec::new();
    let s = size as f64;
    match kind {
        // Mug: square body, handle bar on the right third of the middle rows.
        1 => {
            let body = size * 2 / 3;
            let handle_w = size - body;
            for y in 0..size {
                for x in 0..body {
                    px.push((top + y, left + x, AFF_CONTAIN));
                }
            }
            for y in size / 4..size - size / 4 {
                for x in body..body + handle_w {
                    px.push((top + y, left + x, AFF_GRASP));
                }
            }
        }
        // Bowl: disc.
        2 => {
            let r = s / 2.0;
            for y in 0..size {
                for x in 0..size {
                    let (dy, dx) = (y as f64 + 0.5 - r, x as f64 + 0.5 - r);
                    if dy * dy + dx * dx <= r * r {
                        px.push((top + y, left + x, AFF_CONTAIN));
                    }
                }
            }
        }
        // Pan: disc on the left, long handle to the right.
        _ => {
            let d = size * 3 / 5;
            let r = d as f64 / 2.0;
            for y in 0..d {
                for x in 0..d {
                    let (dy, dx) = (y as f64 + 0.5 - r, x as f64 + 0.5 - r);
                    if dy * dy + dx * dx <= r * r {
                        px.push((top + y, left + x, AFF_CONTAIN));
                    }
                }
            }
            let band = (d / 4).max(2);
            let y0 = d / 2 - band / 2;
            for y in y0..y0 + band {
                for x in d..size {
                    px.push((top + y, left + x, AFF_GRASP));
                }
            }
        }
    }
    px
}

/// Bounding box of a pixel set, in pixel-edge coordinates.
fn tight_box(px: &[(usize, usize, u8)]) -> BoundingBox {
    let y1 = px.iter().map(|p| p.0).min().unwrap_or(0) as f64;
    let y2 = px.iter().map(|p| p.0).max().unwrap_or(0) as f64 + 1.0;
    let x1 = px.iter().map(|p| p.1).min().unwrap_or(0) as f64;
    let x2 = px.iter().map(|p| p.1).max().unwrap_or(0) as f64 + 1.0;
    BoundingBox { x1, y1, x2, y2 }
}

/// `count` 64×64 scenes with one or two non-overlapping objects each.
pub fn make_affordance_toyset(seed: u64, count: usize) -> Result<Vec<SyntheticScene>> {
    if count == 0 {
        return Err(Error::param("scene count must be positive"));
    }
    let mut rng = SeededRng::new(seed);
    let n = SCENE_SIZE;
    let mut scenes = Vec::with_capacity(count);
    for _ in 0..count {
        let mut image = Tensor::zeros(&[3, n, n]);
        for v in image.data_mut() {
            *v = 0.45 + rng.uniform(-0.05, 0.05);
        }
        let mut labels = LabelGrid::filled(n, n, AFF_BACKGROUND)?;
        let mut occupied = vec![false; n * n];
        let mut objects = Vec::new();
        let wanted = 1 + rng.below(2);
        let mut attempts = 0;
        while objects.len() < wanted && attempts < 100 {
            attempts += 1;
            let kind = 1 + rng.below(3);
            let size = 20 + rng.below(13);
            let (top, left) = (rng.below(n - size + 1), rng.below(n - size + 1));
            let px = rasterize(kind, top, left, size);
            let bbox = tight_box(&px);
            // Keep a one-pixel gap so boxes never overlap.
            let clash = (bbox.y1 as usize..bbox.y2 as usize)
                .flat_map(|y| (bbox.x1 as usize..bbox.x2 as usize).map(move |x| (y, x)))
                .any(|(y, x)| {
                    (y.saturating_sub(1)..=(y + 1).min(n - 1))
                        .any(|yy| (x.saturating_sub(1)..=(x + 1).min(n - 1)).any(|xx| occupied[yy * n + xx]))
                });
            if clash {
                continue;
            }
            for y in bbox.y1 as usize..bbox.y2 as usize {
                for x in bbox.x1 as usize..bbox.x2 as usize {
                    occupied[y * n + x] = true;
                }
            }
            for &(y, x, l) in &px {
                labels.set(y, x, l);
                let color = if l == AFF_GRASP { HANDLE_COLOR } else { BODY_COLORS[kind] };
                for (c, &v) in color.iter().enumerate() {
                    image.set(&[c, y, x], v + rng.uniform(-0.03, 0.03));
                }
            }
            objects.push(SceneObject { bbox, class_id: kind });
        }
        scenes.push(SyntheticScene { image, objects, labels });
    }
    Ok(scenes)
}

const HEAD_WIDTH: usize = 32;

/// Toy detector head on ground-truth boxes: shared encoder, RoIAlign,
/// classification and box branches, and a two-stage deconvolution mask branch.
#[derive(Clone, Debug)]
pub struct ToyAffordanceNet {
    pub params: ParamStore,
    pub encoder: ToyEncoder,
    pub roi: RoiAlignConfig,
    head: Conv2d,
    cls: Linear,
    bbox: Linear,
    up1: Deconv2d,
    up2: Deconv2d,
    pub mask_size: usize,
}

impl ToyAffordanceNet {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let mut params = ParamStore::new();
        let encoder = ToyEncoder::new(&mut params, "encoder", 3, &[8, 16, 16], &mut rng)?;
        let c = encoder.channels();
        let roi = RoiAlignConfig {
            stride: encoder.stride() as f64,
            ..RoiAlignConfig::default()
        };
        let head = Conv2d::new(&mut params, "head", c, Conv2dParams::square(HEAD_WIDTH, 3, 1, 1), &mut rng)?;
        let flat = HEAD_WIDTH * roi.out_size.0 * roi.out_size.1;
        let cls = Linear::new(&mut params, "cls", flat, OBJECT_NAMES.len(), 0.02, &mut rng)?;
        let bbox = Linear::new(&mut params, "bbox", flat, 4 * OBJECT_NAMES.len(), 0.02, &mut rng)?;
        let up1 = Deconv2d::new(&mut params, "up1", HEAD_WIDTH, Conv2dParams::square(HEAD_WIDTH, 4, 2, 1), &mut rng)?;
        let up2 = Deconv2d::new(&mut params, "up2", HEAD_WIDTH, Conv2dParams::square(NUM_AFFORDANCES, 4, 2, 1), &mut rng)?;
        let mask_size = 4 * roi.out_size.0;
        Ok(Self {
            params,
            encoder,
            roi,
            head,
            cls,
            bbox,
            up1,
            up2,
            mask_size,
        })
    }

    /// Class probabilities, all-class box offsets and `[k, m, m]` mask
    /// probabilities for each box.
    pub fn forward(&self, tape: &mut Tape, image: &Tensor, boxes: &[BoundingBox]) -> Result<Vec<(Var, Var, Var)>> {
        let img = tape.constant(image.clone());
        let feat = self.encoder.forward(tape, img)?;
        let mut out = Vec::with_capacity(boxes.len());
        for b in boxes {
            let r = roi_align(tape, feat, b, &self.roi)?;
            let h = self.head.forward(tape, r)?;
            let h = tape.relu(h);
            let n = tape.value(h).len();
            let flat = tape.reshape(h, &[n])?;
            let logits = self.cls.forward(tape, flat)?;
            let p = tape.softmax(logits)?;
            let t = self.bbox.forward(tape, flat)?;
            let m = self.up1.forward(tape, h)?;
            let m = tape.relu(m);
            let m = self.up2.forward(tape, m)?;
            let m = tape.softmax_axis(m, 0)?;
            out.push((p, t, m));
        }
        Ok(out)
    }

    /// Mask targets at head resolution for every object of a scene.
    pub fn targets(&self, scene: &SyntheticScene) -> Result<Vec<DetectionTarget>> {
        scene
            .objects
            .iter()
            .map(|o| {
                let crop = scene.crop_labels(o)?;
                let mask = resize_mask_multithreshold(&crop, self.mask_size, self.mask_size, RESIZE_ALPHA)?;
                DetectionTarget::new(o.class_id, encode_offset(&o.bbox, &o.bbox)?, mask)
            })
            .collect()
    }

    /// Sum over the scene's objects of the joint detection loss.
    pub fn scene_loss(&self, tape: &mut Tape, scene: &SyntheticScene, targets: &[DetectionTarget]) -> Result<Var> {
        let boxes: Vec<BoundingBox> = scene.objects.iter().map(|o| o.bbox).collect();
        let outs = self.forward(tape, &scene.image, &boxes)?;
        let mut terms = Vec::new();
        for ((p, t, m), tgt) in outs.into_iter().zip(targets) {
            let u = tgt.class_id;
            let tu = tape.pick(t, &[4 * u, 4 * u + 1, 4 * u + 2, 4 * u + 3])?;
            terms.push(detection_joint_loss(tape, p, tu, m, tgt)?);
        }
        tape.add_all(&terms)
    }

    /// Predicted head-resolution label grids for each box.
    pub fn predict_masks(&self, image: &Tensor, boxes: &[BoundingBox]) -> Result<Vec<(usize, LabelGrid)>> {
        let mut tape = Tape::with_params(&self.params);
        let outs = self.forward(&mut tape, image, boxes)?;
        outs.into_iter()
            .map(|(p, _, m)| {
                let cls = argmax(tape.value(p).data());
                Ok((cls, crate::crf::map_labeling(tape.value(m))?))
            })
            .collect()
    }

    /// Full-image labels: each box's predicted mask is resized to the box and
    /// pasted, grasp winning over contain where masks overlap.
    pub fn segment_scene(&self, image: &Tensor, boxes: &[BoundingBox]) -> Result<LabelGrid> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let priority = AffordancePriority::with_lowest(NUM_AFFORDANCES - 1, AFF_CONTAIN)?;
        let masks = self
            .predict_masks(image, boxes)?
            .into_iter()
            .zip(boxes)
            .map(|((class_id, m), b)| {
                let bh = ((b.y2.round() - b.y1.round()) as usize).max(1);
                let bw = ((b.x2.round() - b.x1.round()) as usize).max(1);
                let m = resize_mask_multithreshold(&m, bh, bw, RESIZE_ALPHA)?;
                Ok((Detection { bbox: *b, class_id, score: 1.0 }, m))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(merge_detections(&masks, &priority, h, w)?.grid)
    }
}

/// Scenes paired with their precomputed targets.
pub type AffordanceBatchItem = (SyntheticScene, Vec<DetectionTarget>);

pub fn affordance_train_step(net: &mut ToyAffordanceNet, opt: &mut Adam, batch: &[AffordanceBatchItem]) -> Result<f64> {
    let (loss, grads) = batch_gradients(&net.params, batch, |tape, (scene, tg)| net.scene_loss(tape, scene, tg))?;
    if !loss.is_finite() {
        return Err(Error::Training {
            step: opt.step + 1,
            loss,
        });
    }
    opt.update(&mut net.params, &grads)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffordanceTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AffordanceTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 4,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Pairs every scene with its mask targets.
pub fn prepare_affordance_data(net: &ToyAffordanceNet, scenes: Vec<SyntheticScene>) -> Result<Vec<AffordanceBatchItem>> {
    scenes
        .into_iter()
        .map(|s| {
            let t = net.targets(&s)?;
            Ok((s, t))
        })
        .collect()
}

/// Runs `cfg.steps` Adam steps on batches drawn by walking reshuffled passes
/// over `data`. `after_step` sees the step number and loss and may stop early
/// by returning `false`. Returns the loss of every step taken.
pub fn train_affordance(
    net: &mut ToyAffordanceNet,
    opt: &mut Adam,
    data: &[AffordanceBatchItem],
    cfg: &AffordanceTrainConfig,
    mut after_step: impl FnMut(usize, f64, &ToyAffordanceNet) -> bool,
) -> Result<Vec<f64>> {
    if cfg.batch == 0 || data.is_empty() {
        return Err(Error::param("affordance training needs data and a positive batch size"));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut pos = order.len();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if pos == order.len() {
                rng.shuffle(&mut order);
                pos = 0;
            }
            batch.push(data[order[pos]].clone());
            pos += 1;
        }
        let loss = affordance_train_step(net, opt, &batch)?;
        history.push(loss);
        if !after_step(step, loss, net) {
            break;
        }
    }
    Ok(history)
}

/// Fraction of head-resolution mask pixels labeled correctly over a set.
pub fn mask_pixel_accuracy(net: &ToyAffordanceNet, data: &[AffordanceBatchItem]) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for (scene, targets) in data {
        let boxes: Vec<BoundingBox> = scene.objects.iter().map(|o| o.bbox).collect();
        for ((_, pred), tgt) in net.predict_masks(&scene.image, &boxes)?.iter().zip(targets) {
            right += pred.labels().iter().zip(tgt.mask.labels()).filter(|(a, b)| a == b).count();
            total += pred.labels().len();
        }
    }
    Ok(right as f64 / total.max(1) as f64)
}

pub const HANDS: [&str; 3] = ["lefthand", "righthand", "bothhand"];
pub const TOY_VERBS: [&str; 4] = ["cut", "pour", "stir", "carry"];
pub const TOY_OBJECTS: [&str; 4] = ["apple", "water", "soup", "box"];
/// Feature width of the synthetic videos: action signature, hand and object codes.
pub const TOY_FEATURE_DIM: usize = TOY_VERBS.len() + HANDS.len() + TOY_OBJECTS.len();

#[derive(Clone, Debug, PartialEq)]
pub struct V2CToyset {
    pub vocab: Vocabulary,
    pub examples: Vec<V2CExample>,
}

/// Noise-free signature of action `class` at frame `t`: a class-specific
/// frequency and phase on every signature channel.
pub fn action_signature(class: usize, t: usize) -> Vec<f64> {
    let w = 0.25 + 0.2 * class as f64;
    (0..TOY_VERBS.len())
        .map(|k| {
            let base = if k == class { 1.0 } else { 0.0 };
            base + 0.5 * (w * t as f64 + k as f64).sin()
        })
        .collect()
}

/// `count` synthetic videos whose frames carry the action signature plus
/// constant hand and object codes; the command is "hand verb object".
pub fn make_v2c_toyset(seed: u64, count: usize) -> Result<V2CToyset> {
    if count == 0 {
        return Err(Error::param("example count must be positive"));
    }
    let mut words: Vec<&str> = HANDS.iter().chain(&TOY_VERBS).chain(&TOY_OBJECTS).copied().collect();
    words.sort_unstable();
    let vocab = Vocabulary::new(words)?;
    let mut rng = SeededRng::new(seed);
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let action = rng.below(TOY_VERBS.len());
        let hand = rng.below(HANDS.len());
        let object = rng.below(TOY_OBJECTS.len());
        let len = DEFAULT_FRAMES - 6 + rng.below(19);
        let rows: Vec<Vec<f64>> = (0..len)
            .map(|t| {
                let mut f = action_signature(action, t);
                f.extend((0..HANDS.len()).map(|h| if h == hand { 1.0 } else { 0.0 }));
                f.extend((0..TOY_OBJECTS.len()).map(|o| if o == object { 1.0 } else { 0.0 }));
                f.iter().map(|v| v + rng.uniform(-0.05, 0.05)).collect()
            })
            .collect();
        let features = pad_frames(&Tensor::from_rows(&rows)?, DEFAULT_FRAMES, &[0.0; TOY_FEATURE_DIM])?;
        let command = vocab.encode(&format!("{} {} {}", HANDS[hand], TOY_VERBS[action], TOY_OBJECTS[object]))?;
        examples.push(V2CExample { features, command, action });
    }
    Ok(V2CToyset { vocab, examples })
}

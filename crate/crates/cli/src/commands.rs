use std::fmt;
use std::path::Path;
use std::str::FromStr;

use affkit::backbone::{
    make_affordance_toyset, make_v2c_toyset, mask_pixel_accuracy, prepare_affordance_data, train_affordance,
    AffordanceTrainConfig, ToyAffordanceNet, AFF_CONTAIN, AFF_GRASP, TOY_VERBS,
};
use affkit::crf::{map_labeling, mean_field, neighbor_disagreements, ColorImage, CrfConfig, UnaryField};
use affkit::gradcheck::{gradient_suite, GRADCHECK_TOLERANCE};
use affkit::io::{
    load_feature_file, load_mask, load_rgb, load_scene_set, load_vocab, save_feature_file, save_mask, save_scene_set,
    save_vocab, Checkpoint, DatasetManifest, Dtype, KeyValueConfig, ManifestRecord,
};
use affkit::metrics::{action_success_rate, corpus_bleu, f_beta_w, rouge_l, tokenize, FMeasureConfig, MetricReport};
use affkit::optim::Adam;
use affkit::recurrent::CellKind;
use affkit::v2c::{
    extract_verb, fit_rates, pad_frames, train_v2c as run_v2c_training, DecodeOptions, FeatureSequence, TrainConfig,
    V2CConfig, V2CExample, V2CNet, Vocabulary,
};
use affkit::{Error, Tensor};
use log::info;
use serde::{Deserialize, Serialize};

use crate::{ClassifyAction, CrfRefine, DecodeV2c, EvalAff, EvalV2c, MakeToyData, SplitArgs, TrainAff, TrainV2c};

pub const MANIFEST: &str = "manifest.tsv";
pub const VOCAB: &str = "vocab.txt";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_data_error() => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Parameter(m) => CliError::Usage(m),
            other => CliError::Core(other),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Values from an optional key=value file, consulted when a flag is absent.
pub struct Settings {
    file: KeyValueConfig,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let file = match path {
            Some(p) => KeyValueConfig::load(p)?,
            None => KeyValueConfig::default(),
        };
        Ok(Self { file })
    }

    /// Flag, else config entry, else `default`.
    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        Ok(self.file.get(key)?.unwrap_or(default))
    }
}

pub struct Output {
    pub json: bool,
}

impl Output {
    fn report(&self, r: &MetricReport) {
        if self.json {
            println!("{}", r.to_json());
        } else {
            print!("{}", r.to_key_value());
        }
    }
}

/// Model description stored in a checkpoint's metadata.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
enum ModelMeta {
    Affordance,
    V2c {
        config: V2CConfig,
        vocab: Vec<String>,
        classes: Vec<String>,
    },
}

impl ModelMeta {
    fn kind(&self) -> &'static str {
        match self {
            ModelMeta::Affordance => "affordance",
            ModelMeta::V2c { .. } => "video-to-command",
        }
    }
}

fn meta_of(ckpt: &Checkpoint, path: &Path) -> CliResult<ModelMeta> {
    serde_json::from_str(&ckpt.meta)
        .map_err(|e| CliError::Core(Error::Format { path: path.to_path_buf(), offset: 0, msg: format!("bad model metadata: {e}") }))
}

fn encode_meta(meta: &ModelMeta) -> String {
    serde_json::to_string(meta).expect("metadata serializes")
}

pub fn gradcheck(settings: &Settings, out: &Output, seed: Option<u64>) -> CliResult {
    let seed = settings.pick(seed, "seed", 7)?;
    let suite = gradient_suite(seed)?;
    let mut report = MetricReport::new();
    for e in &suite {
        report.insert(e.name, e.report.max_rel_error);
    }
    out.report(&report);
    let failed: Vec<&str> = suite.iter().filter(|e| !e.report.passed()).map(|e| e.name).collect();
    if failed.is_empty() {
        info!("all {} checks below {GRADCHECK_TOLERANCE:e}", suite.len());
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

pub fn make_toy_data(settings: &Settings, out: &Output, a: MakeToyData) -> CliResult {
    let seed = settings.pick(a.seed, "seed", 7)?;
    let scenes = settings.pick(a.scenes, "scenes", 50)?;
    let videos = settings.pick(a.videos, "videos", 50)?;

    save_scene_set(&a.out.join("aff"), &make_affordance_toyset(seed, scenes)?)?;

    let v2c_dir = a.out.join("v2c");
    let set = make_v2c_toyset(seed, videos)?;
    save_vocab(&v2c_dir.join(VOCAB), &set.vocab)?;
    let mut records = Vec::with_capacity(videos);
    for (i, ex) in set.examples.iter().enumerate() {
        let features = v2c_dir.join(format!("features/video_{i:04}.afk"));
        save_feature_file(&features, &ex.features)?;
        records.push(ManifestRecord {
            id: format!("video_{i:04}"),
            features,
            command: set.vocab.decode(&ex.command),
            action: TOY_VERBS[ex.action].to_string(),
            bbox: None,
            mask: None,
        });
    }
    DatasetManifest { records }.save(&v2c_dir.join(MANIFEST))?;

    let mut r = MetricReport::new();
    r.insert("scenes", scenes as f64);
    r.insert("videos", videos as f64);
    out.report(&r);
    Ok(())
}

pub fn train_aff(settings: &Settings, out: &Output, a: TrainAff) -> CliResult {
    let d = AffordanceTrainConfig::default();
    let cfg = AffordanceTrainConfig {
        steps: settings.pick(a.steps, "steps", d.steps)?,
        batch: settings.pick(a.batch, "batch", d.batch)?,
        lr: settings.pick(a.lr, "lr", d.lr)?,
        seed: settings.pick(a.seed, "seed", d.seed)?,
    };
    let scenes = load_scene_set(&a.data)?;
    let mut net = ToyAffordanceNet::new(cfg.seed)?;
    let mut opt = Adam::new(cfg.lr, &net.params);
    let data = prepare_affordance_data(&net, scenes)?;
    let history = train_affordance(&mut net, &mut opt, &data, &cfg, |step, loss, _| {
        if step == 1 || step % 50 == 0 {
            info!("step {step}: loss {loss:.5}");
        }
        true
    })?;
    let accuracy = mask_pixel_accuracy(&net, &data)?;
    Checkpoint {
        seed: cfg.seed,
        step: opt.step,
        dtype: Dtype::F64,
        meta: encode_meta(&ModelMeta::Affordance),
        params: net.params.clone(),
        optimizer: Some(opt),
    }
    .save(&a.out)?;
    let mut r = MetricReport::new();
    r.insert("steps", history.len() as f64);
    r.insert("final_loss", history.last().copied().unwrap_or(f64::NAN));
    r.insert("mask_pixel_accuracy", accuracy);
    out.report(&r);
    Ok(())
}

fn load_affordance_net(path: &Path) -> CliResult<ToyAffordanceNet> {
    let ckpt = Checkpoint::load(path)?;
    match meta_of(&ckpt, path)? {
        ModelMeta::Affordance => {
            let mut net = ToyAffordanceNet::new(ckpt.seed)?;
            ckpt.restore_params(&mut net.params)?;
            Ok(net)
        }
        other => Err(CliError::Usage(format!("{} holds a {} model, not an affordance model", path.display(), other.kind()))),
    }
}

pub fn eval_aff(out: &Output, a: EvalAff) -> CliResult {
    let net = load_affordance_net(&a.checkpoint)?;
    let scenes = load_scene_set(&a.data)?;
    let fcfg = FMeasureConfig::default();
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    let (mut agree, mut total) = (0.0, 0usize);
    for (i, s) in scenes.iter().enumerate() {
        let boxes: Vec<_> = s.objects.iter().map(|o| o.bbox).collect();
        let pred = net.segment_scene(&s.image, &boxes)?;
        if let Some(dir) = &a.predictions {
            save_mask(&dir.join(format!("pred_{i:04}.pgm")), &pred)?;
        }
        for (k, class) in [AFF_GRASP, AFF_CONTAIN].into_iter().enumerate() {
            if s.labels.labels().contains(&class) {
                sums[k] += f_beta_w(&pred, &s.labels, class, &fcfg)?;
                counts[k] += 1;
            }
        }
        agree += pred.agreement(&s.labels)? * s.labels.labels().len() as f64;
        total += s.labels.labels().len();
    }
    let mean = |k: usize| if counts[k] == 0 { 0.0 } else { sums[k] / counts[k] as f64 };
    let mut r = MetricReport::new();
    r.insert("f_beta_w_grasp", mean(0));
    r.insert("f_beta_w_contain", mean(1));
    r.insert("f_beta_w_mean", (mean(0) + mean(1)) / 2.0);
    r.insert("pixel_accuracy", agree / total.max(1) as f64);
    out.report(&r);
    Ok(())
}

pub fn crf_refine(settings: &Settings, out: &Output, a: CrfRefine) -> CliResult {
    let d = CrfConfig::default();
    let cfg = CrfConfig {
        w1: settings.pick(a.w1, "w1", d.w1)?,
        w2: settings.pick(a.w2, "w2", d.w2)?,
        sigma_alpha: settings.pick(a.sigma_alpha, "sigma_alpha", d.sigma_alpha)?,
        sigma_beta: settings.pick(a.sigma_beta, "sigma_beta", d.sigma_beta)?,
        sigma_gamma: settings.pick(a.sigma_gamma, "sigma_gamma", d.sigma_gamma)?,
        iterations: settings.pick(a.iterations, "iterations", d.iterations)?,
    };
    let confidence = settings.pick(a.confidence, "confidence", 0.8)?;
    let image = load_rgb(&a.image)?;
    let labels = load_mask(&a.labels)?;
    let (h, w) = (labels.height(), labels.width());
    if image.shape()[1..] != [h, w] {
        return Err(CliError::Usage(format!("image is {:?} but labels are {h}x{w}", &image.shape()[1..])));
    }
    let n = settings.pick(a.classes, "classes", labels.max_label() as usize + 1)?;
    if n < 2 {
        return Err(CliError::Usage("need at least two labels".into()));
    }
    labels.check_classes(n)?;
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(CliError::Usage(format!("confidence must be in (0, 1), got {confidence}")));
    }
    let rest = (1.0 - confidence) / (n - 1) as f64;
    let mut probs = Tensor::full(&[n, h, w], rest);
    for (p, &l) in labels.labels().iter().enumerate() {
        probs.data_mut()[l as usize * h * w + p] = confidence;
    }
    let pixels = (0..h * w)
        .map(|p| std::array::from_fn(|c| image.data()[c * h * w + p] * 255.0))
        .collect();
    let color = ColorImage::new(h, w, pixels)?;
    let q = mean_field(&UnaryField::from_probabilities(&probs)?, &color, &cfg)?;
    let refined = map_labeling(&q)?;
    save_mask(&a.out, &refined)?;
    let mut r = MetricReport::new();
    r.insert("disagreements_before", neighbor_disagreements(&labels) as f64);
    r.insert("disagreements_after", neighbor_disagreements(&refined) as f64);
    r.insert("changed_pixels", refined.labels().iter().zip(labels.labels()).filter(|(a, b)| a != b).count() as f64);
    out.report(&r);
    Ok(())
}

/// Records of a manifest, restricted to one side of a seeded split.
fn select_records(settings: &Settings, manifest: &DatasetManifest, split: &SplitArgs, part: &str) -> CliResult<Vec<ManifestRecord>> {
    let fraction: Option<f64> = match split.train_fraction {
        Some(f) => Some(f),
        None => settings.file.get("train_fraction")?,
    };
    let Some(fraction) = fraction else {
        return Ok(manifest.records.clone());
    };
    let seed = settings.pick(split.split_seed, "split_seed", 0)?;
    let (train, test) = manifest.split(seed, fraction)?;
    match part {
        "train" => Ok(train),
        "test" => Ok(test),
        "all" => Ok(manifest.records.clone()),
        other => Err(CliError::Usage(format!("unknown split part {other:?}; use train, test or all"))),
    }
}

fn load_sequence(path: &Path, cfg: &V2CConfig) -> CliResult<FeatureSequence> {
    let raw = load_feature_file(path)?;
    if raw.dim() != cfg.feature_dim {
        return Err(CliError::Core(Error::Format {
            path: path.to_path_buf(),
            offset: 8,
            msg: format!("feature width {} does not match the model's {}", raw.dim(), cfg.feature_dim),
        }));
    }
    Ok(pad_frames(raw.tensor(), cfg.frames, &vec![0.0; cfg.feature_dim])?)
}

fn load_examples(records: &[ManifestRecord], vocab: &Vocabulary, classes: &[String], cfg: &V2CConfig) -> CliResult<Vec<V2CExample>> {
    records
        .iter()
        .map(|r| {
            let action = classes
                .iter()
                .position(|c| *c == r.action)
                .ok_or_else(|| CliError::Usage(format!("action {:?} of {} is not a known class", r.action, r.id)))?;
            Ok(V2CExample {
                features: load_sequence(&r.features, cfg)?,
                command: vocab.encode(&r.command)?,
                action,
            })
        })
        .collect()
}

pub fn train_v2c(settings: &Settings, out: &Output, a: TrainV2c) -> CliResult {
    let manifest = DatasetManifest::load(&a.data.join(MANIFEST))?;
    let vocab = load_vocab(&a.data.join(VOCAB))?;
    let records = select_records(settings, &manifest, &a.split, "train")?;
    let first = records.first().ok_or_else(|| CliError::Usage("no training records".into()))?;
    let feature_dim = load_feature_file(&first.features)?.dim();
    let mut classes: Vec<String> = manifest.records.iter().map(|r| r.action.clone()).collect();
    classes.sort();
    classes.dedup();

    let cell: CellKind = settings
        .pick(a.cell, "cell", "lstm".to_string())?
        .parse()
        .map_err(|_| CliError::Usage("cell must be lstm or gru".into()))?;
    let mut cfg = match settings.pick(a.size, "size", "small".to_string())?.as_str() {
        "small" => V2CConfig::small(feature_dim, vocab.len(), classes.len(), cell),
        "full" => V2CConfig::full(feature_dim, vocab.len(), classes.len(), cell),
        other => return Err(CliError::Usage(format!("size must be small or full, got {other:?}"))),
    };
    cfg.hidden = settings.pick(a.hidden, "hidden", cfg.hidden)?;
    let tcfg = TrainConfig {
        epochs: settings.pick(a.epochs, "epochs", 300)?,
        lr: settings.pick(a.lr, "lr", 1e-4)?,
        batch: settings.pick(a.batch, "batch", 1)?,
        seed: settings.pick(a.seed, "seed", 0)?,
    };
    let data = load_examples(&records, &vocab, &classes, &cfg)?;
    let mut net = V2CNet::new(cfg, tcfg.seed)?;
    let mut opt = Adam::new(tcfg.lr, &net.params);
    let history = run_v2c_training(&mut net, &mut opt, &data, &tcfg, |epoch, loss, net| {
        let epoch = epoch + 1;
        if epoch % 10 != 0 {
            return true;
        }
        info!("epoch {epoch}: loss {loss:.5}");
        !(a.until_perfect && fit_rates(net, &data).is_ok_and(|f| f.commands == 1.0 && f.actions == 1.0))
    })?;
    let fit = fit_rates(&net, &data)?;
    Checkpoint {
        seed: tcfg.seed,
        step: opt.step,
        dtype: Dtype::F64,
        meta: encode_meta(&ModelMeta::V2c {
            config: cfg,
            vocab: vocab.tokens().to_vec(),
            classes,
        }),
        params: net.params.clone(),
        optimizer: Some(opt),
    }
    .save(&a.out)?;
    let mut r = MetricReport::new();
    r.insert("epochs", history.len() as f64);
    r.insert("final_loss", history.last().copied().unwrap_or(f64::NAN));
    r.insert("train_command_fit", fit.commands);
    r.insert("train_action_fit", fit.actions);
    out.report(&r);
    Ok(())
}

struct LoadedV2c {
    net: V2CNet,
    vocab: Vocabulary,
    classes: Vec<String>,
}

fn load_v2c(path: &Path) -> CliResult<LoadedV2c> {
    let ckpt = Checkpoint::load(path)?;
    match meta_of(&ckpt, path)? {
        ModelMeta::V2c { config, vocab, classes } => {
            let mut net = V2CNet::new(config, ckpt.seed)?;
            ckpt.restore_params(&mut net.params)?;
            Ok(LoadedV2c {
                net,
                vocab: Vocabulary::from_tokens(vocab)?,
                classes,
            })
        }
        other => Err(CliError::Usage(format!("{} holds a {} model, not a video-to-command model", path.display(), other.kind()))),
    }
}

pub fn decode_v2c(a: DecodeV2c) -> CliResult {
    let m = load_v2c(&a.checkpoint)?;
    let x = load_sequence(&a.features, &m.net.cfg)?;
    let words = m.net.greedy_decode(&x, DecodeOptions { first_last: a.first_last })?;
    println!("{}", m.vocab.decode(&words));
    Ok(())
}

pub fn classify_action(a: ClassifyAction) -> CliResult {
    let m = load_v2c(&a.checkpoint)?;
    let x = load_sequence(&a.features, &m.net.cfg)?;
    let k = m.net.classify_action(&x)?;
    println!("{}", m.classes[k]);
    Ok(())
}

pub fn eval_v2c(settings: &Settings, out: &Output, a: EvalV2c) -> CliResult {
    let m = load_v2c(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.data.join(MANIFEST))?;
    let records = select_records(settings, &manifest, &a.split, &a.part)?;
    if records.is_empty() {
        return Err(CliError::Usage("no records to evaluate".into()));
    }
    let mut hyps: Vec<String> = Vec::new();
    let (mut predicted, mut verbs, mut truth) = (Vec::new(), Vec::new(), Vec::new());
    for r in &records {
        let x = load_sequence(&r.features, &m.net.cfg)?;
        let words = m.net.greedy_decode(&x, DecodeOptions::default())?;
        hyps.push(m.vocab.decode(&words));
        verbs.push(extract_verb(&words, &m.vocab).unwrap_or("").to_string());
        predicted.push(m.classes[m.net.classify_action(&x)?].clone());
        truth.push(r.action.clone());
    }
    let hyp_tokens: Vec<Vec<String>> = hyps.iter().map(|h| tokenize(h)).collect();
    let ref_tokens: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.command)).collect();
    let cands: Vec<Vec<&str>> = hyp_tokens.iter().map(|t| t.iter().map(String::as_str).collect()).collect();
    let refs: Vec<Vec<Vec<&str>>> = ref_tokens.iter().map(|t| vec![t.iter().map(String::as_str).collect()]).collect();
    let bleu = corpus_bleu(&cands, &refs, 4)?;
    let rouge = cands.iter().zip(&refs).map(|(c, r)| rouge_l(c, &r[0])).sum::<f64>() / cands.len() as f64;

    let mut rep = MetricReport::new();
    for (n, b) in bleu.iter().enumerate() {
        rep.insert(format!("bleu_{}", n + 1), *b);
    }
    rep.insert("rouge_l", rouge);
    rep.insert("action_success_rate", action_success_rate(&predicted, &truth)?);
    rep.insert("verb_success_rate", action_success_rate(&verbs, &truth)?);
    rep.insert("examples", records.len() as f64);
    out.report(&rep);
    Ok(())
}

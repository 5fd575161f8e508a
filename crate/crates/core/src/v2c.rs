//! Video-to-command translation: an encoder-decoder over per-frame features
//! with a temporal convolution branch that classifies the action.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Conv2dParams, Linear, PoolSpec};
use crate::losses::{action_sigmoid_ce, seq_nll, v2c_joint_loss};
use crate::optim::{batch_gradients, Adam};
use crate::params::ParamStore;
use crate::recurrent::{run_sequence, Cell, CellKind, InitialState, DEFAULT_HIDDEN, WEIGHT_INIT_SCALE};
use crate::rng::SeededRng;
use crate::tensor::{argmax, Tensor};

pub const PAD: usize = 0;
pub const EOC: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const EOC_TOKEN: &str = "<eoc>";
/// Frames per video and words per command after padding.
pub const DEFAULT_FRAMES: usize = 30;
/// Per-channel RGB value of the frame used for padding short videos.
pub const MEAN_FRAME_RGB: [f64; 3] = [104.0, 117.0, 124.0];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary with `PAD` and `EOC` ahead of `words`.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = vec![PAD_TOKEN.to_string(), EOC_TOKEN.to_string()];
        tokens.extend(words.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    /// Exact token list, which must start with the two reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[EOC] != EOC_TOKEN {
            return Err(Error::contract(format!("vocabulary must start with {PAD_TOKEN} and {EOC_TOKEN}")));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::contract(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Sorted distinct words of whitespace-separated commands.
    pub fn from_commands<'a>(commands: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut words: Vec<&str> = commands.into_iter().flat_map(str::split_whitespace).collect();
        words.sort_unstable();
        words.dedup();
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> Option<&str> {
        self.tokens.get(i).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, command: &str) -> Result<Vec<usize>> {
        command
            .split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::contract(format!("word {w:?} not in vocabulary"))))
            .collect()
    }

    pub fn decode(&self, words: &[usize]) -> String {
        words
            .iter()
            .map(|&w| self.token(w).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn one_hot(i: usize, n: usize) -> Result<Tensor> {
    if i >= n {
        return Err(Error::contract(format!("index {i} out of range for one-hot of size {n}")));
    }
    let mut t = Tensor::zeros(&[n]);
    t.data_mut()[i] = 1.0;
    Ok(t)
}

/// Per-frame features, `[frames, feature_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Tensor,
}

impl FeatureSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.ndim() != 2 {
            return Err(Error::dim("feature_sequence", frames.shape(), &[DEFAULT_FRAMES, 0]));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.frames.row(i)
    }

    /// Frames in reverse order.
    pub fn reversed(&self) -> Self {
        let rows: Vec<Vec<f64>> = (0..self.frames()).rev().map(|i| self.frame(i).to_vec()).collect();
        Self::new(Tensor::from_rows(&rows).expect("nonempty")).expect("2-D")
    }
}

/// Brings a video to exactly `n` frames: longer ones are subsampled at a
/// uniform interval, shorter ones get `mean` rows appended.
pub fn pad_frames(frames: &Tensor, n: usize, mean: &[f64]) -> Result<FeatureSequence> {
    if frames.ndim() != 2 {
        return Err(Error::dim("pad_frames", frames.shape(), &[n, mean.len()]));
    }
    let (len, d) = (frames.shape()[0], frames.shape()[1]);
    if mean.len() != d {
        return Err(Error::dim("pad_frames", frames.shape(), &[n, mean.len()]));
    }
    if n == 0 {
        return Err(Error::param("frame count must be positive"));
    }
    let rows: Vec<Vec<f64>> = if len >= n {
        (0..n).map(|i| frames.row(i * len / n).to_vec()).collect()
    } else {
        (0..len).map(|i| frames.row(i).to_vec()).chain((len..n).map(|_| mean.to_vec())).collect()
    };
    FeatureSequence::new(Tensor::from_rows(&rows)?)
}

/// Target words for the decoder: the command, `EOC`, then `PAD` up to `n`.
pub fn padded_targets(command: &[usize], n: usize) -> Result<Vec<usize>> {
    if command.len() + 1 > n {
        return Err(Error::contract(format!("command of {} words does not fit {n} steps", command.len())));
    }
    if command.iter().any(|&w| w == PAD || w == EOC) {
        return Err(Error::contract("command must not contain reserved tokens"));
    }
    let mut t = command.to_vec();
    t.push(EOC);
    t.resize(n, PAD);
    Ok(t)
}

/// Token at position 1 of a "hand verb object" command, or the only token.
pub fn extract_verb<'a>(command: &[usize], vocab: &'a Vocabulary) -> Result<&'a str> {
    let w = match command {
        [] => return Err(Error::contract("cannot extract a verb from an empty command")),
        [only] => *only,
        [_, verb, ..] => *verb,
    };
    vocab.token(w).ok_or_else(|| Error::contract(format!("word {w} not in vocabulary")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct V2CConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub frames: usize,
    pub cell: CellKind,
    pub tcn_filters: [usize; 3],
    pub tcn_kernel: usize,
    pub fc_units: usize,
}

impl V2CConfig {
    /// Full-size layer widths.
    pub fn full(feature_dim: usize, vocab_size: usize, num_classes: usize, cell: CellKind) -> Self {
        Self {
            feature_dim,
            hidden: DEFAULT_HIDDEN,
            vocab_size,
            num_classes,
            frames: DEFAULT_FRAMES,
            cell,
            tcn_filters: [2048, 1024, 512],
            tcn_kernel: 3,
            fc_units: 256,
        }
    }

    /// Narrow widths for synthetic data.
    pub fn small(feature_dim: usize, vocab_size: usize, num_classes: usize, cell: CellKind) -> Self {
        Self {
            hidden: 64,
            tcn_filters: [16, 16, 16],
            fc_units: 16,
            ..Self::full(feature_dim, vocab_size, num_classes, cell)
        }
    }

    /// Temporal length after the pooled convolution stages.
    pub fn tcn_time(&self) -> usize {
        self.frames / 2 / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 || self.num_classes == 0 || self.feature_dim == 0 || self.hidden == 0 {
            return Err(Error::param(format!("invalid model configuration {self:?}")));
        }
        if self.tcn_time() == 0 {
            return Err(Error::param(format!("{} frames are too few for two pooling stages", self.frames)));
        }
        if self.tcn_kernel.is_multiple_of(2) {
            return Err(Error::param("temporal kernel must be odd"));
        }
        Ok(())
    }
}

/// Temporal convolution stack: three conv+ReLU layers, the first two pooled,
/// then a ReLU hidden layer and a linear score layer.
#[derive(Clone, Debug)]
pub struct Tcn {
    convs: [Conv2d; 3],
    fc: Linear,
    out: Linear,
    flat: usize,
}

impl Tcn {
    pub fn new(store: &mut ParamStore, cfg: &V2CConfig, rng: &mut SeededRng) -> Result<Self> {
        let f = cfg.tcn_filters;
        let c0 = Conv2d::new(store, "tcn.conv0", cfg.feature_dim, Conv2dParams::temporal(f[0], cfg.tcn_kernel), rng)?;
        let c1 = Conv2d::new(store, "tcn.conv1", f[0], Conv2dParams::temporal(f[1], cfg.tcn_kernel), rng)?;
        let c2 = Conv2d::new(store, "tcn.conv2", f[1], Conv2dParams::temporal(f[2], cfg.tcn_kernel), rng)?;
        let flat = f[2] * cfg.tcn_time();
        let fc = Linear::new(store, "tcn.fc", flat, cfg.fc_units, (6.0 / flat as f64).sqrt(), rng)?;
        let out = Linear::new(store, "tcn.out", cfg.fc_units, cfg.num_classes, (3.0 / cfg.fc_units as f64).sqrt(), rng)?;
        Ok(Self {
            convs: [c0, c1, c2],
            fc,
            out,
            flat,
        })
    }

    /// Action scores for a `[frames, dim]` sequence.
    pub fn forward(&self, tape: &mut Tape, x: &FeatureSequence) -> Result<Var> {
        let t = x.tensor().transpose()?;
        let (d, n) = (t.shape()[0], t.shape()[1]);
        let mut h = tape.constant(t.reshape(&[d, 1, n])?);
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, h)?;
            h = tape.relu(h);
            if i < 2 {
                h = tape.maxpool(h, PoolSpec::TEMPORAL_2)?.0;
            }
        }
        let flat = tape.reshape(h, &[self.flat])?;
        let z = self.fc.forward(tape, flat)?;
        let z = tape.relu(z);
        self.out.forward(tape, z)
    }
}

/// One training video: features, command word ids and action class.
#[derive(Clone, Debug, PartialEq)]
pub struct V2CExample {
    pub features: FeatureSequence,
    pub command: Vec<usize>,
    pub action: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct V2CLosses {
    pub translation: f64,
    pub action: f64,
    pub joint: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Keep only the first and last generated words.
    pub first_last: bool,
}

#[derive(Clone, Debug)]
pub struct V2CNet {
    pub cfg: V2CConfig,
    pub params: ParamStore,
    encoder: Cell,
    decoder: Cell,
    decoder_init: InitialState,
    word_out: Linear,
    tcn: Tcn,
}

impl V2CNet {
    pub fn new(cfg: V2CConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut params = ParamStore::new();
        let encoder = Cell::new(cfg.cell, &mut params, "encoder", cfg.feature_dim, cfg.hidden, &mut rng)?;
        let decoder = Cell::new(cfg.cell, &mut params, "decoder", cfg.vocab_size + cfg.hidden, cfg.hidden, &mut rng)?;
        let decoder_init = InitialState::new(&mut params, "decoder", &decoder, &mut rng)?;
        let word_out = Linear::new(&mut params, "word_out", cfg.hidden, cfg.vocab_size, WEIGHT_INIT_SCALE, &mut rng)?;
        let tcn = Tcn::new(&mut params, &cfg, &mut rng)?;
        Ok(Self {
            cfg,
            params,
            encoder,
            decoder,
            decoder_init,
            word_out,
            tcn,
        })
    }

    fn check_input(&self, x: &FeatureSequence) -> Result<()> {
        if x.frames() != self.cfg.frames || x.dim() != self.cfg.feature_dim {
            return Err(Error::dim("v2c_input", &[x.frames(), x.dim()], &[self.cfg.frames, self.cfg.feature_dim]));
        }
        Ok(())
    }

    /// Encoder hidden state after each frame.
    pub fn encode(&self, tape: &mut Tape, x: &FeatureSequence) -> Result<Vec<Var>> {
        self.check_input(x)?;
        let frames: Vec<Var> = (0..x.frames())
            .map(|i| tape.constant(Tensor::vector(x.frame(i).to_vec())))
            .collect();
        let init = self.encoder.zero_state(tape);
        run_sequence(tape, &self.encoder, &frames, init)
    }

    /// Word distributions when step `t` is fed `prev[t]` and the encoder
    /// state of frame `t`.
    pub fn decode_teacher_forced(&self, tape: &mut Tape, enc: &[Var], prev: &[usize]) -> Result<Vec<Var>> {
        if prev.len() > enc.len() {
            return Err(Error::contract(format!("{} decoder steps exceed {} encoder states", prev.len(), enc.len())));
        }
        let mut state = self.decoder_init.bind(tape);
        let mut out = Vec::with_capacity(prev.len());
        for (&w, &h) in prev.iter().zip(enc) {
            let word = tape.constant(one_hot(w, self.cfg.vocab_size)?);
            let input = tape.concat(&[word, h])?;
            state = self.decoder.step(tape, input, state)?;
            let logits = self.word_out.forward(tape, state.hidden())?;
            out.push(tape.softmax(logits)?);
        }
        Ok(out)
    }

    /// Per-step word distributions for every position of `targets`.
    pub fn s2s_forward(&self, tape: &mut Tape, x: &FeatureSequence, targets: &[usize]) -> Result<Vec<Var>> {
        let enc = self.encode(tape, x)?;
        let prev: Vec<usize> = std::iter::once(PAD).chain(targets.iter().copied()).take(targets.len()).collect();
        self.decode_teacher_forced(tape, &enc, &prev)
    }

    pub fn tcn_forward(&self, tape: &mut Tape, x: &FeatureSequence) -> Result<Var> {
        self.check_input(x)?;
        self.tcn.forward(tape, x)
    }

    pub fn action_scores(&self, x: &FeatureSequence) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.params);
        let s = self.tcn_forward(&mut tape, x)?;
        Ok(tape.value(s).data().to_vec())
    }

    /// Highest-scoring action class, ties to the lowest id.
    pub fn classify_action(&self, x: &FeatureSequence) -> Result<usize> {
        Ok(argmax(&self.action_scores(x)?))
    }

    /// Records the joint loss of one example; returns (joint, translation, action).
    pub fn example_loss(&self, tape: &mut Tape, ex: &V2CExample) -> Result<(Var, Var, Var)> {
        let targets = padded_targets(&ex.command, self.cfg.frames)?;
        // Steps past EOC only see padding and are masked out of the loss.
        let steps = ex.command.len() + 1;
        let dists = self.s2s_forward(tape, &ex.features, &targets[..steps])?;
        let keep: Vec<bool> = targets[..steps].iter().map(|&w| w != PAD).collect();
        let trans = seq_nll(tape, &dists, &targets[..steps], &keep)?;
        let scores = self.tcn_forward(tape, &ex.features)?;
        let y = one_hot(ex.action, self.cfg.num_classes)?;
        let act = action_sigmoid_ce(tape, scores, y.data(), false)?;
        let joint = v2c_joint_loss(tape, trans, act)?;
        Ok((joint, trans, act))
    }

    pub fn evaluate_loss(&self, ex: &V2CExample) -> Result<V2CLosses> {
        let mut tape = Tape::with_params(&self.params);
        let (j, t, a) = self.example_loss(&mut tape, ex)?;
        Ok(V2CLosses {
            translation: tape.value(t).item(),
            action: tape.value(a).item(),
            joint: tape.value(j).item(),
        })
    }

    /// Feeds back the most probable non-padding word until `EOC` or the
    /// frame budget runs out.
    pub fn greedy_decode(&self, x: &FeatureSequence, opts: DecodeOptions) -> Result<Vec<usize>> {
        let mut tape = Tape::with_params(&self.params);
        let enc = self.encode(&mut tape, x)?;
        let mut state = self.decoder_init.bind(&tape);
        let mut prev = PAD;
        let mut words = Vec::new();
        for &h in &enc {
            let word = tape.constant(one_hot(prev, self.cfg.vocab_size)?);
            let input = tape.concat(&[word, h])?;
            state = self.decoder.step(&mut tape, input, state)?;
            let logits = self.word_out.forward(&mut tape, state.hidden())?;
            let next = 1 + argmax(&tape.value(logits).data()[1..]);
            if next == EOC {
                break;
            }
            words.push(next);
            prev = next;
        }
        if opts.first_last && words.len() > 2 {
            words = vec![words[0], words[words.len() - 1]];
        }
        Ok(words)
    }
}

/// One Adam step on the batch-mean joint loss. Returns the mean losses
/// before the update.
pub fn v2c_train_step(net: &mut V2CNet, opt: &mut Adam, batch: &[V2CExample]) -> Result<f64> {
    let (loss, grads) = batch_gradients(&net.params, batch, |tape, ex| Ok(net.example_loss(tape, ex)?.0))?;
    if !loss.is_finite() {
        return Err(Error::Training {
            step: opt.step + 1,
            loss,
        });
    }
    opt.update(&mut net.params, &grads)?;
    Ok(loss)
}

/// Fractions of examples whose greedy decode reproduces the command exactly
/// and whose action is classified correctly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRates {
    pub commands: f64,
    pub actions: f64,
}

pub fn fit_rates(net: &V2CNet, data: &[V2CExample]) -> Result<FitRates> {
    if data.is_empty() {
        return Err(Error::param("fit_rates needs at least one example"));
    }
    let (mut cmd, mut act) = (0usize, 0usize);
    for ex in data {
        cmd += usize::from(net.greedy_decode(&ex.features, DecodeOptions::default())? == ex.command);
        act += usize::from(net.classify_action(&ex.features)? == ex.action);
    }
    let n = data.len() as f64;
    Ok(FitRates {
        commands: cmd as f64 / n,
        actions: act as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

/// Shuffled mini-batch epochs; returns the mean joint loss of each epoch.
/// `after_epoch` may stop training early by returning `false`.
pub fn train_v2c(
    net: &mut V2CNet,
    opt: &mut Adam,
    data: &[V2CExample],
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(usize, f64, &V2CNet) -> bool,
) -> Result<Vec<f64>> {
    if cfg.batch == 0 {
        return Err(Error::param("batch size must be positive"));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<V2CExample> = chunk.iter().map(|&i| data[i].clone()).collect();
            total += v2c_train_step(net, opt, &batch)? * batch.len() as f64;
        }
        let mean = total / data.len() as f64;
        history.push(mean);
        if !after_epoch(epoch, mean, net) {
            break;
        }
    }
    Ok(history)
}

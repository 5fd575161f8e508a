//! Feed-forward building blocks on `[channels × height × width]` tensors.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Convolution geometry. Used for both `conv2d` and `deconv2d`; for the
/// latter `filters` is the output channel count and dilation must be 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: usize,
}

impl Conv2dParams {
    pub fn square(filters: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            filters,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: 1,
        }
    }

    pub fn dilated(mut self, rate: usize) -> Self {
        self.dilation = rate;
        self
    }

    /// Kernel sliding along the last axis of a `[features × 1 × time]` map,
    /// padded to preserve length.
    pub fn temporal(filters: usize, kernel: usize) -> Self {
        Self {
            filters,
            kernel: (1, kernel),
            stride: (1, 1),
            padding: (0, kernel / 2),
            dilation: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.filters,
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
            self.dilation,
        ];
        if all.contains(&0) {
            return Err(Error::param(format!("conv parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    fn effective_kernel(&self) -> (usize, usize) {
        (
            self.dilation * (self.kernel.0 - 1) + 1,
            self.dilation * (self.kernel.1 - 1) + 1,
        )
    }

    /// Output spatial size of `conv2d` on an `h × w` input.
    pub fn conv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (ekh, ekw) = self.effective_kernel();
        let (ph, pw) = (h + 2 * self.padding.0, w + 2 * self.padding.1);
        if ekh > ph || ekw > pw {
            return Err(Error::dim("conv2d kernel vs padded input", &[ekh, ekw], &[ph, pw]));
        }
        Ok(((ph - ekh) / self.stride.0 + 1, (pw - ekw) / self.stride.1 + 1))
    }

    /// Output spatial size of `deconv2d` on an `h × w` input.
    pub fn deconv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        if self.dilation != 1 {
            return Err(Error::param("deconv2d does not support dilation"));
        }
        Ok((
            deconv2d_size(h, self.stride.0, self.kernel.0, self.padding.0)?,
            deconv2d_size(w, self.stride.1, self.kernel.1, self.padding.1)?,
        ))
    }
}

/// Spatial extent after a deconvolution: `s·(S_i − 1) + S_f − 2d`.
pub fn deconv2d_size(input: usize, stride: usize, kernel: usize, padding: usize) -> Result<usize> {
    if input == 0 || stride == 0 || kernel == 0 {
        return Err(Error::param(format!(
            "deconv extent, stride and kernel must be positive (got {input}, {stride}, {kernel})"
        )));
    }
    let out = (stride * (input - 1) + kernel) as i64 - 2 * padding as i64;
    if out <= 0 {
        return Err(Error::param(format!(
            "deconv with S_i={input}, s={stride}, S_f={kernel}, d={padding} has non-positive output {out}"
        )));
    }
    Ok(out as usize)
}

fn chw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(op, t.shape(), &[0, 0, 0])),
    }
}

fn check_weights(op: &'static str, w: &Tensor, b: &Tensor, expect_w: [usize; 4], bias: usize) -> Result<()> {
    if w.shape() != expect_w {
        return Err(Error::dim(op, &expect_w, w.shape()));
    }
    if b.shape() != [bias] {
        return Err(Error::dim(op, &[bias], b.shape()));
    }
    Ok(())
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    let (c, h, wd) = chw("conv2d", x)?;
    let (oh, ow) = p.conv_output(h, wd)?;
    let (kh, kw) = p.kernel;
    check_weights("conv2d weights", w, b, [p.filters, c, kh, kw], p.filters)?;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; p.filters * oh * ow];
    for f in 0..p.filters {
        let bias = b.data()[f];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = bias;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * p.stride.0 + ky * p.dilation) as isize - p.padding.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (ci * h + iy as usize) * wd;
                        let wrow = ((f * c + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * p.stride.1 + kx * p.dilation) as isize - p.padding.1 as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            s += wdat[wrow + kx] * xd[xrow + ix as usize];
                        }
                    }
                }
                out[(f * oh + oy) * ow + ox] = s;
            }
        }
    }
    Tensor::new(vec![p.filters, oh, ow], out)
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    p: &Conv2dParams,
    g: &Tensor,
    want_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (c, h, wd) = chw("conv2d", x).expect("validated in forward");
    let (_, oh, ow) = chw("conv2d", g).expect("validated in forward");
    let (kh, kw) = p.kernel;
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; p.filters];
    for f in 0..p.filters {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gd[(f * oh + oy) * ow + ox];
                if gv == 0.0 {
                    continue;
                }
                db[f] += gv;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * p.stride.0 + ky * p.dilation) as isize - p.padding.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (ci * h + iy as usize) * wd;
                        let wrow = ((f * c + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * p.stride.1 + kx * p.dilation) as isize - p.padding.1 as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            dw[wrow + kx] += gv * xd[xrow + ix as usize];
                            if want_dx {
                                dx[xrow + ix as usize] += gv * wdat[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = want_dx.then(|| Tensor::new(x.shape().to_vec(), dx).expect("shape"));
    (
        dx,
        Tensor::new(w.shape().to_vec(), dw).expect("shape"),
        Tensor::vector(db),
    )
}

/// Transposed convolution. Weights are `[in_channels × out_channels × kh × kw]`.
pub(crate) fn deconv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    let (c, h, wd) = chw("deconv2d", x)?;
    let (oh, ow) = p.deconv_output(h, wd)?;
    let (kh, kw) = p.kernel;
    let co = p.filters;
    check_weights("deconv2d weights", w, b, [c, co, kh, kw], co)?;
    let mut out = vec![0.0; co * oh * ow];
    for (o, chunk) in out.chunks_mut(oh * ow).enumerate() {
        chunk.iter_mut().for_each(|v| *v = b.data()[o]);
    }
    let (xd, wdat) = (x.data(), w.data());
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..wd {
                let xv = xd[(ci * h + iy) * wd + ix];
                if xv == 0.0 {
                    continue;
                }
                for o in 0..co {
                    for ky in 0..kh {
                        let oy = (iy * p.stride.0 + ky) as isize - p.padding.0 as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let wrow = ((ci * co + o) * kh + ky) * kw;
                        let orow = (o * oh + oy as usize) * ow;
                        for kx in 0..kw {
                            let ox = (ix * p.stride.1 + kx) as isize - p.padding.1 as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            out[orow + ox as usize] += xv * wdat[wrow + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out)
}

pub(crate) fn deconv2d_backward(x: &Tensor, w: &Tensor, p: &Conv2dParams, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (c, h, wd) = chw("deconv2d", x).expect("validated in forward");
    let (co, oh, ow) = chw("deconv2d", g).expect("validated in forward");
    let (kh, kw) = p.kernel;
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let db: Vec<f64> = gd.chunks(oh * ow).map(|ch| ch.iter().sum()).collect();
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..wd {
                let xi = (ci * h + iy) * wd + ix;
                let xv = xd[xi];
                let mut acc = 0.0;
                for o in 0..co {
                    for ky in 0..kh {
                        let oy = (iy * p.stride.0 + ky) as isize - p.padding.0 as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let wrow = ((ci * co + o) * kh + ky) * kw;
                        let orow = (o * oh + oy as usize) * ow;
                        for kx in 0..kw {
                            let ox = (ix * p.stride.1 + kx) as isize - p.padding.1 as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            let gv = gd[orow + ox as usize];
                            acc += gv * wdat[wrow + kx];
                            dw[wrow + kx] += gv * xv;
                        }
                    }
                }
                dx[xi] = acc;
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("shape"),
        Tensor::vector(db),
    )
}

/// How a pooling window treats a trailing partial window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Overhang {
    /// Pad right/bottom with −∞ so every input cell is covered.
    PadNegInf,
    /// Drop cells that do not fill a whole window.
    Floor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub overhang: Overhang,
}

impl PoolSpec {
    /// Non-overlapping 2×2 spatial pooling.
    pub const SPATIAL_2X2: PoolSpec = PoolSpec {
        window: (2, 2),
        stride: (2, 2),
        overhang: Overhang::PadNegInf,
    };

    /// Window 2, stride 2 along the last (time) axis with floor division.
    pub const TEMPORAL_2: PoolSpec = PoolSpec {
        window: (1, 2),
        stride: (1, 2),
        overhang: Overhang::Floor,
    };

    fn out_extent(&self, n: usize, win: usize, stride: usize) -> usize {
        match self.overhang {
            Overhang::PadNegInf => n.saturating_sub(win).div_ceil(stride) + 1,
            Overhang::Floor => {
                if n < win {
                    0
                } else {
                    (n - win) / stride + 1
                }
            }
        }
    }
}

/// For every pooled cell, the flat input offset of the element it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    indices: Vec<usize>,
}

impl PoolIndices {
    pub fn new(input_shape: Vec<usize>, output_shape: Vec<usize>, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != output_shape.iter().product::<usize>() {
            return Err(Error::dim("pool indices", &output_shape, &[indices.len()]));
        }
        Ok(Self {
            input_shape,
            output_shape,
            indices,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

pub(crate) fn maxpool_forward(x: &Tensor, spec: PoolSpec) -> Result<(Tensor, PoolIndices)> {
    let (c, h, w) = chw("maxpool", x)?;
    let oh = spec.out_extent(h, spec.window.0, spec.stride.0);
    let ow = spec.out_extent(w, spec.window.1, spec.stride.1);
    if oh == 0 || ow == 0 {
        return Err(Error::dim("maxpool window vs input", &[spec.window.0, spec.window.1], &[h, w]));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut arg = usize::MAX;
                for ky in 0..spec.window.0 {
                    let iy = oy * spec.stride.0 + ky;
                    if iy >= h {
                        continue;
                    }
                    for kx in 0..spec.window.1 {
                        let ix = ox * spec.stride.1 + kx;
                        if ix >= w {
                            continue;
                        }
                        let k = (ci * h + iy) * w + ix;
                        // Strict comparison keeps the first (row-major lowest) maximum.
                        if arg == usize::MAX || xd[k] > best {
                            best = xd[k];
                            arg = k;
                        }
                    }
                }
                out.push(best);
                idx.push(arg);
            }
        }
    }
    let shape = vec![c, oh, ow];
    Ok((
        Tensor::new(shape.clone(), out)?,
        PoolIndices::new(x.shape().to_vec(), shape, idx)?,
    ))
}

pub(crate) fn maxunpool_forward(y: &Tensor, idx: &PoolIndices) -> Result<Tensor> {
    if y.shape() != idx.output_shape.as_slice() {
        return Err(Error::dim("maxunpool", &idx.output_shape, y.shape()));
    }
    let mut out = Tensor::zeros(&idx.input_shape);
    let n = out.len();
    for (&k, &v) in idx.indices.iter().zip(y.data()) {
        if k >= n {
            return Err(Error::contract(format!("unpool index {k} outside {:?}", idx.input_shape)));
        }
        out.data_mut()[k] += v;
    }
    Ok(out)
}

/// 2×2 stride-2 max pooling, returning the argmax offsets.
pub fn maxpool2d(tape: &mut Tape, x: Var) -> Result<(Var, PoolIndices)> {
    tape.maxpool(x, PoolSpec::SPATIAL_2X2)
}

/// Places each pooled value back at its recorded position, zeros elsewhere.
pub fn maxunpool2d(tape: &mut Tape, y: Var, indices: &PoolIndices, out_shape: &[usize]) -> Result<Var> {
    if out_shape != indices.input_shape() {
        return Err(Error::contract(format!(
            "unpool target {out_shape:?} does not match recorded input {:?}",
            indices.input_shape()
        )));
    }
    tape.maxunpool(y, indices)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: survivors are scaled by `1/(1−rate)` at train time.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: Mode, rng: &mut SeededRng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..tape.value(x).len())
        .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
        .collect();
    tape.mask_mul(x, mask)
}

/// Softmax along the last axis of a plain tensor.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.softmax(v).expect("last axis exists");
    tape.value(y).clone()
}

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

/// Per-feature batch normalization over `[batch × features]` inputs.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[features]), ParamKind::Bias)?,
            beta: store.add_bias(format!("{name}.beta"), features)?,
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            eps: BATCHNORM_EPS,
            momentum: BATCHNORM_MOMENTUM,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batchnorm(x, g, b, self.eps)?;
                let m = self.momentum;
                for f in 0..mean.len() {
                    self.running_mean[f] = m * self.running_mean[f] + (1.0 - m) * mean[f];
                    self.running_var[f] = m * self.running_var[f] + (1.0 - m) * var[f];
                }
                Ok(y)
            }
            Mode::Eval => {
                let t = tape.value(x);
                let feat = self.running_mean.len();
                if t.ndim() != 2 || t.shape()[1] != feat {
                    return Err(Error::dim("batchnorm", t.shape(), &[0, feat]));
                }
                let rows = t.shape()[0];
                let scale: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                let mut mul = Vec::with_capacity(rows * feat);
                let mut shift = Vec::with_capacity(rows * feat);
                for _ in 0..rows {
                    mul.extend_from_slice(&scale);
                    shift.extend(self.running_mean.iter().zip(&scale).map(|(m, s)| -m * s));
                }
                let normed = tape.mask_mul(x, mul)?;
                let shift = tape.constant(Tensor::new(vec![rows, feat], shift)?);
                let normed = tape.add(normed, shift)?;
                let gam = tape.value(g).clone();
                let scaled = tape.mask_mul(normed, gam.data().repeat(rows))?;
                tape.add_bias(scaled, b)
            }
        }
    }
}

/// Learned `[filters × channels × kh × kw]` convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub params: Conv2dParams,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, params: Conv2dParams, rng: &mut SeededRng) -> Result<Self> {
        params.validate()?;
        let (kh, kw) = params.kernel;
        let fan_in = (in_channels * kh * kw) as f64;
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[params.filters, in_channels, kh, kw],
            (6.0 / fan_in).sqrt(),
            rng,
        )?;
        let bias = store.add_bias(format!("{name}.bias"), params.filters)?;
        Ok(Self { params, weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.conv2d(x, w, b, &self.params)
    }
}

/// Learned transposed convolution with `[in × out × kh × kw]` weights.
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub params: Conv2dParams,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Deconv2d {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, params: Conv2dParams, rng: &mut SeededRng) -> Result<Self> {
        params.validate()?;
        let (kh, kw) = params.kernel;
        let fan = (in_channels * kh * kw) as f64 / (params.stride.0 * params.stride.1) as f64;
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[in_channels, params.filters, kh, kw],
            (6.0 / fan).sqrt(),
            rng,
        )?;
        let bias = store.add_bias(format!("{name}.bias"), params.filters)?;
        Ok(Self { params, weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.deconv2d(x, w, b, &self.params)
    }
}

/// `W x + b` for a 1-D input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            weight: store.add_uniform(format!("{name}.weight"), &[outputs, inputs], scale, rng)?,
            bias: store.add_bias(format!("{name}.bias"), outputs)?,
            inputs,
            outputs,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        let y = tape.matmul(w, x)?;
        tape.add_bias(y, b)
    }
}

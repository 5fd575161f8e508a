//! Central finite-difference gradient checking.
//!
//! The numeric side only ever reads forward values, so it stays independent
//! of the adjoint code it checks.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Pass threshold on `|analytic − numeric| / max(1, |analytic|)` at `f64`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn compare<M>(inputs: &[Tensor], h: f64, make: M) -> Result<GradReport>
where
    M: Fn(&[Tensor]) -> Result<(Tape, Vec<Var>, Var)>,
{
    let (tape, vars, loss) = make(inputs)?;
    let grads = tape.backward(loss)?;
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let (tape, _, loss) = make(ins)?;
        Ok(tape.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            checked += 1;
        }
    }
    Ok(GradReport {
        max_rel_error: worst,
        checked,
    })
}

/// Compares the tape's gradient of `build` against central differences with
/// step `h`, perturbing every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    compare(inputs, h, |ins| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    })
}

/// Same check over every parameter of `store`, for models that read their
/// weights through [`Tape::param`].
pub fn check_param_gradients<F>(store: &ParamStore, h: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let ids: Vec<_> = store.ids().collect();
    compare(store.values(), h, |ins| {
        let mut s = store.clone();
        for (id, t) in ids.iter().zip(ins) {
            s.set(*id, t.clone())?;
        }
        let mut tape = Tape::with_params(&s);
        let vars = ids.iter().map(|&id| tape.param(id)).collect();
        let loss = build(&mut tape)?;
        Ok((tape, vars, loss))
    })
}

/// One named check of [`gradient_suite`].
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradReport,
}

/// Shifts every parameter by a small random amount. Zero-initialized biases
/// behind a dead ReLU put pre-activations exactly on the kink, where central
/// differences straddle two slopes.
fn jitter(store: &mut ParamStore, rng: &mut crate::rng::SeededRng) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.uniform(-0.1, 0.1);
        }
    }
}

fn sum_tanh(tape: &mut Tape, y: Var) -> Var {
    let y = tape.tanh(y);
    tape.sum(y)
}

/// Finite-difference checks of every differentiable building block on small
/// random tensors drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    use crate::backbone::ToyEncoder;
    use crate::geometry::{roi_align, BoundingBox, BoxOffset, RoiAlignConfig};
    use crate::layers::{Conv2dParams, PoolSpec};
    use crate::losses::{
        action_sigmoid_ce, aff_mask_loss, ce_class, detection_joint_loss, seq_nll, smooth_l1, v2c_joint_loss, weight_decay,
        DetectionTarget,
    };
    use crate::mask::LabelGrid;
    use crate::recurrent::{run_sequence, Cell, CellKind};
    use crate::rng::SeededRng;
    use crate::v2c::{FeatureSequence, Tcn, V2CConfig, V2CExample, V2CNet};

    let h = GRADCHECK_STEP;
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();
    let mut push = |name, report| out.push(SuiteEntry { name, report });

    let conv = Conv2dParams::square(2, 3, 2, 1).dilated(2);
    let ins = [
        rng.uniform_tensor(&[2, 6, 5], -1.0, 1.0),
        rng.uniform_tensor(&[2, 2, 3, 3], -1.0, 1.0),
        rng.uniform_tensor(&[2], -1.0, 1.0),
    ];
    push("conv2d", check_gradients(&ins, h, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], &conv)?;
        Ok(sum_tanh(t, y))
    })?);

    let dp = Conv2dParams::square(3, 4, 2, 1);
    let ins = [
        rng.uniform_tensor(&[2, 3, 3], -1.0, 1.0),
        rng.uniform_tensor(&[2, 3, 4, 4], -1.0, 1.0),
        rng.uniform_tensor(&[3], -1.0, 1.0),
    ];
    push("deconv2d", check_gradients(&ins, h, |t, v| {
        let y = t.deconv2d(v[0], v[1], v[2], &dp)?;
        Ok(sum_tanh(t, y))
    })?);

    let pc = Conv2dParams::square(2, 3, 1, 1);
    let ins = [
        rng.uniform_tensor(&[2, 5, 6], -1.0, 1.0),
        rng.uniform_tensor(&[2, 2, 3, 3], -1.0, 1.0),
        rng.uniform_tensor(&[2], -1.0, 1.0),
    ];
    push("conv-pool-unpool", check_gradients(&ins, h, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], &pc)?;
        let (p, idx) = t.maxpool(y, PoolSpec::SPATIAL_2X2)?;
        let p = t.tanh(p);
        let u = t.maxunpool(p, &idx)?;
        let u = t.mul(u, y)?;
        Ok(t.sum(u))
    })?);

    let ins = [rng.uniform_tensor(&[3, 1, 9], -1.0, 1.0)];
    push("temporal-maxpool", check_gradients(&ins, h, |t, v| {
        let (p, _) = t.maxpool(v[0], PoolSpec::TEMPORAL_2)?;
        let q = t.mul(p, p)?;
        Ok(t.sum(q))
    })?);

    let weights = rng.uniform_tensor(&[4, 3], -1.0, 1.0);
    let ins = [
        rng.uniform_tensor(&[4, 3], -2.0, 2.0),
        rng.uniform_tensor(&[3], 0.5, 1.5),
        rng.uniform_tensor(&[3], -0.5, 0.5),
    ];
    push("batchnorm", check_gradients(&ins, h, |t, v| {
        let (y, _, _) = t.batchnorm(v[0], v[1], v[2], 1e-5)?;
        let c = t.constant(weights.clone());
        let y = t.mul(y, c)?;
        Ok(sum_tanh(t, y))
    })?);

    for (name, kind) in [("lstm-5-steps", CellKind::Lstm), ("gru-5-steps", CellKind::Gru)] {
        let mut store = ParamStore::new();
        let cell = Cell::new(kind, &mut store, "rnn", 3, 4, &mut rng)?;
        let xs: Vec<Tensor> = (0..5).map(|_| rng.uniform_tensor(&[3], -1.0, 1.0)).collect();
        push(name, check_param_gradients(&store, h, |t| {
            let xv: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            let init = cell.zero_state(t);
            let hs = run_sequence(t, &cell, &xv, init)?;
            let all = t.add_all(&hs)?;
            let sq = t.mul(all, all)?;
            Ok(t.sum(sq))
        })?);
    }

    let tcn_cfg = V2CConfig {
        feature_dim: 3,
        hidden: 4,
        vocab_size: 6,
        num_classes: 3,
        frames: 8,
        cell: CellKind::Lstm,
        tcn_filters: [3, 2, 2],
        tcn_kernel: 3,
        fc_units: 3,
    };
    let mut store = ParamStore::new();
    let tcn = Tcn::new(&mut store, &tcn_cfg, &mut rng)?;
    jitter(&mut store, &mut rng);
    let x = FeatureSequence::new(rng.uniform_tensor(&[8, 3], -1.0, 1.0))?;
    push("tcn-stack", check_param_gradients(&store, h, |t| {
        let s = tcn.forward(t, &x)?;
        action_sigmoid_ce(t, s, &[0.0, 1.0, 0.0], false)
    })?);

    for (name, cell) in [("v2c-joint-lstm", CellKind::Lstm), ("v2c-joint-gru", CellKind::Gru)] {
        let cfg = V2CConfig { cell, ..tcn_cfg };
        let mut net = V2CNet::new(cfg, rng.next_u64())?;
        jitter(&mut net.params, &mut rng);
        let ex = V2CExample {
            features: FeatureSequence::new(rng.uniform_tensor(&[8, 3], -1.0, 1.0))?,
            command: vec![2, 4, 3],
            action: rng.below(3),
        };
        push(name, check_param_gradients(&net.params, h, |t| Ok(net.example_loss(t, &ex)?.0))?);
    }

    let mut store = ParamStore::new();
    let enc = ToyEncoder::new(&mut store, "enc", 2, &[2, 2, 2], &mut rng)?;
    jitter(&mut store, &mut rng);
    let img = rng.uniform_tensor(&[2, 8, 8], 0.0, 1.0);
    push("toy-encoder", check_param_gradients(&store, h, |t| {
        let x = t.constant(img.clone());
        let f = enc.forward(t, x)?;
        Ok(sum_tanh(t, f))
    })?);

    let cfg = RoiAlignConfig { out_size: (3, 3), sampling: 2, stride: 1.0 };
    let roi = BoundingBox::new(0.4, 0.9, 4.7, 3.8)?;
    let ins = [rng.uniform_tensor(&[2, 5, 6], -1.0, 1.0)];
    push("roi-align", check_gradients(&ins, h, |t, v| {
        let y = roi_align(t, v[0], &roi, &cfg)?;
        Ok(sum_tanh(t, y))
    })?);

    let ins = [rng.uniform_tensor(&[4], -1.0, 1.0)];
    push("ce-class", check_gradients(&ins, h, |t, v| {
        let p = t.softmax(v[0])?;
        ce_class(t, p, 2)
    })?);

    let off = BoxOffset { tx: 0.2, ty: -1.7, tw: 0.4, th: 3.0 };
    let ins = [Tensor::vector(vec![0.1, 0.3, -0.2, 0.5])];
    push("smooth-l1", check_gradients(&ins, h, |t, v| smooth_l1(t, v[0], &off))?);

    let s = LabelGrid::new(2, 3, vec![0, 1, 2, 2, 1, 0])?;
    let ins = [rng.uniform_tensor(&[3, 2, 3], -1.0, 1.0)];
    push("aff-mask", check_gradients(&ins, h, |t, v| {
        let m = t.softmax_axis(v[0], 0)?;
        aff_mask_loss(t, m, &s)
    })?);

    let target = DetectionTarget::new(1, BoxOffset { tx: 0.3, ty: -0.1, tw: 0.2, th: -0.4 }, LabelGrid::new(3, 3, vec![0, 1, 1, 2, 2, 1, 0, 0, 2])?)?;
    let ins = [
        rng.uniform_tensor(&[3], -1.0, 1.0),
        rng.uniform_tensor(&[4], -2.0, 2.0),
        rng.uniform_tensor(&[3, 3, 3], -1.0, 1.0),
    ];
    push("detection-joint", check_gradients(&ins, h, |t, v| {
        let p = t.softmax(v[0])?;
        let m = t.softmax_axis(v[2], 0)?;
        detection_joint_loss(t, p, v[1], m, &target)
    })?);

    let ins: Vec<Tensor> = (0..3).map(|_| rng.uniform_tensor(&[5], -1.0, 1.0)).collect();
    push("seq-nll", check_gradients(&ins, h, |t, v| {
        let d: Vec<Var> = v.iter().map(|&x| t.softmax(x)).collect::<Result<_>>()?;
        seq_nll(t, &d, &[1, 4, 0], &[true, true, false])
    })?);

    for (name, positive_only) in [("action-ce", false), ("action-ce-positive", true)] {
        let ins = [rng.uniform_tensor(&[4], -3.0, 3.0)];
        push(name, check_gradients(&ins, h, |t, v| action_sigmoid_ce(t, v[0], &[0.0, 0.0, 1.0, 0.0], positive_only))?);
    }

    let ins = [rng.uniform_tensor(&[5], -1.0, 1.0), rng.uniform_tensor(&[3], -1.0, 1.0)];
    push("v2c-joint-loss", check_gradients(&ins, h, |t, v| {
        let d = t.softmax(v[0])?;
        let trans = seq_nll(t, &[d], &[2], &[true])?;
        let act = action_sigmoid_ce(t, v[1], &[1.0, 0.0, 0.0], false)?;
        v2c_joint_loss(t, trans, act)
    })?);

    let mut store = ParamStore::new();
    store.add_uniform("w", &[2, 3], 1.0, &mut rng)?;
    store.add_bias("b", 3)?;
    push("weight-decay", check_param_gradients(&store, h, |t| weight_decay(t, &store, 0.7))?);

    Ok(out)
}

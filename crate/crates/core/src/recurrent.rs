//! LSTM and GRU cells and a left-to-right sequence runner.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: usize = 512;
/// Half-width of the uniform weight initialization.
pub const WEIGHT_INIT_SCALE: f64 = 0.08;
/// Half-width of the uniform initial-state initialization.
pub const STATE_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            _ => Err(Error::param(format!("unknown cell kind {s:?} (expected lstm or gru)"))),
        }
    }
}

/// One gate's input-facing matrix, hidden-facing matrix and bias.
#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
}

impl Gate {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            w_x: store.add_uniform(format!("{name}.w_x"), &[hidden, input], scale, rng)?,
            w_h: store.add_uniform(format!("{name}.w_h"), &[hidden, hidden], scale, rng)?,
            b: store.add_bias(format!("{name}.b"), hidden)?,
        })
    }

    /// `W_x x + W_h h + b`
    fn affine(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let (wx, wh, b) = (tape.param(self.w_x), tape.param(self.w_h), tape.param(self.b));
        let a = tape.matmul(wx, x)?;
        let c = tape.matmul(wh, h)?;
        let s = tape.add(a, c)?;
        tape.add_bias(s, b)
    }
}

/// Input (i), forget (f), output (o) gates and candidate (g).
#[derive(Clone, Debug)]
pub struct LstmWeights {
    pub input_gate: Gate,
    pub forget_gate: Gate,
    pub output_gate: Gate,
    pub candidate: Gate,
    pub input: usize,
    pub hidden: usize,
}

impl LstmWeights {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        Self::with_scale(store, name, input, hidden, WEIGHT_INIT_SCALE, rng)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Self::with_scale(store, name, input, hidden, 0.0, &mut SeededRng::new(0))
    }

    fn with_scale(store: &mut ParamStore, name: &str, input: usize, hidden: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            input_gate: Gate::new(store, &format!("{name}.i"), input, hidden, scale, rng)?,
            forget_gate: Gate::new(store, &format!("{name}.f"), input, hidden, scale, rng)?,
            output_gate: Gate::new(store, &format!("{name}.o"), input, hidden, scale, rng)?,
            candidate: Gate::new(store, &format!("{name}.g"), input, hidden, scale, rng)?,
            input,
            hidden,
        })
    }
}

/// Reset (r) and update (z) gates and candidate state.
#[derive(Clone, Debug)]
pub struct GruWeights {
    pub reset_gate: Gate,
    pub update_gate: Gate,
    pub candidate: Gate,
    pub input: usize,
    pub hidden: usize,
}

impl GruWeights {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        Self::with_scale(store, name, input, hidden, WEIGHT_INIT_SCALE, rng)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Self::with_scale(store, name, input, hidden, 0.0, &mut SeededRng::new(0))
    }

    fn with_scale(store: &mut ParamStore, name: &str, input: usize, hidden: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            reset_gate: Gate::new(store, &format!("{name}.r"), input, hidden, scale, rng)?,
            update_gate: Gate::new(store, &format!("{name}.z"), input, hidden, scale, rng)?,
            candidate: Gate::new(store, &format!("{name}.h"), input, hidden, scale, rng)?,
            input,
            hidden,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

fn check_width(tape: &Tape, v: Var, want: usize, what: &'static str) -> Result<()> {
    if tape.shape(v) != [want] {
        return Err(Error::dim(what, &[want], tape.shape(v)));
    }
    Ok(())
}

pub fn lstm_step(tape: &mut Tape, x: Var, prev: LstmState, w: &LstmWeights) -> Result<LstmState> {
    check_width(tape, x, w.input, "lstm input")?;
    check_width(tape, prev.h, w.hidden, "lstm hidden state")?;
    check_width(tape, prev.c, w.hidden, "lstm cell state")?;
    let i = w.input_gate.affine(tape, x, prev.h)?;
    let i = tape.sigmoid(i);
    let f = w.forget_gate.affine(tape, x, prev.h)?;
    let f = tape.sigmoid(f);
    let o = w.output_gate.affine(tape, x, prev.h)?;
    let o = tape.sigmoid(o);
    let g = w.candidate.affine(tape, x, prev.h)?;
    let g = tape.tanh(g);
    let keep = tape.mul(f, prev.c)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

pub fn gru_step(tape: &mut Tape, x: Var, h_prev: Var, w: &GruWeights) -> Result<Var> {
    check_width(tape, x, w.input, "gru input")?;
    check_width(tape, h_prev, w.hidden, "gru hidden state")?;
    let r = w.reset_gate.affine(tape, x, h_prev)?;
    let r = tape.sigmoid(r);
    let z = w.update_gate.affine(tape, x, h_prev)?;
    let z = tape.sigmoid(z);
    let reset_h = tape.mul(r, h_prev)?;
    let cand = w.candidate.affine(tape, x, reset_h)?;
    let cand = tape.tanh(cand);
    // z ⊙ h_prev + (1 − z) ⊙ h̃  ==  h̃ + z ⊙ (h_prev − h̃)
    let diff = tape.sub(h_prev, cand)?;
    let gated = tape.mul(z, diff)?;
    tape.add(cand, gated)
}

/// A recurrent cell of either kind.
#[derive(Clone, Debug)]
pub enum Cell {
    Lstm(LstmWeights),
    Gru(GruWeights),
}

#[derive(Clone, Copy, Debug)]
pub enum RecurrentState {
    Lstm(LstmState),
    Gru(Var),
}

impl RecurrentState {
    pub fn hidden(&self) -> Var {
        match self {
            RecurrentState::Lstm(s) => s.h,
            RecurrentState::Gru(h) => *h,
        }
    }
}

impl Cell {
    pub fn new(kind: CellKind, store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(match kind {
            CellKind::Lstm => Cell::Lstm(LstmWeights::new(store, name, input, hidden, rng)?),
            CellKind::Gru => Cell::Gru(GruWeights::new(store, name, input, hidden, rng)?),
        })
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Cell::Lstm(_) => CellKind::Lstm,
            Cell::Gru(_) => CellKind::Gru,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Cell::Lstm(w) => w.hidden,
            Cell::Gru(w) => w.hidden,
        }
    }

    pub fn input(&self) -> usize {
        match self {
            Cell::Lstm(w) => w.input,
            Cell::Gru(w) => w.input,
        }
    }

    /// All-zero initial state as tape constants.
    pub fn zero_state(&self, tape: &mut Tape) -> RecurrentState {
        let h = tape.constant(Tensor::zeros(&[self.hidden()]));
        match self {
            Cell::Lstm(_) => {
                let c = tape.constant(Tensor::zeros(&[self.hidden()]));
                RecurrentState::Lstm(LstmState { h, c })
            }
            Cell::Gru(_) => RecurrentState::Gru(h),
        }
    }

    pub fn step(&self, tape: &mut Tape, x: Var, prev: RecurrentState) -> Result<RecurrentState> {
        match (self, prev) {
            (Cell::Lstm(w), RecurrentState::Lstm(s)) => Ok(RecurrentState::Lstm(lstm_step(tape, x, s, w)?)),
            (Cell::Gru(w), RecurrentState::Gru(h)) => Ok(RecurrentState::Gru(gru_step(tape, x, h, w)?)),
            _ => Err(Error::contract("recurrent state does not match the cell kind")),
        }
    }
}

/// Threads the state through `inputs` left to right; one hidden state per input.
pub fn run_sequence(tape: &mut Tape, cell: &Cell, inputs: &[Var], init: RecurrentState) -> Result<Vec<Var>> {
    if inputs.is_empty() {
        return Err(Error::contract("run_sequence needs a nonempty input sequence"));
    }
    let mut state = init;
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        state = cell.step(tape, x, state)?;
        out.push(state.hidden());
    }
    Ok(out)
}

/// Learnable initial state drawn from `[-0.1, 0.1]`.
#[derive(Clone, Debug)]
pub struct InitialState {
    pub h: ParamId,
    pub c: Option<ParamId>,
}

impl InitialState {
    pub fn new(store: &mut ParamStore, name: &str, cell: &Cell, rng: &mut SeededRng) -> Result<Self> {
        let hidden = cell.hidden();
        let h = store.add_uniform(format!("{name}.h0"), &[hidden], STATE_INIT_SCALE, rng)?;
        let c = match cell.kind() {
            CellKind::Lstm => Some(store.add_uniform(format!("{name}.c0"), &[hidden], STATE_INIT_SCALE, rng)?),
            CellKind::Gru => None,
        };
        Ok(Self { h, c })
    }

    pub fn bind(&self, tape: &Tape) -> RecurrentState {
        let h = tape.param(self.h);
        match self.c {
            Some(c) => RecurrentState::Lstm(LstmState { h, c: tape.param(c) }),
            None => RecurrentState::Gru(h),
        }
    }
}

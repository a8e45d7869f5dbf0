//! GRU and LSTM cells and sequence runners.
//!
//! Each cell keeps its input-side weights `W_x` (`gates·n × input_dim`) apart
//! from its recurrent weights `W_h` (`gates·n × n`); together they are the
//! column blocks of the usual `[W_x | W_h]` matrix acting on `[x; h]`. The
//! per-gate biases live on the input side. Initial states are zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    LastState,
    AllStates,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
    Bidirectional,
}

impl Direction {
    pub fn num_directions(self) -> usize {
        match self {
            Direction::Bidirectional => 2,
            _ => 1,
        }
    }
}

/// A recurrent cell whose weights live in a [`ParamSet`].
pub trait RecurrentCell {
    fn input_dim(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    /// Length of the carried state (larger than `hidden_dim` for LSTMs).
    fn state_dim(&self) -> usize;
    /// Input projections `W_x x_t + b` for every row of `inputs[T, input_dim]`.
    fn project<'t>(&self, tape: &'t Tape<'t>, inputs: Var<'t>) -> Result<Var<'t>>;
    /// Advances the state given one row of [`RecurrentCell::project`].
    fn advance<'t>(&self, tape: &'t Tape<'t>, xp: Var<'t>, state: Var<'t>) -> Result<Var<'t>>;
    /// Visible hidden state carried in `state`.
    fn output<'t>(&self, state: Var<'t>) -> Result<Var<'t>>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
}

fn register(
    params: &mut ParamSet,
    name: &str,
    gates: usize,
    input_dim: usize,
    hidden_dim: usize,
    rng: &mut impl Rng,
) -> Result<(ParamId, ParamId, ParamId)> {
    if input_dim == 0 || hidden_dim == 0 {
        return Err(Error::Shape(vec![input_dim, hidden_dim]));
    }
    let scale = 1.0 / (hidden_dim as f64).sqrt();
    let w_x = params.add_uniform(format!("{name}.w_x"), &[gates * hidden_dim, input_dim], scale, rng);
    let w_h = params.add_uniform(format!("{name}.w_h"), &[gates * hidden_dim, hidden_dim], scale, rng);
    let b = params.add(format!("{name}.b"), Tensor::zeros(&[gates * hidden_dim])?);
    Ok((w_x, w_h, b))
}

impl GruParams {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (w_x, w_h, b) = register(params, name, 3, input_dim, hidden_dim, rng)?;
        Ok(GruParams {
            input_dim,
            hidden_dim,
            w_x,
            w_h,
            b,
        })
    }
}

impl LstmParams {
    /// `forget_bias` initialises the forget-gate bias block (0 means no offset).
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        forget_bias: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (w_x, w_h, b) = register(params, name, 4, input_dim, hidden_dim, rng)?;
        params.get_mut(b).data_mut()[hidden_dim..2 * hidden_dim].fill(forget_bias);
        Ok(LstmParams {
            input_dim,
            hidden_dim,
            w_x,
            w_h,
            b,
        })
    }
}

fn project_rows<'t>(tape: &'t Tape<'t>, inputs: Var<'t>, w_x: ParamId, b: ParamId) -> Result<Var<'t>> {
    inputs.matmul_nt(tape.param(w_x))?.add_row_bias(tape.param(b))
}

impl RecurrentCell for GruParams {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }
    fn state_dim(&self) -> usize {
        self.hidden_dim
    }
    fn project<'t>(&self, tape: &'t Tape<'t>, inputs: Var<'t>) -> Result<Var<'t>> {
        project_rows(tape, inputs, self.w_x, self.b)
    }
    fn advance<'t>(&self, tape: &'t Tape<'t>, xp: Var<'t>, state: Var<'t>) -> Result<Var<'t>> {
        xp.gru_cell(state, tape.param(self.w_h))
    }
    fn output<'t>(&self, state: Var<'t>) -> Result<Var<'t>> {
        Ok(state)
    }
}

impl RecurrentCell for LstmParams {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }
    fn state_dim(&self) -> usize {
        2 * self.hidden_dim
    }
    fn project<'t>(&self, tape: &'t Tape<'t>, inputs: Var<'t>) -> Result<Var<'t>> {
        project_rows(tape, inputs, self.w_x, self.b)
    }
    fn advance<'t>(&self, tape: &'t Tape<'t>, xp: Var<'t>, state: Var<'t>) -> Result<Var<'t>> {
        xp.lstm_cell(state, tape.param(self.w_h))
    }
    fn output<'t>(&self, state: Var<'t>) -> Result<Var<'t>> {
        state.slice(0, self.hidden_dim)
    }
}

fn check_input(cell: &impl RecurrentCell, x: &Var<'_>, h: &Var<'_>) -> Result<()> {
    if x.shape() != [cell.input_dim()] {
        return Err(Error::dim("recurrent step input", &x.shape(), &[cell.input_dim()]));
    }
    if h.shape() != [cell.state_dim()] {
        return Err(Error::dim("recurrent step state", &h.shape(), &[cell.state_dim()]));
    }
    Ok(())
}

/// One GRU update `h_t = GRU(x_t, h_{t-1})`.
pub fn gru_step<'t>(tape: &'t Tape<'t>, params: &GruParams, x: Var<'t>, h_prev: Var<'t>) -> Result<Var<'t>> {
    check_input(params, &x, &h_prev)?;
    let xp = tape.param(params.w_x).matmul(x)?.add(tape.param(params.b))?;
    params.advance(tape, xp, h_prev)
}

/// One LSTM update over the packed state `[h; c]`.
pub fn lstm_step<'t>(tape: &'t Tape<'t>, params: &LstmParams, x: Var<'t>, state: Var<'t>) -> Result<Var<'t>> {
    check_input(params, &x, &state)?;
    let xp = tape.param(params.w_x).matmul(x)?.add(tape.param(params.b))?;
    params.advance(tape, xp, state)
}

/// Runs `cell` over the rows of `inputs[T, input_dim]`, right to left when
/// `reverse`. All-states output keeps the original time order.
pub fn run_cell<'t, C: RecurrentCell>(
    tape: &'t Tape<'t>,
    cell: &C,
    inputs: Var<'t>,
    mode: Mode,
    reverse: bool,
) -> Result<Var<'t>> {
    let shape = inputs.shape();
    if shape.len() != 2 || shape[1] != cell.input_dim() {
        return Err(Error::dim("run_sequence", &shape, &[cell.input_dim()]));
    }
    let steps = shape[0];
    let xp = cell.project(tape, inputs)?;
    let mut state = tape.zeros(&[cell.state_dim()])?;
    let mut outputs = Vec::with_capacity(if mode == Mode::AllStates { steps } else { 0 });
    for k in 0..steps {
        let t = if reverse { steps - 1 - k } else { k };
        state = cell.advance(tape, xp.row(t)?, state)?;
        if mode == Mode::AllStates {
            outputs.push(cell.output(state)?);
        }
    }
    match mode {
        Mode::LastState => cell.output(state),
        Mode::AllStates => {
            if reverse {
                outputs.reverse();
            }
            Var::stack_rows(&outputs)
        }
    }
}

/// A (possibly bidirectional) recurrent layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rnn<C> {
    pub direction: Direction,
    /// Left-to-right cell, or the only cell for [`Direction::Backward`].
    pub cell: C,
    /// Right-to-left cell of a bidirectional layer.
    pub reverse_cell: Option<C>,
}

impl<C: RecurrentCell> Rnn<C> {
    pub fn unidirectional(cell: C, direction: Direction) -> Self {
        debug_assert_ne!(direction, Direction::Bidirectional);
        Rnn {
            direction,
            cell,
            reverse_cell: None,
        }
    }

    pub fn bidirectional(forward: C, backward: C) -> Self {
        Rnn {
            direction: Direction::Bidirectional,
            cell: forward,
            reverse_cell: Some(backward),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.cell.input_dim()
    }

    /// Width of each emitted state (`2·hidden` when bidirectional).
    pub fn output_dim(&self) -> usize {
        self.cell.hidden_dim() * self.direction.num_directions()
    }
}

impl Rnn<GruParams> {
    pub fn gru(
        params: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        direction: Direction,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cell = GruParams::new(params, &format!("{name}.fw"), input_dim, hidden_dim, rng)?;
        Ok(match direction {
            Direction::Bidirectional => {
                let bw = GruParams::new(params, &format!("{name}.bw"), input_dim, hidden_dim, rng)?;
                Rnn::bidirectional(cell, bw)
            }
            d => Rnn::unidirectional(cell, d),
        })
    }
}

impl Rnn<LstmParams> {
    pub fn lstm(
        params: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        direction: Direction,
        forget_bias: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cell = LstmParams::new(params, &format!("{name}.fw"), input_dim, hidden_dim, forget_bias, rng)?;
        Ok(match direction {
            Direction::Bidirectional => {
                let bw = LstmParams::new(params, &format!("{name}.bw"), input_dim, hidden_dim, forget_bias, rng)?;
                Rnn::bidirectional(cell, bw)
            }
            d => Rnn::unidirectional(cell, d),
        })
    }
}

/// Runs an RNN layer over `inputs[T, input_dim]`.
///
/// `LastState` returns the final hidden vector of each direction (the backward
/// direction finishes at `t = 0`); bidirectional outputs are `[forward; backward]`.
/// `AllStates` returns `T × output_dim`.
pub fn run_sequence<'t, C: RecurrentCell>(
    tape: &'t Tape<'t>,
    rnn: &Rnn<C>,
    inputs: Var<'t>,
    mode: Mode,
) -> Result<Var<'t>> {
    let shape = inputs.shape();
    if shape.len() == 2 && shape[0] == 0 {
        return Err(Error::EmptySequence("run_sequence"));
    }
    match rnn.direction {
        Direction::Forward => run_cell(tape, &rnn.cell, inputs, mode, false),
        Direction::Backward => run_cell(tape, &rnn.cell, inputs, mode, true),
        Direction::Bidirectional => {
            let bw = rnn
                .reverse_cell
                .as_ref()
                .ok_or_else(|| Error::contract("bidirectional RNN without a reverse cell"))?;
            let f = run_cell(tape, &rnn.cell, inputs, mode, false)?;
            let b = run_cell(tape, bw, inputs, mode, true)?;
            match mode {
                Mode::LastState => Var::concat(&[f, b]),
                Mode::AllStates => Var::concat_cols(&[f, b]),
            }
        }
    }
}

/// Runs an RNN layer over a list of input vectors.
pub fn run_sequence_vecs<'t, C: RecurrentCell>(
    tape: &'t Tape<'t>,
    rnn: &Rnn<C>,
    inputs: &[Var<'t>],
    mode: Mode,
) -> Result<Var<'t>> {
    if inputs.is_empty() {
        return Err(Error::EmptySequence("run_sequence"));
    }
    run_sequence(tape, rnn, Var::stack_rows(inputs)?, mode)
}

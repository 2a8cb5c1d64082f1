//! Parameterized building blocks. Each parameter type holds [`ParamId`]
//! handles into a [`ParamStore`]; the operations record onto a [`Graph`].

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore};
use crate::tensor::{dropout_mask, Graph, RngStream, Scalar, Tensor, Var};

/// Token → embedding lookup table, `[V×E]`.
#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    pub table: ParamId,
}

/// Gate order used by the per-gate arrays of [`LstmParams`].
pub const GATES: [char; 4] = ['f', 'i', 'o', 'z'];

/// Weights of one LSTM layer, one matrix per gate and source.
/// Input weights are `[H×E_in]`, recurrent weights `[H×H]`, biases `[H]`.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub input: [ParamId; 4],
    pub recurrent: [ParamId; 4],
    pub bias: [ParamId; 4],
}

#[derive(Clone, Debug)]
pub enum RoundWeight {
    Full(ParamId),
    /// Applied as `left · (right · x)`; `left: [dim×k]`, `right: [k×dim]`.
    Factored {
        left: ParamId,
        right: ParamId,
    },
}

#[derive(Clone, Debug)]
pub struct MogrifierRound {
    pub weight: RoundWeight,
    pub bias: Option<ParamId>,
}

/// Odd rounds (1, 3, ...) gate the input with the hidden state, even rounds
/// gate the hidden state with the input.
#[derive(Clone, Debug, Default)]
pub struct MogrifierParams {
    pub rounds: Vec<MogrifierRound>,
}

impl MogrifierParams {
    pub fn rounds(&self) -> usize {
        self.rounds.len()
    }
}

#[derive(Clone, Debug)]
pub struct DualHeadParams {
    pub w_embedding: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
}

/// Pre-softmax projection. When tied, `weight` is the embedding table.
#[derive(Clone, Debug)]
pub struct OutputParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub tied: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recurrence {
    Lstm,
    DLstm,
    MdLstm,
}

impl Recurrence {
    pub fn is_mogrified(self) -> bool {
        matches!(self, Recurrence::MdLstm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Recurrence::Lstm => "LSTM",
            Recurrence::DLstm => "dLSTM",
            Recurrence::MdLstm => "mdLSTM",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RecurrentLayer {
    pub lstm: LstmParams,
    pub mogrifier: Option<MogrifierParams>,
}

#[derive(Clone, Debug)]
pub struct RecurrentStack {
    pub kind: Recurrence,
    pub layers: Vec<RecurrentLayer>,
}

/// `(h, c)` of one layer on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
}

/// Carried `(h, c)` per layer, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    pub layers: Vec<LayerState<T>>,
}

impl<T: Scalar> RecurrentState<T> {
    pub fn zeros(layers: usize, batch: usize, units: usize) -> Self {
        RecurrentState {
            layers: (0..layers)
                .map(|_| LayerState {
                    h: Tensor::zeros(&[batch, units]),
                    c: Tensor::zeros(&[batch, units]),
                })
                .collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |l| l.h.dims2().0)
    }

    pub fn enter<'a>(&self, g: &mut Graph<'a, T>) -> Vec<CellState> {
        self.layers
            .iter()
            .map(|l| CellState {
                h: g.input(l.h.clone()),
                c: g.input(l.c.clone()),
            })
            .collect()
    }

    pub fn read(g: &Graph<'_, T>, cells: &[CellState]) -> Self {
        RecurrentState {
            layers: cells
                .iter()
                .map(|s| LayerState {
                    h: g.value(s.h).clone(),
                    c: g.value(s.c).clone(),
                })
                .collect(),
        }
    }
}

/// Dropout rates for every site of the network.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DropoutRates {
    /// On the embedding before the first recurrent layer.
    pub rec_input: f64,
    /// On the previous hidden state entering each recurrent layer
    /// (one mask per window, reused at every step).
    pub rec: f64,
    /// Between stacked recurrent layers.
    pub rec_internal: f64,
    /// After the last recurrent layer.
    pub rec_output: f64,
    /// On both inputs of the dual head, independent masks.
    pub dual_input: f64,
    /// After the dual head's ReLU.
    pub dual_output: f64,
    /// On the argument of every mogrifier round's linear map.
    pub mogrifier: f64,
}

impl DropoutRates {
    pub fn fields(&self) -> [(&'static str, f64); 7] {
        [
            ("dropout_rec_input", self.rec_input),
            ("dropout_rec", self.rec),
            ("dropout_rec_internal", self.rec_internal),
            ("dropout_rec_output", self.rec_output),
            ("dropout_dual_input", self.dual_input),
            ("dropout_dual_output", self.dual_output),
            ("dropout_mogrifier", self.mogrifier),
        ]
    }
}

/// Mask source for one window. In evaluation mode (`rng == None`) every
/// site is the identity and no random draws happen.
pub struct Dropout<'r> {
    rng: Option<&'r mut RngStream>,
    pub rates: DropoutRates,
    recurrent_masks: Vec<Option<Var>>,
}

impl<'r> Dropout<'r> {
    pub fn train(rates: DropoutRates, rng: &'r mut RngStream) -> Self {
        Dropout {
            rng: Some(rng),
            rates,
            recurrent_masks: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Dropout {
            rng: None,
            rates: DropoutRates::default(),
            recurrent_masks: Vec::new(),
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some()
    }

    /// Fresh per-call mask.
    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<'_, T>, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let shape = g.value(x).shape().to_vec();
        let mask = g.input(dropout_mask(&shape, rate, rng)?);
        g.mul(x, mask)
    }

    /// Mask for the recurrent-state path of `layer`, drawn once per window.
    pub fn apply_recurrent<T: Scalar>(
        &mut self,
        g: &mut Graph<'_, T>,
        layer: usize,
        h: Var,
    ) -> Result<Var> {
        let rate = self.rates.rec;
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(h);
        };
        if rate == 0.0 {
            return Ok(h);
        }
        if self.recurrent_masks.len() <= layer {
            self.recurrent_masks.resize(layer + 1, None);
        }
        let mask = match self.recurrent_masks[layer] {
            Some(m) => m,
            None => {
                let shape = g.value(h).shape().to_vec();
                let m = g.input(dropout_mask(&shape, rate, rng)?);
                self.recurrent_masks[layer] = Some(m);
                m
            }
        };
        g.mul(h, mask)
    }
}

/// Embedding rows for `ids`, shape `[ids.len()×E]`.
pub fn embed<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    p: &EmbeddingParams,
    ids: &[usize],
) -> Result<Var> {
    let table = store.leaf(g, p.table);
    g.embed(table, ids)
}

fn affine<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    x: Var,
    w: ParamId,
) -> Result<Var> {
    let w = store.leaf(g, w);
    g.linear(x, w)
}

/// One LSTM step. Returns `(h, c)`.
pub fn lstm_cell<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    p: &LstmParams,
    e: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let mut gates = [e; 4];
    for (k, gate) in gates.iter_mut().enumerate() {
        let from_input = affine(g, store, e, p.input[k])?;
        let from_hidden = affine(g, store, h_prev, p.recurrent[k])?;
        let pre = g.add(from_input, from_hidden)?;
        let b = store.leaf(g, p.bias[k]);
        let pre = g.add(pre, b)?;
        *gate = if k == 3 {
            g.tanh(pre)?
        } else {
            g.sigmoid(pre)?
        };
    }
    let [f, i, o, z] = gates;
    if g.value(c_prev).shape() != g.value(f).shape() {
        return Err(Error::Shape {
            op: "lstm_cell",
            left: g.value(c_prev).shape().to_vec(),
            right: g.value(f).shape().to_vec(),
        });
    }
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, z)?;
    let c = g.add(keep, write)?;
    let squashed = g.tanh(c)?;
    let h = g.mul(o, squashed)?;
    Ok((h, c))
}

fn round_map<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    round: &MogrifierRound,
    x: Var,
) -> Result<Var> {
    let z = match round.weight {
        RoundWeight::Full(w) => affine(g, store, x, w)?,
        RoundWeight::Factored { left, right } => {
            let narrow = affine(g, store, x, right)?;
            affine(g, store, narrow, left)?
        }
    };
    match round.bias {
        Some(b) => {
            let b = store.leaf(g, b);
            g.add(z, b)
        }
        None => Ok(z),
    }
}

/// Alternating mutual gating of input and hidden state. Round `i` (1-based)
/// rescales the input by `2σ(Q·h)` when odd and the hidden state by
/// `2σ(R·e)` when even, always using the latest value of the other operand.
/// Returns the highest-indexed pair; zero rounds return the inputs as is.
pub fn mogrify<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    p: &MogrifierParams,
    e: Var,
    h: Var,
    dropout: &mut Dropout<'_>,
) -> Result<(Var, Var)> {
    if p.rounds.is_empty() {
        return Ok((e, h));
    }
    if g.value(e).shape() != g.value(h).shape() {
        return Err(Error::Shape {
            op: "mogrify",
            left: g.value(e).shape().to_vec(),
            right: g.value(h).shape().to_vec(),
        });
    }
    let two = T::from_f64(2.0);
    let (mut e, mut h) = (e, h);
    for (idx, round) in p.rounds.iter().enumerate() {
        let odd = idx % 2 == 0;
        let src = if odd { h } else { e };
        let src = dropout.apply(g, src, dropout.rates.mogrifier)?;
        let z = round_map(g, store, round, src)?;
        let s = g.sigmoid(z)?;
        let gate = g.scale(s, two);
        if odd {
            e = g.mul(gate, e)?;
        } else {
            h = g.mul(gate, h)?;
        }
    }
    Ok((e, h))
}

/// One timestep through the whole recurrent module. Returns the top layer's
/// output and the new per-layer state.
pub fn recurrence_step<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    stack: &RecurrentStack,
    e: Var,
    state: &[CellState],
    dropout: &mut Dropout<'_>,
) -> Result<(Var, Vec<CellState>)> {
    if state.len() != stack.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} recurrence has {} layer(s) but the state carries {}",
            stack.kind.name(),
            stack.layers.len(),
            state.len()
        )));
    }
    let last = stack.layers.len() - 1;
    let mut input = e;
    let mut next = Vec::with_capacity(state.len());
    for (l, (layer, s)) in stack.layers.iter().zip(state).enumerate() {
        let h_prev = dropout.apply_recurrent(g, l, s.h)?;
        let (x, h_in) = match &layer.mogrifier {
            Some(m) => mogrify(g, store, m, input, h_prev, dropout)?,
            None => (input, h_prev),
        };
        let (h, c) = lstm_cell(g, store, &layer.lstm, x, h_in, s.c)?;
        next.push(CellState { h, c });
        input = if l < last {
            dropout.apply(g, h, dropout.rates.rec_internal)?
        } else {
            h
        };
    }
    Ok((input, next))
}

/// `ReLU(W_de·e + W_dh·h + b_d)`.
pub fn dual_head<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    p: &DualHeadParams,
    e: Var,
    h: Var,
) -> Result<Var> {
    let from_e = affine(g, store, e, p.w_embedding)?;
    let from_h = affine(g, store, h, p.w_hidden)?;
    let pre = g.add(from_e, from_h)?;
    let b = store.leaf(g, p.bias);
    let pre = g.add(pre, b)?;
    g.relu(pre)
}

/// `x·W_yᵀ + b_y`.
pub fn project_logits<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    p: &OutputParams,
    x: Var,
) -> Result<Var> {
    let z = affine(g, store, x, p.weight)?;
    let b = store.leaf(g, p.bias);
    g.add(z, b)
}

//! Assembly of ERS and Dual networks from a [`ModelConfig`], windowed
//! forward/backward passes for truncated BPTT, and parameter counting.

mod checkpoint;
mod config;
mod store;

pub use checkpoint::Checkpoint;
pub use config::{param_count, Architecture, InitScheme, L2Coefficients, ModelConfig, MODEL_KEYS};
pub use store::{Param, ParamGroup, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::layers::{
    dual_head, embed, project_logits, recurrence_step, CellState, Dropout, DualHeadParams,
    EmbeddingParams, LstmParams, MogrifierParams, MogrifierRound, OutputParams, RecurrentLayer,
    RecurrentStack, RecurrentState, RoundWeight, GATES,
};
use crate::tensor::{ops, softmax_rows, Graph, RngStream, Scalar, Tensor, Var};

/// Row-major `[batch×steps]` token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    batch: usize,
    steps: usize,
    ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, steps: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || steps == 0 || ids.len() != batch * steps {
            return Err(Error::InvalidArgument(format!(
                "token batch {batch}×{steps} cannot hold {} ids",
                ids.len()
            )));
        }
        Ok(TokenBatch { batch, steps, ids })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let steps = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != steps) {
            return Err(Error::InvalidArgument("ragged token rows".into()));
        }
        Self::new(rows.len(), steps, rows.concat())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn get(&self, b: usize, t: usize) -> usize {
        self.ids[b * self.steps + t]
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.steps..(b + 1) * self.steps]
    }

    /// Ids at timestep `t` for every sequence in the batch.
    pub fn column(&self, t: usize) -> Vec<usize> {
        (0..self.batch).map(|b| self.get(b, t)).collect()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Nodes produced by recording one window on a tape.
pub struct Recording {
    /// Per-step logits, `[B×V]` each.
    pub logits: Vec<Var>,
    /// Per-step top recurrent output before output dropout, `[B×H]` each.
    pub outputs: Vec<Var>,
    pub cells: Vec<CellState>,
}

#[derive(Clone, Debug)]
pub struct WindowOutput<T> {
    /// `[B×T×V]`.
    pub logits: Tensor<T>,
    pub state: RecurrentState<T>,
}

impl<T: Scalar> WindowOutput<T> {
    /// Softmax over the vocabulary at the given temperature, `[B×T×V]`.
    pub fn probabilities(&self, temperature: f64) -> Result<Tensor<T>> {
        let shape = self.logits.shape().to_vec();
        let flat = self
            .logits
            .clone()
            .reshape(&[shape[0] * shape[1], shape[2]])?;
        softmax_rows(&flat, temperature)?.reshape(&shape)
    }
}

/// Loss of one training window.
#[derive(Clone, Debug)]
pub struct WindowLoss<T> {
    /// Cross-entropy plus every configured L2 term.
    pub loss: f64,
    /// Summed per-token negative log-likelihood (f64 accumulation).
    pub nll_sum: f64,
    pub tokens: usize,
    pub state: RecurrentState<T>,
}

impl<T> WindowLoss<T> {
    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.tokens as f64
    }
}

/// A network layout: parameter handles plus the config that produced them.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    embedding: EmbeddingParams,
    stack: RecurrentStack,
    dual: Option<DualHeadParams>,
    output: OutputParams,
}

struct Init<'r> {
    rng: &'r mut RngStream,
    zero: bool,
}

impl Init<'_> {
    fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        if self.zero {
            Tensor::zeros(shape)
        } else {
            self.rng.uniform_tensor(shape, bound)
        }
    }

    fn constant<T: Scalar>(&mut self, shape: &[usize], value: f64) -> Tensor<T> {
        Tensor::full(shape, T::from_f64(if self.zero { 0.0 } else { value }))
    }
}

const EMBEDDING_INIT: f64 = 0.1;

/// Allocates and initializes every parameter and returns the layout.
pub fn build<T: Scalar>(
    config: &ModelConfig,
    rng: &mut RngStream,
) -> Result<(ParamStore<T>, Model)> {
    config.validate()?;
    let (v, e, h, d) = (
        config.vocab_size,
        config.embedding_units,
        config.recurrent_units,
        config.dual_units,
    );
    let mut store = ParamStore::new();
    let mut init = Init {
        rng,
        zero: config.init == InitScheme::Zero,
    };

    let table = store.add(
        "embedding.weight",
        ParamGroup::Embedding,
        init.uniform(&[v, e], EMBEDDING_INIT),
    )?;

    let lstm_bound = 1.0 / (h as f64).sqrt();
    let mut layers = Vec::with_capacity(config.lstm_layers);
    for l in 0..config.lstm_layers {
        let input_dim = if l == 0 { e } else { h };
        let mut add = |name: String, group, value| store.add(&name, group, value);
        let mut input = Vec::new();
        for c in GATES {
            input.push(add(
                format!("rec.{l}.w_{c}e"),
                ParamGroup::RecInput,
                init.uniform(&[h, input_dim], lstm_bound),
            )?);
        }
        let mut recurrent = Vec::new();
        for c in GATES {
            recurrent.push(add(
                format!("rec.{l}.w_{c}h"),
                ParamGroup::Recurrent,
                init.uniform(&[h, h], lstm_bound),
            )?);
        }
        let mut bias = Vec::new();
        for c in GATES {
            let b0 = if c == 'f' { 1.0 } else { 0.0 };
            bias.push(add(
                format!("rec.{l}.b_{c}"),
                ParamGroup::RecBias,
                init.constant(&[h], b0),
            )?);
        }
        let lstm = LstmParams {
            input: input.try_into().expect("four gates"),
            recurrent: recurrent.try_into().expect("four gates"),
            bias: bias.try_into().expect("four gates"),
        };

        let mogrifier = if config.recurrence.is_mogrified() {
            let mut rounds = Vec::new();
            for i in 1..=config.mogrifier_rounds {
                let (tag, rows, cols) = if i % 2 == 1 {
                    ('q', input_dim, h)
                } else {
                    ('r', h, input_dim)
                };
                let prefix = format!("rec.{l}.mog.{i}.{tag}");
                let weight = match config.mogrifier_rank {
                    0 => RoundWeight::Full(store.add(
                        &prefix,
                        ParamGroup::Mogrifier,
                        init.uniform(&[rows, cols], 1.0 / (cols as f64).sqrt()),
                    )?),
                    k => {
                        let right = store.add(
                            &format!("{prefix}_r"),
                            ParamGroup::Mogrifier,
                            init.uniform(&[k, cols], 1.0 / (cols as f64).sqrt()),
                        )?;
                        let left = store.add(
                            &format!("{prefix}_l"),
                            ParamGroup::Mogrifier,
                            init.uniform(&[rows, k], 1.0 / (k as f64).sqrt()),
                        )?;
                        RoundWeight::Factored { left, right }
                    }
                };
                let bias = if config.mogrifier_bias {
                    Some(store.add(
                        &format!("rec.{l}.mog.{i}.b"),
                        ParamGroup::MogrifierBias,
                        init.constant(&[rows], 0.0),
                    )?)
                } else {
                    None
                };
                rounds.push(MogrifierRound { weight, bias });
            }
            Some(MogrifierParams { rounds })
        } else {
            None
        };
        layers.push(RecurrentLayer { lstm, mogrifier });
    }

    let dual = match config.architecture {
        Architecture::Ers => None,
        Architecture::Dual => {
            let bound = 1.0 / ((e + h) as f64).sqrt();
            Some(DualHeadParams {
                w_embedding: store.add(
                    "dual.w_de",
                    ParamGroup::Dual,
                    init.uniform(&[d, e], bound),
                )?,
                w_hidden: store.add("dual.w_dh", ParamGroup::Dual, init.uniform(&[d, h], bound))?,
                bias: store.add("dual.b_d", ParamGroup::DualBias, init.constant(&[d], 0.0))?,
            })
        }
    };

    let width = config.head_width();
    let weight = if config.tie_weights {
        store.alias("output.weight", table)?;
        table
    } else {
        store.add(
            "output.weight",
            ParamGroup::Embedding,
            init.uniform(&[v, width], 1.0 / (width as f64).sqrt()),
        )?
    };
    let output = OutputParams {
        weight,
        bias: store.add(
            "output.bias",
            ParamGroup::OutputBias,
            init.constant(&[v], 0.0),
        )?,
        tied: config.tie_weights,
    };

    let model = Model {
        config: config.clone(),
        embedding: EmbeddingParams { table },
        stack: RecurrentStack {
            kind: config.recurrence,
            layers,
        },
        dual,
        output,
    };
    Ok((store, model))
}

impl Model {
    /// Rebuilds the layout for an existing store (for example one read from
    /// a checkpoint). Names and shapes must match what [`build`] creates.
    pub fn bind<T: Scalar>(config: &ModelConfig, store: &ParamStore<T>) -> Result<Model> {
        let mut rng = RngStream::new(0);
        let zero = ModelConfig {
            init: InitScheme::Zero,
            ..config.clone()
        };
        let (template, model) = build::<T>(&zero, &mut rng)?;
        if template.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "store has {} parameters, config expects {}",
                store.len(),
                template.len()
            )));
        }
        for ((_, want), (_, got)) in template.iter().zip(store.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stack(&self) -> &RecurrentStack {
        &self.stack
    }

    pub fn embedding(&self) -> &EmbeddingParams {
        &self.embedding
    }

    pub fn dual(&self) -> Option<&DualHeadParams> {
        self.dual.as_ref()
    }

    pub fn output(&self) -> &OutputParams {
        &self.output
    }

    pub fn zero_state<T: Scalar>(&self, batch: usize) -> RecurrentState<T> {
        RecurrentState::zeros(self.config.lstm_layers, batch, self.config.recurrent_units)
    }

    fn check_state<T: Scalar>(&self, x: &TokenBatch, state: &RecurrentState<T>) -> Result<()> {
        let ok = state.layers.len() == self.config.lstm_layers
            && state.layers.iter().all(|l| {
                l.h.shape() == [x.batch(), self.config.recurrent_units]
                    && l.c.shape() == [x.batch(), self.config.recurrent_units]
            });
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "recurrent state does not match a {}-layer model of width {} at batch {}",
                self.config.lstm_layers,
                self.config.recurrent_units,
                x.batch()
            )));
        }
        Ok(())
    }

    /// Records the network over every step of `x` on `g`.
    pub fn record<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: &TokenBatch,
        state: &RecurrentState<T>,
        dropout: &mut Dropout<'_>,
    ) -> Result<Recording> {
        self.check_state(x, state)?;
        let rates = dropout.rates;
        let mut cells = state.enter(g);
        let mut logits = Vec::with_capacity(x.steps());
        let mut outputs = Vec::with_capacity(x.steps());
        for t in 0..x.steps() {
            let e = embed(g, store, &self.embedding, &x.column(t))?;
            let rec_in = dropout.apply(g, e, rates.rec_input)?;
            let (h, next) = recurrence_step(g, store, &self.stack, rec_in, &cells, dropout)?;
            cells = next;
            outputs.push(h);
            let h_out = dropout.apply(g, h, rates.rec_output)?;
            let features = match &self.dual {
                Some(p) => {
                    let e_in = dropout.apply(g, e, rates.dual_input)?;
                    let h_in = dropout.apply(g, h_out, rates.dual_input)?;
                    let d = dual_head(g, store, p, e_in, h_in)?;
                    dropout.apply(g, d, rates.dual_output)?
                }
                None => h_out,
            };
            logits.push(project_logits(g, store, &self.output, features)?);
        }
        Ok(Recording {
            logits,
            outputs,
            cells,
        })
    }

    /// Evaluation or training-mode forward pass over one window. Dropout
    /// draws come from `rng` in train mode only.
    pub fn forward_window<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &TokenBatch,
        state: &RecurrentState<T>,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<WindowOutput<T>> {
        let mut g = Graph::new();
        let mut dropout = match mode {
            Mode::Train => Dropout::train(self.config.dropout, rng),
            Mode::Eval => Dropout::eval(),
        };
        let rec = self.record(&mut g, store, x, state, &mut dropout)?;
        let (b, steps, v) = (x.batch(), x.steps(), self.config.vocab_size);
        let mut out = vec![T::zero(); b * steps * v];
        for (t, &l) in rec.logits.iter().enumerate() {
            let lt = g.value(l);
            if !lt.is_finite() {
                return Err(Error::NonFinite {
                    site: format!("logits at step {t}"),
                });
            }
            for r in 0..b {
                out[(r * steps + t) * v..(r * steps + t + 1) * v].copy_from_slice(lt.row(r));
            }
        }
        Ok(WindowOutput {
            logits: Tensor::new(&[b, steps, v], out)?,
            state: RecurrentState::read(&g, &rec.cells),
        })
    }

    /// Summed negative log-likelihood of `y` under the recorded logits.
    pub fn window_nll<T: Scalar>(
        g: &Graph<'_, T>,
        rec: &Recording,
        y: &TokenBatch,
        temperature: f64,
    ) -> Result<f64> {
        let mut total = 0.0;
        Self::accumulate_nll(g, rec, y, temperature, &mut total)?;
        Ok(total)
    }

    /// Adds each token's negative log-likelihood to `total` one at a time,
    /// step-major. A stream scored in windows of any length therefore sums
    /// the same terms in the same order.
    pub fn accumulate_nll<T: Scalar>(
        g: &Graph<'_, T>,
        rec: &Recording,
        y: &TokenBatch,
        temperature: f64,
        total: &mut f64,
    ) -> Result<()> {
        for (t, &l) in rec.logits.iter().enumerate() {
            for nll in ops::row_nll(g.value(l), &y.column(t), temperature)? {
                *total += nll;
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite {
                site: "negative log-likelihood".into(),
            });
        }
        Ok(())
    }

    fn l2_coefficient(&self, group: ParamGroup) -> f64 {
        let l2 = &self.config.l2;
        match group {
            ParamGroup::Embedding => l2.embedding,
            ParamGroup::RecInput => l2.rec_input,
            ParamGroup::Recurrent => l2.rec,
            ParamGroup::Dual => l2.dual,
            ParamGroup::Mogrifier => l2.mogrifier,
            ParamGroup::OutputBias
            | ParamGroup::RecBias
            | ParamGroup::MogrifierBias
            | ParamGroup::DualBias => 0.0,
        }
    }

    /// Mean per-token cross-entropy (temperature 1), optionally plus all
    /// configured L2 terms.
    pub fn loss<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        rec: &Recording,
        y: &TokenBatch,
        regularize: bool,
    ) -> Result<Var> {
        let tokens = y.len();
        let per_token = T::from_f64(1.0 / tokens as f64);
        let mut terms = Vec::new();
        for (t, &l) in rec.logits.iter().enumerate() {
            terms.push(g.cross_entropy(l, &y.column(t), 1.0, per_token)?);
        }
        if regularize {
            let act = self.config.l2.activation;
            if act > 0.0 {
                for &h in &rec.outputs {
                    let s = g.sum_squares(h);
                    terms.push(g.scale(s, T::from_f64(act / tokens as f64)));
                }
            }
            for (id, p) in store.iter() {
                let coef = self.l2_coefficient(p.group);
                if coef > 0.0 {
                    let w = store.leaf(g, id);
                    let s = g.sum_squares(w);
                    terms.push(g.scale(s, T::from_f64(coef)));
                }
            }
        }
        g.sum(&terms)
    }

    /// Training-mode forward and backward over one window. Gradients are
    /// added to `store`; the returned state is detached.
    pub fn backward_window<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        x: &TokenBatch,
        y: &TokenBatch,
        state: &RecurrentState<T>,
        rng: &mut RngStream,
    ) -> Result<WindowLoss<T>> {
        if x.batch() != y.batch() || x.steps() != y.steps() {
            return Err(Error::InvalidArgument(
                "inputs and targets differ in shape".into(),
            ));
        }
        let (grads, loss, nll_sum, state) = {
            let frozen: &ParamStore<T> = store;
            let mut g = Graph::new();
            let mut dropout = Dropout::train(self.config.dropout, rng);
            let rec = self.record(&mut g, frozen, x, state, &mut dropout)?;
            let nll_sum = Self::window_nll(&g, &rec, y, 1.0)?;
            let root = self.loss(&mut g, frozen, &rec, y, true)?;
            let loss = g.value(root).values()[0].as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    site: "training loss".into(),
                });
            }
            (
                g.backward(root)?,
                loss,
                nll_sum,
                RecurrentState::read(&g, &rec.cells),
            )
        };
        store.accumulate(&grads);
        Ok(WindowLoss {
            loss,
            nll_sum,
            tokens: y.len(),
            state,
        })
    }
}

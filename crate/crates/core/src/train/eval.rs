use crate::data::BatchStream;
use crate::error::{Error, Result};
use crate::layers::{Dropout, RecurrentState};
use crate::model::{Model, ParamStore, TokenBatch};
use crate::optim::{clip_global_norm, NadamState};
use crate::tensor::{Gradients, Graph, Scalar};

/// Settings shared by static evaluation, dynamic evaluation and the sweeps.
/// `lr`, `clipnorm` and `beta1` only matter for dynamic evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub batch_size: usize,
    pub seq_len: usize,
    pub temperature: f64,
    pub lr: f64,
    /// Global gradient-norm ceiling for adaptation steps; 0 disables it.
    pub clipnorm: f64,
    pub beta1: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            batch_size: 10,
            seq_len: 25,
            temperature: 1.0,
            lr: 1e-5,
            clipnorm: 1.0,
            beta1: 0.9,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("eval_batch_size", "must be positive"));
        }
        if self.seq_len == 0 {
            return Err(Error::config("seq_len_eval", "must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be a positive number"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(
                "lr_eval",
                "must be a finite non-negative number",
            ));
        }
        if self.clipnorm.is_nan() || self.clipnorm < 0.0 {
            return Err(Error::config("clipnorm_eval", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1_eval", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Summed negative log-likelihood over a scored stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub nll_sum: f64,
    pub tokens: usize,
}

impl EvalResult {
    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.tokens as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean_nll().exp()
    }
}

struct Scored<T> {
    state: RecurrentState<T>,
    grads: Option<Gradients<T>>,
}

/// Eval-mode pass over one window. With `adapt`, also backpropagates the
/// unregularized mean cross-entropy at temperature 1 through the same tape,
/// so the score never depends on whether adaptation follows.
#[allow(clippy::too_many_arguments)]
fn score_window<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    x: &TokenBatch,
    y: &TokenBatch,
    state: &RecurrentState<T>,
    temperature: f64,
    adapt: bool,
    total: &mut EvalResult,
) -> Result<Scored<T>> {
    let mut g = Graph::new();
    let mut dropout = Dropout::eval();
    let rec = model.record(&mut g, store, x, state, &mut dropout)?;
    Model::accumulate_nll(&g, &rec, y, temperature, &mut total.nll_sum)?;
    total.tokens += y.len();
    let grads = if adapt {
        let root = model.loss(&mut g, store, &rec, y, false)?;
        Some(g.backward(root)?)
    } else {
        None
    };
    Ok(Scored {
        state: RecurrentState::read(&g, &rec.cells),
        grads,
    })
}

/// Perplexity of `ids` with the state carried across windows and no
/// dropout.
pub fn evaluate<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    ids: &[usize],
    settings: &EvalSettings,
) -> Result<EvalResult> {
    settings.validate()?;
    let stream = BatchStream::new(ids, settings.batch_size)?;
    let mut state = model.zero_state(stream.batch());
    let mut total = EvalResult {
        nll_sum: 0.0,
        tokens: 0,
    };
    for (x, y) in stream.windows(settings.seq_len) {
        state = score_window(
            model,
            store,
            &x,
            &y,
            &state,
            settings.temperature,
            false,
            &mut total,
        )?
        .state;
    }
    Ok(total)
}

/// Score-then-adapt evaluation on a private copy of the parameters. The
/// copy and its optimizer moments persist across [`DynamicEvaluator::run`]
/// calls, so adapting on one stream before scoring another is a matter of
/// running both in order.
pub struct DynamicEvaluator<'m, T> {
    model: &'m Model,
    store: ParamStore<T>,
    opt: NadamState,
    settings: EvalSettings,
}

impl<'m, T: Scalar> DynamicEvaluator<'m, T> {
    pub fn new(model: &'m Model, store: &ParamStore<T>, settings: &EvalSettings) -> Result<Self> {
        settings.validate()?;
        let mut store = store.clone();
        store.zero_grads();
        store.reset_moments();
        Ok(DynamicEvaluator {
            model,
            store,
            opt: NadamState::new(settings.lr).with_beta1(settings.beta1),
            settings: settings.clone(),
        })
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    /// Scores each window with the current parameters, then takes one
    /// clipped Nadam step on that window's cross-entropy.
    pub fn run(&mut self, ids: &[usize]) -> Result<EvalResult> {
        let stream = BatchStream::new(ids, self.settings.batch_size)?;
        let mut state = self.model.zero_state(stream.batch());
        let mut total = EvalResult {
            nll_sum: 0.0,
            tokens: 0,
        };
        for (x, y) in stream.windows(self.settings.seq_len) {
            let s = score_window(
                self.model,
                &self.store,
                &x,
                &y,
                &state,
                self.settings.temperature,
                true,
                &mut total,
            )?;
            state = s.state;
            self.store
                .accumulate(&s.grads.expect("adaptation requested"));
            let norm = clip_global_norm(&mut self.store, self.settings.clipnorm);
            if !norm.is_finite() {
                return Err(Error::NonFinite {
                    site: "dynamic evaluation gradient".into(),
                });
            }
            self.opt.step(&mut self.store)?;
        }
        Ok(total)
    }
}

/// One dynamic-evaluation pass over `ids`. The caller's parameters are not
/// modified.
pub fn dynamic_eval<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    ids: &[usize],
    settings: &EvalSettings,
) -> Result<EvalResult> {
    DynamicEvaluator::new(model, store, settings)?.run(ids)
}

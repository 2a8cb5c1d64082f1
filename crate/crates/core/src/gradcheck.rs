//! Central finite-difference checks of the reverse-mode gradients, run in
//! f64 on tiny shapes.

use std::fmt::Write as _;

use crate::error::Result;
use crate::layers::{
    dual_head, embed, lstm_cell, mogrify, project_logits, recurrence_step, CellState, Dropout,
    Recurrence, RoundWeight,
};
use crate::model::{build, Architecture, ModelConfig, ParamId, ParamStore, TokenBatch};
use crate::tensor::{Graph, RngStream, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const THRESHOLD: f64 = 1e-4;
/// Denominator floor so that near-zero gradients are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Number of scalars perturbed.
    pub checked: usize,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < THRESHOLD
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(GradCheckEntry::passed)
    }

    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(4);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:w$}  {:>8}  {:>12}  result",
            "case",
            "scalars",
            "max_rel_err",
            w = width
        );
        for e in &self.entries {
            let verdict = if e.passed() { "pass" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{:w$}  {:>8}  {:>12.3e}  {verdict}",
                e.name,
                e.checked,
                e.max_rel_err,
                w = width
            );
        }
        out
    }
}

/// A scalar function of some parameters and dense inputs, recorded on a tape.
trait Case {
    fn name(&self) -> String;
    fn params(&self) -> Vec<ParamId>;
    fn record<'a>(
        &self,
        g: &mut Graph<'a, f64>,
        store: &'a ParamStore<f64>,
        inputs: &[Var],
    ) -> Result<Vec<Var>>;
}

/// Reduces the outputs to a scalar with fixed random weights:
/// `Σ_k Σ (out_k ⊙ w_k)²`, which keeps every output element in play.
fn reduce<'a>(g: &mut Graph<'a, f64>, outs: &[Var], weights: &[Tensor<f64>]) -> Result<Var> {
    let mut terms = Vec::new();
    for (&o, w) in outs.iter().zip(weights) {
        let w = g.input(w.clone());
        let m = g.mul(o, w)?;
        terms.push(g.sum_squares(m));
    }
    g.sum(&terms)
}

struct Harness {
    rng: RngStream,
}

impl Harness {
    fn weights(&mut self, g: &Graph<'_, f64>, outs: &[Var]) -> Vec<Tensor<f64>> {
        outs.iter()
            .map(|&o| self.rng.uniform_tensor(g.value(o).shape(), 1.0))
            .collect()
    }

    fn check(
        &mut self,
        case: &dyn Case,
        store: &ParamStore<f64>,
        inputs: &[Tensor<f64>],
    ) -> Result<GradCheckEntry> {
        let weights = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let outs = case.record(&mut g, store, &vars)?;
            self.weights(&g, &outs)
        };
        let loss = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let outs = case.record(&mut g, store, &vars)?;
            let root = reduce(&mut g, &outs, &weights)?;
            Ok(g.value(root).values()[0])
        };

        let (param_grads, input_grads) = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let outs = case.record(&mut g, store, &vars)?;
            let root = reduce(&mut g, &outs, &weights)?;
            let grads = g.backward(root)?;
            let shape_of = |id: ParamId| store.value(id).shape().to_vec();
            let params: Vec<Tensor<f64>> = case
                .params()
                .iter()
                .map(|&id| {
                    grads
                        .param(id.index())
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(&shape_of(id)))
                })
                .collect();
            let ins: Vec<Tensor<f64>> = vars
                .iter()
                .zip(inputs)
                .map(|(&v, t)| {
                    grads
                        .wrt(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(t.shape()))
                })
                .collect();
            (params, ins)
        };

        let mut worst: f64 = 0.0;
        let mut checked = 0;
        let mut store = store.clone();
        for (k, &id) in case.params().iter().enumerate() {
            for i in 0..store.value(id).len() {
                let orig = store.value(id).values()[i];
                store.value_mut(id).values_mut()[i] = orig + STEP;
                let up = loss(&store, inputs)?;
                store.value_mut(id).values_mut()[i] = orig - STEP;
                let down = loss(&store, inputs)?;
                store.value_mut(id).values_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                worst = worst.max(relative_error(param_grads[k].values()[i], numeric));
                checked += 1;
            }
        }
        let mut inputs = inputs.to_vec();
        for k in 0..inputs.len() {
            for i in 0..inputs[k].len() {
                let orig = inputs[k].values()[i];
                inputs[k].values_mut()[i] = orig + STEP;
                let up = loss(&store, &inputs)?;
                inputs[k].values_mut()[i] = orig - STEP;
                let down = loss(&store, &inputs)?;
                inputs[k].values_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                worst = worst.max(relative_error(input_grads[k].values()[i], numeric));
                checked += 1;
            }
        }
        Ok(GradCheckEntry {
            name: case.name(),
            max_rel_err: worst,
            checked,
        })
    }
}

const V: usize = 7;
const UNITS: usize = 3;
const BATCH: usize = 2;
const STEPS: usize = 4;

/// Builds a model and overwrites every parameter with U(−0.5, 0.5) so that
/// biases and the forget gate start away from their special initial values.
fn randomized(
    config: &ModelConfig,
    rng: &mut RngStream,
) -> Result<(ParamStore<f64>, crate::model::Model)> {
    let (mut store, model) = build::<f64>(config, rng)?;
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = rng.uniform_tensor(&shape, 0.5);
    }
    Ok((store, model))
}

fn round_ids(rounds: &[crate::layers::MogrifierRound]) -> Vec<ParamId> {
    let mut ids = Vec::new();
    for r in rounds {
        match r.weight {
            RoundWeight::Full(w) => ids.push(w),
            RoundWeight::Factored { left, right } => ids.extend([left, right]),
        }
        ids.extend(r.bias);
    }
    ids
}

fn lstm_ids(p: &crate::layers::LstmParams) -> Vec<ParamId> {
    p.input
        .iter()
        .chain(&p.recurrent)
        .chain(&p.bias)
        .copied()
        .collect()
}

struct EmbedCase {
    model: crate::model::Model,
}

impl Case for EmbedCase {
    fn name(&self) -> String {
        "embed".into()
    }
    fn params(&self) -> Vec<ParamId> {
        vec![self.model.embedding().table]
    }
    fn record<'a>(
        &self,
        g: &mut Graph<'a, f64>,
        store: &'a ParamStore<f64>,
        _: &[Var],
    ) -> Result<Vec<Var>> {
        // A repeated id exercises gradient accumulation into one row.
        Ok(vec![embed(
            g,
            store,
            self.model.embedding(),
            &[3, 0, 3, 6],
        )?])
    }
}

struct LstmCase {
    model: crate::model::Model,
}

impl Case for LstmCase {
    fn name(&self) -> String {
        "lstm_cell".into()
    }
    fn params(&self) -> Vec<ParamId> {
        lstm_ids(&self.model.stack().layers[0].lstm)
    }
    fn record<'a>(
        &self,
        g: &mut Graph<'a, f64>,
        store: &'a ParamStore<f64>,
        x: &[Var],
    ) -> Result<Vec<Var>> {
        let (h, c) = lstm_cell(
            g,
            store,
            &self.model.stack().layers[0].lstm,
            x[0],
            x[1],
            x[2],
        )?;
        Ok(vec![h, c])
    }
}

struct MogrifyCase {
    model: crate::model::Model,
    label: String,
}

impl Case for MogrifyCase {
    fn name(&self) -> String {
        self.label.clone()
    }
    fn params(&self) -> Vec<ParamId> {
        round_ids(
            &self.model.stack().layers[0]
                .mogrifier
                .as_ref()
                .expect("mogrified")
                .rounds,
        )
    }
    fn record<'a>(
        &self,
        g: &mut Graph<'a, f64>,
        store: &'a ParamStore<f64>,
        x: &[Var],
    ) -> Result<Vec<Var>> {
        let m = self.model.stack().layers[0]
            .mogrifier
            .as_ref()
            .expect("mogrified");
        let (e, h) = mogrify(g, store, m, x[0], x[1], &mut Dropout::eval())?;
        Ok(vec![e, h])
    }
}

struct DualCase {
    model: crate::model::Model,
}

impl Case for DualCase {
    fn name(&self) -> String {
        "dual_head".into()
    }
    fn params(&self) -> Vec<ParamId> {
        let p = self.model.dual().expect("dual");
        vec![p.w_embedding, p.w_hidden, p.bias]
    }
    fn record<'a>(
        &self,
        g: &mut Graph<'a, f64>,
        store: &'a ParamStore<f64>,
        x: &[Var],
    ) -> Result<Vec<Var>> {
        Ok(vec![dual_head(
            g,
            store,
            self.model.dual().expect("dual"),
            x[0],
            x[1],
        )?])
    }
}

struct ProjectCase {
    model: crate::model::Model,
}

impl Case for ProjectCase {
    fn name(&self) -> String {
        let tie = if self.model.output().tied {
            "tied"
        } else {
            "untied"
        };
        format!("project_logits {tie}")
    }
    fn params(&self) -> Vec<ParamId> {
        let p = self.model.output();
        vec![p.weight, p.bias]
    }
    fn record<'a>(
        &self,
        g: &mut Graph<'a, f64>,
        store: &'a ParamStore<f64>,
        x: &[Var],
    ) -> Result<Vec<Var>> {
        Ok(vec![project_logits(g, store, self.model.output(), x[0])?])
    }
}

/// Three chained steps of a two-layer mogrified stack, so gradients flow
/// through time and across layers.
struct RecurrenceCase {
    model: crate::model::Model,
}

impl Case for RecurrenceCase {
    fn name(&self) -> String {
        "recurrence_step x3".into()
    }
    fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for layer in &self.model.stack().layers {
            ids.extend(lstm_ids(&layer.lstm));
            if let Some(m) = &layer.mogrifier {
                ids.extend(round_ids(&m.rounds));
            }
        }
        ids
    }
    fn record<'a>(
        &self,
        g: &mut Graph<'a, f64>,
        store: &'a ParamStore<f64>,
        x: &[Var],
    ) -> Result<Vec<Var>> {
        let mut cells = vec![
            CellState { h: x[3], c: x[4] },
            CellState { h: x[5], c: x[6] },
        ];
        let mut outs = Vec::new();
        for &e in &x[..3] {
            let (h, next) = recurrence_step(
                g,
                store,
                self.model.stack(),
                e,
                &cells,
                &mut Dropout::eval(),
            )?;
            outs.push(h);
            cells = next;
        }
        outs.extend(cells.iter().map(|c| c.c));
        Ok(outs)
    }
}

/// Full training loss of one window: dropout (fixed masks via a fixed
/// seed), cross-entropy and every L2 term, through the tied output layer.
fn check_window(rng: &mut RngStream) -> Result<GradCheckEntry> {
    let mut cfg = ModelConfig::tiny(Architecture::Dual, Recurrence::MdLstm, V, UNITS);
    cfg.lstm_layers = 2;
    cfg.mogrifier_rounds = 2;
    cfg.mogrifier_rank = 0;
    cfg.mogrifier_bias = true;
    for (rate, value) in [
        (&mut cfg.dropout.rec_input, 0.1),
        (&mut cfg.dropout.rec, 0.2),
        (&mut cfg.dropout.rec_internal, 0.1),
        (&mut cfg.dropout.rec_output, 0.2),
        (&mut cfg.dropout.dual_input, 0.1),
        (&mut cfg.dropout.dual_output, 0.2),
        (&mut cfg.dropout.mogrifier, 0.1),
    ] {
        *rate = value;
    }
    cfg.l2.embedding = 1e-3;
    cfg.l2.rec_input = 1e-3;
    cfg.l2.rec = 1e-3;
    cfg.l2.activation = 1e-3;
    cfg.l2.dual = 1e-3;
    cfg.l2.mogrifier = 1e-3;
    let (store, model) = randomized(&cfg, rng)?;
    let ids: Vec<usize> = (0..BATCH * (STEPS + 1)).map(|_| rng.below(V)).collect();
    let rows: Vec<Vec<usize>> = ids.chunks(STEPS + 1).map(<[usize]>::to_vec).collect();
    let x = TokenBatch::from_rows(&rows.iter().map(|r| r[..STEPS].to_vec()).collect::<Vec<_>>())?;
    let y = TokenBatch::from_rows(&rows.iter().map(|r| r[1..].to_vec()).collect::<Vec<_>>())?;
    let mut state = model.zero_state::<f64>(BATCH);
    for layer in &mut state.layers {
        layer.h = rng.uniform_tensor(&[BATCH, UNITS], 0.5);
        layer.c = rng.uniform_tensor(&[BATCH, UNITS], 0.5);
    }
    let mask_seed = rng.below(1 << 30) as u64;

    let loss = |store: &mut ParamStore<f64>| -> Result<f64> {
        let out = model.backward_window(store, &x, &y, &state, &mut RngStream::new(mask_seed))?;
        Ok(out.loss)
    };
    let mut store = store;
    store.zero_grads();
    loss(&mut store)?;
    let analytic: Vec<(ParamId, Tensor<f64>)> = store
        .iter()
        .map(|(id, p)| {
            (
                id,
                p.grad
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape())),
            )
        })
        .collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (id, grad) in &analytic {
        for i in 0..grad.len() {
            let orig = store.value(*id).values()[i];
            store.value_mut(*id).values_mut()[i] = orig + STEP;
            let up = loss(&mut store)?;
            store.value_mut(*id).values_mut()[i] = orig - STEP;
            let down = loss(&mut store)?;
            store.value_mut(*id).values_mut()[i] = orig;
            worst = worst.max(relative_error(grad.values()[i], (up - down) / (2.0 * STEP)));
            checked += 1;
        }
    }
    Ok(GradCheckEntry {
        name: "backward_window Dual mdLSTM".into(),
        max_rel_err: worst,
        checked,
    })
}

/// Runs every case with randomness drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<GradCheckReport> {
    let mut rng = RngStream::new(seed);
    let mut h = Harness {
        rng: RngStream::with_stream(seed, 1),
    };
    let mut entries = Vec::new();
    let (b, u) = (BATCH, UNITS);
    let dense = |rng: &mut RngStream, n: usize| -> Vec<Tensor<f64>> {
        (0..n).map(|_| rng.uniform_tensor(&[b, u], 1.0)).collect()
    };

    let cfg = ModelConfig::tiny(Architecture::Dual, Recurrence::Lstm, V, UNITS);
    let (store, model) = randomized(&cfg, &mut rng)?;
    entries.push(h.check(
        &EmbedCase {
            model: model.clone(),
        },
        &store,
        &[],
    )?);
    let x = dense(&mut rng, 3);
    entries.push(h.check(
        &LstmCase {
            model: model.clone(),
        },
        &store,
        &x,
    )?);
    let x = dense(&mut rng, 2);
    entries.push(h.check(
        &DualCase {
            model: model.clone(),
        },
        &store,
        &x,
    )?);

    for tied in [true, false] {
        let cfg = ModelConfig {
            tie_weights: tied,
            ..ModelConfig::tiny(Architecture::Ers, Recurrence::Lstm, V, UNITS)
        };
        let (store, model) = randomized(&cfg, &mut rng)?;
        let x = dense(&mut rng, 1);
        entries.push(h.check(&ProjectCase { model }, &store, &x)?);
    }

    for rounds in [2, 4] {
        for rank in [0, 2] {
            let cfg = ModelConfig {
                mogrifier_rounds: rounds,
                mogrifier_rank: rank,
                mogrifier_bias: true,
                lstm_layers: 1,
                ..ModelConfig::tiny(Architecture::Ers, Recurrence::MdLstm, V, UNITS)
            };
            let (store, model) = randomized(&cfg, &mut rng)?;
            let kind = if rank == 0 {
                "full".to_string()
            } else {
                format!("rank {rank}")
            };
            let label = format!("mogrify r={rounds} {kind}");
            let x = dense(&mut rng, 2);
            entries.push(h.check(&MogrifyCase { model, label }, &store, &x)?);
        }
    }

    let cfg = ModelConfig {
        lstm_layers: 2,
        mogrifier_rounds: 3,
        mogrifier_rank: 2,
        ..ModelConfig::tiny(Architecture::Ers, Recurrence::MdLstm, V, UNITS)
    };
    let (store, model) = randomized(&cfg, &mut rng)?;
    let x = dense(&mut rng, 7);
    entries.push(h.check(&RecurrenceCase { model }, &store, &x)?);

    entries.push(check_window(&mut rng)?);
    Ok(GradCheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn suite_passes() {
        let report = run_suite(5).unwrap();
        assert_eq!(report.entries.len(), 11);
        assert!(report.passed(), "{}", report.to_text());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Wrong;
        impl Case for Wrong {
            fn name(&self) -> String {
                "wrong".into()
            }
            fn params(&self) -> Vec<ParamId> {
                vec![]
            }
            fn record<'a>(
                &self,
                g: &mut Graph<'a, f64>,
                _: &'a ParamStore<f64>,
                x: &[Var],
            ) -> Result<Vec<Var>> {
                // The constant is treated as an input, so its dependence on x
                // is invisible to the tape.
                let c = g.value(x[0]).clone();
                let c = g.input(c);
                Ok(vec![g.mul(x[0], c)?])
            }
        }
        let mut h = Harness {
            rng: RngStream::new(1),
        };
        let x = vec![Tensor::new(&[1, 2], vec![0.7, -0.4]).unwrap()];
        let e = h.check(&Wrong, &ParamStore::new(), &x).unwrap();
        assert!(!e.passed());
    }
}

//! Training loop with best-checkpoint selection, static and dynamic
//! evaluation, post-hoc sweeps, and the ERS-versus-Dual comparison.

mod compare;
mod eval;
mod tune;

pub use compare::{compare_architectures, format_params, Comparison, ComparisonRow};
pub use eval::{dynamic_eval, evaluate, DynamicEvaluator, EvalResult, EvalSettings};
pub use tune::{tune_posthoc, tune_with_grids, Grids, Trial, TuneMode, TuneReport};

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::BatchStream;
use crate::error::{Error, Result};
use crate::model::{build, Checkpoint, Model, ModelConfig};
use crate::optim::{clip_global_norm, NadamState};
use crate::tensor::{RngStream, Scalar};

/// Randomness for dropout masks is drawn from this stream of the run seed;
/// stream 0 initializes the parameters.
pub const DROPOUT_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clipnorm: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 100,
            batch_size: 32,
            seq_len: 25,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clipnorm: 1.0,
            eval_batch_size: 10,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("eval_batch_size", self.eval_batch_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1", "Nadam betas must lie in [0, 1)"));
        }
        if self.clipnorm.is_nan() || self.clipnorm < 0.0 {
            return Err(Error::config("clipnorm", "must be non-negative"));
        }
        Ok(())
    }

    fn optimizer(&self) -> NadamState {
        let mut opt = NadamState::new(self.lr).with_beta1(self.beta1);
        opt.beta2 = self.beta2;
        opt.eps = self.eps;
        opt
    }

    fn validation(&self) -> EvalSettings {
        EvalSettings {
            batch_size: self.eval_batch_size,
            seq_len: self.seq_len,
            ..EvalSettings::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Token-weighted mean training loss including regularization.
    pub train_loss: f64,
    /// Perplexity of the training windows as they were visited.
    pub train_ppl: f64,
    pub valid_ppl: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters are in the returned checkpoint; `None` means
    /// the initial parameters.
    pub best_epoch: Option<usize>,
}

impl RunMetrics {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch
            .and_then(|e| self.epochs.iter().find(|r| r.epoch == e))
    }

    /// One tab-separated line per epoch. Wall-clock time is kept out so that
    /// identical runs produce identical logs; see [`RunMetrics::timing_tsv`].
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\ttrain_ppl\tvalid_ppl\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}",
                r.epoch, r.train_loss, r.train_ppl, r.valid_ppl
            );
        }
        out
    }

    pub fn timing_tsv(&self) -> String {
        let mut out = String::from("epoch\tseconds\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{}\t{:.3}", r.epoch, r.seconds);
        }
        out
    }
}

pub struct TrainOutcome<T> {
    /// Parameters with the lowest validation perplexity seen.
    pub best: Checkpoint<T>,
    pub metrics: RunMetrics,
    /// Set when training stopped early on a non-finite loss or gradient.
    pub diverged: Option<Error>,
}

fn run_epoch<T: Scalar>(
    model: &Model,
    ck: &mut Checkpoint<T>,
    stream: &BatchStream,
    settings: &TrainSettings,
    opt: &mut NadamState,
) -> Result<(f64, f64)> {
    let mut state = model.zero_state::<T>(stream.batch());
    let (mut loss_sum, mut nll_sum, mut tokens) = (0.0, 0.0, 0usize);
    for (x, y) in stream.windows(settings.seq_len) {
        let out = model.backward_window(&mut ck.store, &x, &y, &state, &mut ck.rng)?;
        let norm = clip_global_norm(&mut ck.store, settings.clipnorm);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                site: "gradient norm".into(),
            });
        }
        opt.step(&mut ck.store)?;
        loss_sum += out.loss * out.tokens as f64;
        nll_sum += out.nll_sum;
        tokens += out.tokens;
        state = out.state;
    }
    Ok((loss_sum / tokens as f64, (nll_sum / tokens as f64).exp()))
}

/// Trains a freshly initialized model on `train` for `settings.epochs`
/// epochs, validating after each one. The recurrent state is reset to zero
/// at the start of every epoch.
pub fn train_run<T: Scalar>(
    config: &ModelConfig,
    settings: &TrainSettings,
    train: &[usize],
    valid: &[usize],
) -> Result<TrainOutcome<T>> {
    settings.validate()?;
    let (store, model) = build::<T>(config, &mut RngStream::new(config.seed))?;
    let stream = BatchStream::new(train, settings.batch_size)?;
    let eval = settings.validation();
    BatchStream::new(valid, eval.batch_size)?;

    let mut current = Checkpoint {
        config: config.clone(),
        store,
        rng: RngStream::with_stream(config.seed, DROPOUT_STREAM),
    };
    let mut best = current.clone();
    let mut best_ppl = f64::INFINITY;
    let mut metrics = RunMetrics::default();
    let mut opt = settings.optimizer();

    for epoch in 1..=settings.epochs {
        let started = Instant::now();
        let step =
            run_epoch(&model, &mut current, &stream, settings, &mut opt).and_then(|(loss, ppl)| {
                Ok((
                    loss,
                    ppl,
                    evaluate(&model, &current.store, valid, &eval)?.perplexity(),
                ))
            });
        let (train_loss, train_ppl, valid_ppl) = match step {
            Ok(v) => v,
            Err(e @ Error::NonFinite { .. }) => {
                log::warn!("diverged in epoch {epoch}: {e}");
                return Ok(TrainOutcome {
                    best,
                    metrics,
                    diverged: Some(e),
                });
            }
            Err(e) => return Err(e),
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            train_ppl,
            valid_ppl,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4}, train ppl {train_ppl:.3}, valid ppl {valid_ppl:.3}"
        );
        metrics.epochs.push(record);
        if valid_ppl < best_ppl {
            best_ppl = valid_ppl;
            best = current.clone();
            metrics.best_epoch = Some(epoch);
        }
    }
    Ok(TrainOutcome {
        best,
        metrics,
        diverged: None,
    })
}

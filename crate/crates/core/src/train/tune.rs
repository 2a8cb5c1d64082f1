use std::cmp::Ordering;
use std::fmt::Write as _;

use super::eval::{dynamic_eval, evaluate, EvalSettings};
use crate::error::Result;
use crate::model::{Model, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TuneMode {
    Static,
    Dynamic,
}

impl std::str::FromStr for TuneMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(TuneMode::Static),
            "dynamic" => Ok(TuneMode::Dynamic),
            other => Err(crate::error::Error::config(
                "mode",
                format!("expected static or dynamic, got `{other}`"),
            )),
        }
    }
}

/// Candidate values for each swept setting.
#[derive(Clone, Debug, PartialEq)]
pub struct Grids {
    pub seq_lens: Vec<usize>,
    pub temperatures: Vec<f64>,
    pub clipnorms: Vec<f64>,
    pub beta1s: Vec<f64>,
}

impl Default for Grids {
    /// Sequence length 5..=70 step 5, temperature 0.90..=1.30 step 0.05,
    /// clipping 0.0..=1.0 step 0.1, β1 ∈ {0.9, 0}. Built from integers so
    /// every point is the nearest double to its decimal value.
    fn default() -> Self {
        Grids {
            seq_lens: (1..=14).map(|i| 5 * i).collect(),
            temperatures: (18..=26).map(|i| i as f64 * 5.0 / 100.0).collect(),
            clipnorms: (0..=10).map(|i| i as f64 / 10.0).collect(),
            beta1s: vec![0.9, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub settings: EvalSettings,
    pub perplexity: f64,
}

/// Orders by perplexity, then shorter sequence, lower temperature and lower
/// clipping value.
fn rank(a: &Trial, b: &Trial) -> Ordering {
    a.perplexity
        .total_cmp(&b.perplexity)
        .then(a.settings.seq_len.cmp(&b.settings.seq_len))
        .then(a.settings.temperature.total_cmp(&b.settings.temperature))
        .then(a.settings.clipnorm.total_cmp(&b.settings.clipnorm))
}

#[derive(Clone, Debug)]
pub struct TuneReport {
    pub mode: TuneMode,
    pub default: Trial,
    pub best: Trial,
    /// Every evaluated point in evaluation order, the default first.
    pub trials: Vec<Trial>,
}

impl TuneReport {
    pub fn to_text(&self) -> String {
        let s = &self.best.settings;
        let mut out = String::new();
        let mode = match self.mode {
            TuneMode::Static => "static",
            TuneMode::Dynamic => "dynamic",
        };
        let _ = writeln!(out, "mode\t{mode}");
        let _ = writeln!(out, "trials\t{}", self.trials.len());
        let _ = writeln!(out, "default_ppl\t{:.6}", self.default.perplexity);
        let _ = writeln!(out, "best_ppl\t{:.6}", self.best.perplexity);
        let _ = writeln!(out, "seq_len_eval\t{}", s.seq_len);
        let _ = writeln!(out, "temperature\t{:.2}", s.temperature);
        if self.mode == TuneMode::Dynamic {
            let _ = writeln!(out, "clipnorm_eval\t{:.1}", s.clipnorm);
            let _ = writeln!(out, "beta1_eval\t{}", s.beta1);
        }
        out
    }

    pub fn trials_csv(&self) -> String {
        let mut out = String::from("seq_len,temperature,clipnorm,beta1,perplexity\n");
        for t in &self.trials {
            let s = &t.settings;
            let _ = writeln!(
                out,
                "{},{:.2},{:.1},{},{:.6}",
                s.seq_len, s.temperature, s.clipnorm, s.beta1, t.perplexity
            );
        }
        out
    }
}

struct Search<'a, T> {
    model: &'a Model,
    store: &'a ParamStore<T>,
    valid: &'a [usize],
    mode: TuneMode,
    trials: Vec<Trial>,
}

impl<T: Scalar> Search<'_, T> {
    fn eval(&mut self, settings: EvalSettings) -> Result<Trial> {
        let r = match self.mode {
            TuneMode::Static => evaluate(self.model, self.store, self.valid, &settings)?,
            TuneMode::Dynamic => dynamic_eval(self.model, self.store, self.valid, &settings)?,
        };
        let trial = Trial {
            settings,
            perplexity: r.perplexity(),
        };
        log::debug!("tune {:?}: {:.4}", trial.settings, trial.perplexity);
        self.trials.push(trial.clone());
        Ok(trial)
    }

    /// Evaluates every value of one setting with the others held at `base`
    /// and returns the best point.
    fn sweep<V: Copy>(
        &mut self,
        base: &EvalSettings,
        values: &[V],
        set: impl Fn(&mut EvalSettings, V),
    ) -> Result<EvalSettings> {
        let mut best: Option<Trial> = None;
        for &v in values {
            let mut s = base.clone();
            set(&mut s, v);
            let t = self.eval(s)?;
            if best.as_ref().is_none_or(|b| rank(&t, b) == Ordering::Less) {
                best = Some(t);
            }
        }
        Ok(best.map_or_else(|| base.clone(), |t| t.settings))
    }
}

/// Post-hoc sweeps over validation data with the default [`Grids`].
pub fn tune_posthoc<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    valid: &[usize],
    mode: TuneMode,
    defaults: &EvalSettings,
) -> Result<TuneReport> {
    tune_with_grids(model, store, valid, mode, defaults, &Grids::default())
}

/// Sequential sweeps: sequence length first, then temperature at the best
/// length, then (dynamic mode) clipping at the best of both. Dynamic mode
/// repeats the procedure for every β1. The result is the best point seen,
/// the default settings included, so it is never worse than the default.
pub fn tune_with_grids<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    valid: &[usize],
    mode: TuneMode,
    defaults: &EvalSettings,
    grids: &Grids,
) -> Result<TuneReport> {
    defaults.validate()?;
    let mut search = Search {
        model,
        store,
        valid,
        mode,
        trials: Vec::new(),
    };
    let default = search.eval(defaults.clone())?;
    let beta1s = match mode {
        TuneMode::Static => vec![defaults.beta1],
        TuneMode::Dynamic => grids.beta1s.clone(),
    };
    for beta1 in beta1s {
        let base = EvalSettings {
            beta1,
            ..defaults.clone()
        };
        let base = search.sweep(&base, &grids.seq_lens, |s, v| s.seq_len = v)?;
        let base = search.sweep(&base, &grids.temperatures, |s, v| s.temperature = v)?;
        if mode == TuneMode::Dynamic {
            search.sweep(&base, &grids.clipnorms, |s, v| s.clipnorm = v)?;
        }
    }
    let best = search
        .trials
        .iter()
        .min_by(|a, b| rank(a, b))
        .cloned()
        .expect("the default was evaluated");
    Ok(TuneReport {
        mode,
        default,
        best,
        trials: search.trials,
    })
}

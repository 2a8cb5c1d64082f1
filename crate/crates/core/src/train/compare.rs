use std::fmt::Write as _;

use super::eval::{dynamic_eval, evaluate, DynamicEvaluator, EvalSettings};
use super::{train_run, TrainSettings};
use crate::data::EncodedCorpus;
use crate::error::{Error, Result};
use crate::layers::Recurrence;
use crate::model::{Architecture, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub model: String,
    pub params: usize,
    pub valid: f64,
    pub test: f64,
    pub valid_dyneval: f64,
    pub test_dyneval: f64,
}

impl ComparisonRow {
    fn cells(&self) -> [f64; 4] {
        [self.valid, self.test, self.valid_dyneval, self.test_dyneval]
    }
}

/// Validation and test perplexity with and without dynamic evaluation, one
/// row per trained model, ERS and Dual rows paired per recurrence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

/// `22.89 M`, `4.53 K`, or the plain count below a thousand.
pub fn format_params(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.2} M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.2} K", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

impl Comparison {
    /// Number of filled cells: model, parameter count and four finite
    /// perplexities per row.
    pub fn populated_cells(&self) -> usize {
        self.rows
            .iter()
            .map(|r| {
                2 + r
                    .cells()
                    .iter()
                    .filter(|v| v.is_finite() && **v > 0.0)
                    .count()
            })
            .sum()
    }

    /// Rows where dynamic evaluation did not improve on the static score.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.rows {
            if r.valid_dyneval > r.valid {
                out.push(format!(
                    "{}: dyneval validation {:.3} > static {:.3}",
                    r.model, r.valid_dyneval, r.valid
                ));
            }
            if r.test_dyneval > r.test {
                out.push(format!(
                    "{}: dyneval test {:.3} > static {:.3}",
                    r.model, r.test_dyneval, r.test
                ));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.model.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:w$}  {:>10}  {:^20}  {:^20}",
            "",
            "",
            "No Dyneval",
            "Dyneval",
            w = width
        );
        let _ = writeln!(
            out,
            "{:w$}  {:>10}  {:>9}  {:>9}  {:>9}  {:>9}",
            "MODEL",
            "PARAMS",
            "Val.",
            "Test",
            "Val.",
            "Test",
            w = width
        );
        for (i, r) in self.rows.iter().enumerate() {
            if i % 2 == 0 {
                let _ = writeln!(out, "{}", "-".repeat(width + 56));
            }
            let _ = writeln!(
                out,
                "{:w$}  {:>10}  {:>9.2}  {:>9.2}  {:>9.2}  {:>9.2}",
                r.model,
                format_params(r.params),
                r.valid,
                r.test,
                r.valid_dyneval,
                r.test_dyneval,
                w = width
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,params,valid,test,valid_dyneval,test_dyneval\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.model, r.params, r.valid, r.test, r.valid_dyneval, r.test_dyneval
            );
        }
        out
    }
}

/// Trains the ERS and the Dual variant of `base` for each recurrence with
/// identical hyperparameters and scores the best checkpoints. Test-set
/// dynamic evaluation adapts on the validation stream first. The layer count
/// is forced to 1 for LSTM and raised to at least 2 for dLSTM.
pub fn compare_architectures(
    base: &ModelConfig,
    recurrences: &[Recurrence],
    train: &TrainSettings,
    eval: &EvalSettings,
    corpus: &EncodedCorpus,
) -> Result<Comparison> {
    let mut rows = Vec::new();
    for &recurrence in recurrences {
        for architecture in [Architecture::Ers, Architecture::Dual] {
            let lstm_layers = match recurrence {
                Recurrence::Lstm => 1,
                Recurrence::DLstm => base.lstm_layers.max(2),
                Recurrence::MdLstm => base.lstm_layers,
            };
            let config = ModelConfig {
                architecture,
                recurrence,
                lstm_layers,
                vocab_size: corpus.vocab.len(),
                ..base.clone()
            };
            let label = config.to_string();
            log::info!("training {label}");
            let outcome = train_run::<f32>(&config, train, &corpus.train, &corpus.valid)?;
            if let Some(e) = outcome.diverged {
                return Err(Error::NonFinite {
                    site: format!("{label} training ({e})"),
                });
            }
            let ck = outcome.best;
            let model = ck.model()?;
            let valid = evaluate(&model, &ck.store, &corpus.valid, eval)?.perplexity();
            let test = evaluate(&model, &ck.store, &corpus.test, eval)?.perplexity();
            let valid_dyneval = dynamic_eval(&model, &ck.store, &corpus.valid, eval)?.perplexity();
            let mut dynamic = DynamicEvaluator::new(&model, &ck.store, eval)?;
            dynamic.run(&corpus.valid)?;
            let test_dyneval = dynamic.run(&corpus.test)?.perplexity();
            rows.push(ComparisonRow {
                model: label,
                params: ck.store.scalar_count(),
                valid,
                test,
                valid_dyneval,
                test_dyneval,
            });
        }
    }
    Ok(Comparison { rows })
}

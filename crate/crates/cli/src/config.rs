//! Flat `key=value` run configuration: every model key plus the inputs of
//! the individual commands.

use std::path::{Path, PathBuf};

use duallm::train::{EvalSettings, TrainSettings, TuneMode};
use duallm::{Error, ModelConfig, Recurrence, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Pattern,
    TwoRegime,
}

/// Documented defaults of the non-model keys, in echo order. Corpus paths
/// and the checkpoint path have no default.
pub const RUN_KEYS: &[(&str, &str, &str)] = &[
    (
        "train_path",
        "",
        "training split, whitespace-tokenized text",
    ),
    ("valid_path", "", "validation split"),
    ("test_path", "", "test split"),
    (
        "checkpoint",
        "",
        "checkpoint read by eval, dyneval and tune",
    ),
    ("out_dir", "out", "directory receiving every artifact"),
    ("epochs", "100", "training epochs"),
    ("batch_size", "32", "training batch size"),
    ("seq_len", "25", "training BPTT window"),
    ("lr", "0.001", "training learning rate"),
    ("beta1", "0.9", "Nadam first-moment decay"),
    ("beta2", "0.999", "Nadam second-moment decay"),
    ("eps", "1e-8", "Nadam denominator offset"),
    ("clipnorm", "1", "training global-norm clip, 0 disables"),
    ("eval_batch_size", "10", "batch size for every evaluation"),
    ("seq_len_eval", "25", "evaluation window"),
    ("temperature", "1", "softmax temperature at evaluation"),
    ("lr_eval", "0.00001", "dynamic-evaluation learning rate"),
    (
        "clipnorm_eval",
        "1",
        "dynamic-evaluation global-norm clip, 0 disables",
    ),
    (
        "beta1_eval",
        "0.9",
        "dynamic-evaluation Nadam first-moment decay",
    ),
    (
        "eval_split",
        "test",
        "split scored by eval and dyneval: valid or test",
    ),
    ("tune_mode", "static", "static or dynamic"),
    (
        "compare",
        "",
        "comma-separated recurrences for compare; empty means the configured one",
    ),
    (
        "synth",
        "pattern",
        "corpus written by synth: pattern or two_regime",
    ),
    ("synth_tokens", "512", "training tokens written by synth"),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub eval_split: Split,
    pub tune_mode: TuneMode,
    pub compare: Vec<Recurrence>,
    pub synth: SynthKind,
    pub synth_tokens: usize,
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| config_err(key, format!("cannot parse `{v}`")))
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            eval: EvalSettings::default(),
            train_path: None,
            valid_path: None,
            test_path: None,
            checkpoint: None,
            out_dir: PathBuf::new(),
            eval_split: Split::Test,
            tune_mode: TuneMode::Static,
            compare: Vec::new(),
            synth: SynthKind::Pattern,
            synth_tokens: 0,
        };
        for (k, v, _) in RUN_KEYS {
            cfg.set(k, v).expect("documented defaults parse");
        }
        cfg
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        if self.model.set(key, v)? {
            return Ok(());
        }
        match key {
            "train_path" => self.train_path = path(v),
            "valid_path" => self.valid_path = path(v),
            "test_path" => self.test_path = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "epochs" => self.train.epochs = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "seq_len" => self.train.seq_len = num(key, v)?,
            "lr" => self.train.lr = num(key, v)?,
            "beta1" => self.train.beta1 = num(key, v)?,
            "beta2" => self.train.beta2 = num(key, v)?,
            "eps" => self.train.eps = num(key, v)?,
            "clipnorm" => self.train.clipnorm = num(key, v)?,
            "eval_batch_size" => {
                self.train.eval_batch_size = num(key, v)?;
                self.eval.batch_size = self.train.eval_batch_size;
            }
            "seq_len_eval" => self.eval.seq_len = num(key, v)?,
            "temperature" => self.eval.temperature = num(key, v)?,
            "lr_eval" => self.eval.lr = num(key, v)?,
            "clipnorm_eval" => self.eval.clipnorm = num(key, v)?,
            "beta1_eval" => self.eval.beta1 = num(key, v)?,
            "eval_split" => {
                self.eval_split = match v {
                    "valid" => Split::Valid,
                    "test" => Split::Test,
                    _ => {
                        return Err(config_err(
                            key,
                            format!("expected valid or test, got `{v}`"),
                        ))
                    }
                }
            }
            "tune_mode" => self.tune_mode = v.parse()?,
            "compare" => {
                self.compare = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "synth" => {
                self.synth = match v {
                    "pattern" => SynthKind::Pattern,
                    "two_regime" => SynthKind::TwoRegime,
                    _ => {
                        return Err(config_err(
                            key,
                            format!("expected pattern or two_regime, got `{v}`"),
                        ))
                    }
                }
            }
            "synth_tokens" => self.synth_tokens = num(key, v)?,
            _ => return Err(config_err(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies every `key=value` line of `text`; blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(&format!("line {}", n + 1), "expected key=value"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then the file, then each override in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(o, "override must look like key=value"))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    /// Every key with its effective value, one per line.
    pub fn to_text(&self) -> String {
        let show = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let split = match self.eval_split {
            Split::Valid => "valid",
            Split::Test => "test",
        };
        let mode = match self.tune_mode {
            TuneMode::Static => "static",
            TuneMode::Dynamic => "dynamic",
        };
        let synth = match self.synth {
            SynthKind::Pattern => "pattern",
            SynthKind::TwoRegime => "two_regime",
        };
        let compare: Vec<String> = self
            .compare
            .iter()
            .map(|r| r.name().to_ascii_lowercase())
            .collect();
        let (t, e) = (&self.train, &self.eval);
        let mut out = self.model.to_text();
        for (k, v) in [
            ("train_path", show(&self.train_path)),
            ("valid_path", show(&self.valid_path)),
            ("test_path", show(&self.test_path)),
            ("checkpoint", show(&self.checkpoint)),
            ("out_dir", self.out_dir.display().to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seq_len", t.seq_len.to_string()),
            ("lr", t.lr.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("eps", t.eps.to_string()),
            ("clipnorm", t.clipnorm.to_string()),
            ("eval_batch_size", t.eval_batch_size.to_string()),
            ("seq_len_eval", e.seq_len.to_string()),
            ("temperature", e.temperature.to_string()),
            ("lr_eval", e.lr.to_string()),
            ("clipnorm_eval", e.clipnorm.to_string()),
            ("beta1_eval", e.beta1.to_string()),
            ("eval_split", split.to_string()),
            ("tune_mode", mode.to_string()),
            ("compare", compare.join(",")),
            ("synth", synth.to_string()),
            ("synth_tokens", self.synth_tokens.to_string()),
        ] {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

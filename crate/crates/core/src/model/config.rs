use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{DropoutRates, Recurrence};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Embedding → recurrent → softmax.
    Ers,
    /// Adds a ReLU layer fed by both the embedding and the recurrent output.
    Dual,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Ers => "ers",
            Architecture::Dual => "dual",
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ers" => Ok(Architecture::Ers),
            "dual" => Ok(Architecture::Dual),
            _ => Err(Error::config(
                "architecture",
                format!("expected ers|dual, got `{s}`"),
            )),
        }
    }
}

impl FromStr for Recurrence {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(Recurrence::Lstm),
            "dlstm" => Ok(Recurrence::DLstm),
            "mdlstm" => Ok(Recurrence::MdLstm),
            _ => Err(Error::config(
                "recurrence",
                format!("expected lstm|dlstm|mdlstm, got `{s}`"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    Uniform,
    /// Every parameter zero; the untrained model predicts the uniform
    /// distribution.
    Zero,
}

impl FromStr for InitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(InitScheme::Uniform),
            "zero" => Ok(InitScheme::Zero),
            _ => Err(Error::config(
                "init",
                format!("expected uniform|zero, got `{s}`"),
            )),
        }
    }
}

/// L2 penalty coefficients, each multiplying a plain sum of squares.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct L2Coefficients {
    /// Embedding matrix and untied output matrix.
    pub embedding: f64,
    pub rec_input: f64,
    pub rec: f64,
    /// On the top recurrent output, averaged over batch and time.
    pub activation: f64,
    pub dual: f64,
    pub mogrifier: f64,
}

impl L2Coefficients {
    pub fn fields(&self) -> [(&'static str, f64); 6] {
        [
            ("l2_embedding", self.embedding),
            ("l2_rec_input", self.rec_input),
            ("l2_rec", self.rec),
            ("l2_activation", self.activation),
            ("l2_dual", self.dual),
            ("l2_mogrifier", self.mogrifier),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub recurrence: Recurrence,
    pub vocab_size: usize,
    pub embedding_units: usize,
    pub recurrent_units: usize,
    pub lstm_layers: usize,
    pub dual_units: usize,
    pub tie_weights: bool,
    pub mogrifier_rounds: usize,
    /// 0 for full round matrices, otherwise the factorization rank.
    pub mogrifier_rank: usize,
    pub mogrifier_bias: bool,
    pub dropout: DropoutRates,
    pub l2: L2Coefficients,
    pub seed: u64,
    pub init: InitScheme,
}

impl Default for ModelConfig {
    /// The fine-tuned Dual mdLSTM configuration for a 10k-word vocabulary.
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::Dual,
            recurrence: Recurrence::MdLstm,
            vocab_size: 10_000,
            embedding_units: 850,
            recurrent_units: 850,
            lstm_layers: 2,
            dual_units: 850,
            tie_weights: true,
            mogrifier_rounds: 4,
            mogrifier_rank: 100,
            mogrifier_bias: true,
            dropout: DropoutRates {
                rec_input: 0.5,
                rec: 0.5,
                rec_internal: 0.5,
                rec_output: 0.5,
                dual_input: 0.5,
                dual_output: 0.4,
                mogrifier: 0.15,
            },
            l2: L2Coefficients {
                embedding: 1e-5,
                dual: 1e-5,
                ..Default::default()
            },
            seed: 1,
            init: InitScheme::Uniform,
        }
    }
}

/// Keys accepted by [`ModelConfig::set`], in echo order.
pub const MODEL_KEYS: &[&str] = &[
    "architecture",
    "recurrence",
    "vocab_size",
    "embedding_units",
    "recurrent_units",
    "lstm_layers",
    "dual_units",
    "tie_weights",
    "mogrifier_rounds",
    "mogrifier_rank",
    "mogrifier_bias",
    "dropout_rec_input",
    "dropout_rec",
    "dropout_rec_internal",
    "dropout_rec_output",
    "dropout_dual_input",
    "dropout_dual_output",
    "dropout_mogrifier",
    "l2_embedding",
    "l2_rec_input",
    "l2_rec",
    "l2_activation",
    "l2_dual",
    "l2_mogrifier",
    "seed",
    "init",
];

pub(crate) fn parse_num<N: FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(
            key,
            format!("expected true|false, got `{value}`"),
        )),
    }
}

impl ModelConfig {
    /// Small tied configuration for tests and gradient checks.
    pub fn tiny(
        architecture: Architecture,
        recurrence: Recurrence,
        vocab: usize,
        units: usize,
    ) -> Self {
        ModelConfig {
            architecture,
            recurrence,
            vocab_size: vocab,
            embedding_units: units,
            recurrent_units: units,
            lstm_layers: if recurrence == Recurrence::Lstm { 1 } else { 2 },
            dual_units: units,
            tie_weights: true,
            mogrifier_rounds: if recurrence.is_mogrified() { 2 } else { 0 },
            mogrifier_rank: 0,
            mogrifier_bias: true,
            dropout: DropoutRates::default(),
            l2: L2Coefficients::default(),
            seed: 1,
            init: InitScheme::Uniform,
        }
    }

    /// Sets one field from its text form. Returns `Ok(false)` for keys that
    /// are not model keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "architecture" => self.architecture = v.parse()?,
            "recurrence" => self.recurrence = v.parse()?,
            "vocab_size" => self.vocab_size = parse_num(key, v)?,
            "embedding_units" => self.embedding_units = parse_num(key, v)?,
            "recurrent_units" => self.recurrent_units = parse_num(key, v)?,
            "lstm_layers" => self.lstm_layers = parse_num(key, v)?,
            "dual_units" => self.dual_units = parse_num(key, v)?,
            "tie_weights" => self.tie_weights = parse_bool(key, v)?,
            "mogrifier_rounds" => self.mogrifier_rounds = parse_num(key, v)?,
            "mogrifier_rank" => self.mogrifier_rank = parse_num(key, v)?,
            "mogrifier_bias" => self.mogrifier_bias = parse_bool(key, v)?,
            "dropout_rec_input" => self.dropout.rec_input = parse_num(key, v)?,
            "dropout_rec" => self.dropout.rec = parse_num(key, v)?,
            "dropout_rec_internal" => self.dropout.rec_internal = parse_num(key, v)?,
            "dropout_rec_output" => self.dropout.rec_output = parse_num(key, v)?,
            "dropout_dual_input" => self.dropout.dual_input = parse_num(key, v)?,
            "dropout_dual_output" => self.dropout.dual_output = parse_num(key, v)?,
            "dropout_mogrifier" => self.dropout.mogrifier = parse_num(key, v)?,
            "l2_embedding" => self.l2.embedding = parse_num(key, v)?,
            "l2_rec_input" => self.l2.rec_input = parse_num(key, v)?,
            "l2_rec" => self.l2.rec = parse_num(key, v)?,
            "l2_activation" => self.l2.activation = parse_num(key, v)?,
            "l2_dual" => self.l2.dual = parse_num(key, v)?,
            "l2_mogrifier" => self.l2.mogrifier = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "init" => self.init = v.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let init = match self.init {
            InitScheme::Uniform => "uniform",
            InitScheme::Zero => "zero",
        };
        let mut out = vec![
            ("architecture", self.architecture.name().to_string()),
            ("recurrence", self.recurrence.name().to_ascii_lowercase()),
            ("vocab_size", self.vocab_size.to_string()),
            ("embedding_units", self.embedding_units.to_string()),
            ("recurrent_units", self.recurrent_units.to_string()),
            ("lstm_layers", self.lstm_layers.to_string()),
            ("dual_units", self.dual_units.to_string()),
            ("tie_weights", self.tie_weights.to_string()),
            ("mogrifier_rounds", self.mogrifier_rounds.to_string()),
            ("mogrifier_rank", self.mogrifier_rank.to_string()),
            ("mogrifier_bias", self.mogrifier_bias.to_string()),
        ];
        out.extend(
            self.dropout
                .fields()
                .iter()
                .map(|&(k, v)| (k, v.to_string())),
        );
        out.extend(self.l2.fields().iter().map(|&(k, v)| (k, v.to_string())));
        out.push(("seed", self.seed.to_string()));
        out.push(("init", init.to_string()));
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected key=value"))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::config(k.trim(), "unknown key"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Width of the vector fed to the output projection.
    pub fn head_width(&self) -> usize {
        match self.architecture {
            Architecture::Ers => self.recurrent_units,
            Architecture::Dual => self.dual_units,
        }
    }

    /// Mogrifier rounds actually used (zero for non-mogrified recurrences).
    pub fn effective_rounds(&self) -> usize {
        if self.recurrence.is_mogrified() {
            self.mogrifier_rounds
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("vocab_size", self.vocab_size),
            ("embedding_units", self.embedding_units),
            ("recurrent_units", self.recurrent_units),
            ("dual_units", self.dual_units),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(1..=3).contains(&self.lstm_layers) {
            return Err(Error::config("lstm_layers", "must be 1, 2 or 3"));
        }
        match self.recurrence {
            Recurrence::Lstm if self.lstm_layers != 1 => {
                return Err(Error::config(
                    "lstm_layers",
                    "the lstm recurrence is a single layer; use dlstm for stacks",
                ))
            }
            Recurrence::DLstm if self.lstm_layers < 2 => {
                return Err(Error::config(
                    "lstm_layers",
                    "dlstm needs at least 2 layers",
                ))
            }
            _ => {}
        }
        for (field, rate) in self.dropout.fields() {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::config(field, format!("rate {rate} outside [0, 1)")));
            }
        }
        for (field, coef) in self.l2.fields() {
            if !(coef >= 0.0 && coef.is_finite()) {
                return Err(Error::config(
                    field,
                    format!("coefficient {coef} must be >= 0"),
                ));
            }
        }
        if self.tie_weights && self.head_width() != self.embedding_units {
            let field = match self.architecture {
                Architecture::Ers => "recurrent_units",
                Architecture::Dual => "dual_units",
            };
            return Err(Error::config(
                field,
                format!(
                    "weight tying needs the output input width ({}) to equal embedding_units ({})",
                    self.head_width(),
                    self.embedding_units
                ),
            ));
        }
        if self.effective_rounds() > 0 && self.embedding_units != self.recurrent_units {
            return Err(Error::config(
                "embedding_units",
                "mogrified layers need embedding_units == recurrent_units",
            ));
        }
        Ok(())
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let arch = match self.architecture {
            Architecture::Ers => "",
            Architecture::Dual => "Dual ",
        };
        write!(f, "{arch}{}", self.recurrence.name())
    }
}

/// Exact number of trainable scalars, counting tied storage once.
pub fn param_count(config: &ModelConfig) -> usize {
    let (v, e, h, d) = (
        config.vocab_size,
        config.embedding_units,
        config.recurrent_units,
        config.dual_units,
    );
    let mut total = v * e;
    for layer in 0..config.lstm_layers {
        let input = if layer == 0 { e } else { h };
        total += 4 * (h * input + h * h + h);
        for round in 0..config.effective_rounds() {
            // Odd rounds map h onto the input, even rounds the reverse.
            let (rows, cols) = if round % 2 == 0 {
                (input, h)
            } else {
                (h, input)
            };
            total += match config.mogrifier_rank {
                0 => rows * cols,
                k => rows * k + k * cols,
            };
            if config.mogrifier_bias {
                total += rows;
            }
        }
    }
    if config.architecture == Architecture::Dual {
        total += d * e + d * h + d;
    }
    if !config.tie_weights {
        total += v * config.head_width();
    }
    total + v
}

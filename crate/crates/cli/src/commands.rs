use std::fmt;
use std::path::{Path, PathBuf};

use duallm::data::synthetic::{repeated_pattern, two_regime, write_tokens};
use duallm::data::{load_corpus, CorpusPaths, EncodedCorpus};
use duallm::gradcheck::run_suite;
use duallm::train::{
    compare_architectures, dynamic_eval, evaluate, format_params, train_run, tune_posthoc,
    DynamicEvaluator, EvalResult,
};
use duallm::{param_count, Checkpoint, Error, Model};

use crate::config::{RunConfig, Split, SynthKind, RUN_KEYS};

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// A check ran to completion and reported failure.
    Check(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Check(_) => "check",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Check(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T = ()> = std::result::Result<T, CliError>;

fn write(path: &Path, contents: &str) -> Result {
    std::fs::write(path, contents).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

/// Creates the output directory and echoes the effective configuration.
fn prepare(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    write(&dir.join("config.txt"), &cfg.to_text())?;
    Ok(dir)
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    value.as_ref().ok_or_else(|| {
        CliError::Core(Error::Config {
            field: key.to_string(),
            reason: "required by this command".into(),
        })
    })
}

fn corpus(cfg: &RunConfig) -> Result<EncodedCorpus> {
    let paths = CorpusPaths {
        train: required(&cfg.train_path, "train_path")?.clone(),
        valid: required(&cfg.valid_path, "valid_path")?.clone(),
        test: required(&cfg.test_path, "test_path")?.clone(),
    };
    Ok(load_corpus(&paths)?.encode()?)
}

fn checkpoint(cfg: &RunConfig, corpus: &EncodedCorpus) -> Result<(Checkpoint<f32>, Model)> {
    let ck = Checkpoint::<f32>::load(required(&cfg.checkpoint, "checkpoint")?)?;
    if ck.config.vocab_size != corpus.vocab.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary has {} entries, the training split yields {}",
            ck.config.vocab_size,
            corpus.vocab.len()
        ))
        .into());
    }
    let model = ck.model()?;
    Ok((ck, model))
}

fn result_lines(label: &str, r: &EvalResult) -> String {
    format!(
        "{label}_tokens\t{}\n{label}_nll_sum\t{:.6}\n{label}_ppl\t{:.6}\n",
        r.tokens,
        r.nll_sum,
        r.perplexity()
    )
}

pub fn train(cfg: &RunConfig) -> Result {
    let corpus = corpus(cfg)?;
    let dir = prepare(cfg)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = corpus.vocab.len();
    let outcome = train_run::<f32>(&model_cfg, &cfg.train, &corpus.train, &corpus.valid)?;
    outcome.best.save(&dir.join("checkpoint.bin"))?;
    write(&dir.join("metrics.tsv"), &outcome.metrics.to_tsv())?;
    write(&dir.join("timing.tsv"), &outcome.metrics.timing_tsv())?;
    if let Some(e) = outcome.diverged {
        return Err(e.into());
    }
    let model = outcome.best.model()?;
    let valid = evaluate(&model, &outcome.best.store, &corpus.valid, &cfg.eval)?;
    let test = evaluate(&model, &outcome.best.store, &corpus.test, &cfg.eval)?;
    let best = outcome
        .metrics
        .best_epoch
        .map_or("none".to_string(), |e| e.to_string());
    let report = format!(
        "model\t{}\nparams\t{}\nbest_epoch\t{best}\n{}{}",
        model_cfg,
        outcome.best.store.scalar_count(),
        result_lines("valid", &valid),
        result_lines("test", &test)
    );
    write(&dir.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

pub fn eval(cfg: &RunConfig, dynamic: bool) -> Result {
    let corpus = corpus(cfg)?;
    let (ck, model) = checkpoint(cfg, &corpus)?;
    let dir = prepare(cfg)?;
    let (label, r) = match (cfg.eval_split, dynamic) {
        (Split::Valid, false) => (
            "valid",
            evaluate(&model, &ck.store, &corpus.valid, &cfg.eval)?,
        ),
        (Split::Test, false) => (
            "test",
            evaluate(&model, &ck.store, &corpus.test, &cfg.eval)?,
        ),
        (Split::Valid, true) => (
            "valid",
            dynamic_eval(&model, &ck.store, &corpus.valid, &cfg.eval)?,
        ),
        (Split::Test, true) => {
            let mut ev = DynamicEvaluator::new(&model, &ck.store, &cfg.eval)?;
            ev.run(&corpus.valid)?;
            ("test", ev.run(&corpus.test)?)
        }
    };
    let name = if dynamic { "dyneval" } else { "eval" };
    write(&dir.join(format!("{name}.txt")), &result_lines(label, &r))?;
    write(
        &dir.join(format!("{name}.csv")),
        &format!(
            "split,tokens,nll_sum,perplexity\n{label},{},{:.6},{:.6}\n",
            r.tokens,
            r.nll_sum,
            r.perplexity()
        ),
    )?;
    println!("perplexity\t{:.6}", r.perplexity());
    Ok(())
}

pub fn tune(cfg: &RunConfig) -> Result {
    let corpus = corpus(cfg)?;
    let (ck, model) = checkpoint(cfg, &corpus)?;
    let dir = prepare(cfg)?;
    let report = tune_posthoc(&model, &ck.store, &corpus.valid, cfg.tune_mode, &cfg.eval)?;
    write(&dir.join("tune.txt"), &report.to_text())?;
    write(&dir.join("tune_trials.csv"), &report.trials_csv())?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Result {
    let dir = prepare(cfg)?;
    let report = run_suite(cfg.model.seed)?;
    write(&dir.join("gradcheck.txt"), &report.to_text())?;
    print!("{}", report.to_text());
    if !report.passed() {
        return Err(CliError::Check(format!(
            "gradient check failed, worst relative error {:.3e}",
            report.worst()
        )));
    }
    Ok(())
}

pub fn params(cfg: &RunConfig) -> Result {
    cfg.model.validate()?;
    let dir = prepare(cfg)?;
    let n = param_count(&cfg.model);
    write(&dir.join("params.txt"), &format!("{n}\n"))?;
    println!("{n}");
    log::info!("{} has {} parameters", cfg.model, format_params(n));
    Ok(())
}

pub fn compare(cfg: &RunConfig) -> Result {
    let corpus = corpus(cfg)?;
    let dir = prepare(cfg)?;
    let recurrences = if cfg.compare.is_empty() {
        vec![cfg.model.recurrence]
    } else {
        cfg.compare.clone()
    };
    let table = compare_architectures(&cfg.model, &recurrences, &cfg.train, &cfg.eval, &corpus)?;
    write(&dir.join("compare.txt"), &table.to_text())?;
    write(&dir.join("compare.csv"), &table.to_csv())?;
    print!("{}", table.to_text());
    for w in table.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result {
    let dir = prepare(cfg)?;
    let n = cfg.synth_tokens;
    let (train, valid, test) = match cfg.synth {
        SynthKind::Pattern => (
            repeated_pattern(n),
            repeated_pattern(n / 2),
            repeated_pattern(n / 2),
        ),
        SynthKind::TwoRegime => {
            let c = two_regime(cfg.model.seed, 10, n, n / 2)?;
            (c.train, c.valid, c.test)
        }
    };
    for (name, tokens) in [
        ("train.txt", &train),
        ("valid.txt", &valid),
        ("test.txt", &test),
    ] {
        write_tokens(&dir.join(name), tokens)?;
        println!("{}", dir.join(name).display());
    }
    Ok(())
}

pub fn keys() -> Result {
    let defaults = duallm::ModelConfig::default();
    for (k, v) in defaults.to_pairs() {
        println!("{k}={v}");
    }
    for (k, v, doc) in RUN_KEYS {
        println!("# {doc}\n{k}={v}");
    }
    Ok(())
}

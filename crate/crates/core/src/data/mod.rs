//! Corpus ingestion, vocabulary, and contiguous batching for stateful
//! truncated BPTT.

pub mod synthetic;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::TokenBatch;

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Whitespace tokenization with an end-of-sequence marker after every line.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        out.extend(line.split_whitespace().map(str::to_string));
        out.push(EOS.to_string());
    }
    out
}

pub fn load_tokens(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.is_empty() {
        return Err(Error::Data {
            path: path.to_path_buf(),
            reason: "empty file".into(),
        });
    }
    Ok(tokenize(&text))
}

#[derive(Clone, Debug)]
pub struct CorpusPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

/// Tokenized train/validation/test splits.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl Corpus {
    /// Builds the vocabulary from the training split and encodes all three.
    pub fn encode(&self) -> Result<EncodedCorpus> {
        let vocab = Vocab::build(&self.train)?;
        Ok(EncodedCorpus {
            train: vocab.encode(&self.train)?,
            valid: vocab.encode(&self.valid)?,
            test: vocab.encode(&self.test)?,
            vocab,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EncodedCorpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn load_corpus(paths: &CorpusPaths) -> Result<Corpus> {
    Ok(Corpus {
        train: load_tokens(&paths.train)?,
        valid: load_tokens(&paths.valid)?,
        test: load_tokens(&paths.test)?,
    })
}

/// Dense bijection between tokens and ids. `<eos>` is always id 0; other
/// tokens get ids in order of first appearance in the training split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    frozen: bool,
}

impl Vocab {
    pub fn build(train: &[String]) -> Result<Vocab> {
        if train.is_empty() {
            return Err(Error::CorpusTooShort("empty training sequence".into()));
        }
        let mut v = Vocab {
            index: HashMap::new(),
            tokens: Vec::new(),
            frozen: false,
        };
        v.insert(EOS);
        for t in train {
            v.insert(t);
        }
        v.frozen = true;
        Ok(v)
    }

    fn insert(&mut self, token: &str) {
        debug_assert!(!self.frozen);
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn unk(&self) -> Option<usize> {
        self.id(UNK)
    }

    /// Maps tokens to ids; unseen tokens resolve to `<unk>`.
    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        let unk = self.unk();
        tokens
            .iter()
            .map(|t| {
                self.id(t)
                    .or(unk)
                    .ok_or_else(|| Error::NoUnknownToken(t.clone()))
            })
            .collect()
    }
}

/// Token ids laid out as `B` contiguous chunks, one per batch row. Trailing
/// tokens that do not fill the matrix are dropped.
#[derive(Clone, Debug)]
pub struct BatchStream {
    batch: usize,
    columns: usize,
    data: Vec<usize>,
}

impl BatchStream {
    pub fn new(ids: &[usize], batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let columns = ids.len() / batch;
        if columns < 2 {
            return Err(Error::CorpusTooShort(format!(
                "{} tokens cannot fill {batch} rows of at least 2",
                ids.len()
            )));
        }
        Ok(BatchStream {
            batch,
            columns,
            data: ids[..batch * columns].to_vec(),
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn chunk(&self, row: usize) -> &[usize] {
        &self.data[row * self.columns..(row + 1) * self.columns]
    }

    /// Number of next-token targets in one pass.
    pub fn targets(&self) -> usize {
        self.batch * (self.columns - 1)
    }

    /// Left-to-right, non-overlapping `(x, y)` windows of at most `steps`
    /// columns with `y` shifted one position ahead of `x`. The last window
    /// may be shorter.
    pub fn windows(&self, steps: usize) -> Windows<'_> {
        Windows {
            stream: self,
            steps: steps.max(1),
            cursor: 0,
        }
    }

    fn slice(&self, start: usize, len: usize) -> TokenBatch {
        let mut ids = Vec::with_capacity(self.batch * len);
        for b in 0..self.batch {
            ids.extend_from_slice(&self.chunk(b)[start..start + len]);
        }
        TokenBatch::new(self.batch, len, ids).expect("window fits the stream")
    }
}

pub struct Windows<'a> {
    stream: &'a BatchStream,
    steps: usize,
    cursor: usize,
}

impl Iterator for Windows<'_> {
    type Item = (TokenBatch, TokenBatch);

    fn next(&mut self) -> Option<Self::Item> {
        let remaining = self.stream.columns - 1 - self.cursor;
        if remaining == 0 {
            return None;
        }
        let len = remaining.min(self.steps);
        let x = self.stream.slice(self.cursor, len);
        let y = self.stream.slice(self.cursor + 1, len);
        self.cursor += len;
        Some((x, y))
    }
}

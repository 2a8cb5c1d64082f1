//! Small generated corpora for desk-scale experiments.

use std::path::Path;

use super::EOS;
use crate::error::{Error, Result};
use crate::tensor::RngStream;

const SENTENCES: [&str; 4] = [
    "the cat sat on the mat",
    "a dog ran to the park",
    "the bird flew over a tree",
    "my fish swam in the bowl",
];

/// `total` tokens of a fixed four-sentence cycle. Every token is predictable
/// from context, but several (`the`, `a`, `<eos>`) need more than the
/// previous word.
pub fn repeated_pattern(total: usize) -> Vec<String> {
    let cycle: Vec<String> = SENTENCES
        .iter()
        .flat_map(|s| s.split_whitespace().chain(std::iter::once(EOS)))
        .map(str::to_string)
        .collect();
    cycle.iter().cycle().take(total).cloned().collect()
}

/// First-order Markov source over `t0..t{n-1}`: each word moves to its
/// designated successor with probability `stickiness`, otherwise to a
/// uniformly drawn word. Sentences end after `sentence_len` words.
#[derive(Clone, Debug)]
pub struct MarkovSource {
    successor: Vec<usize>,
    stickiness: f64,
    sentence_len: usize,
}

impl MarkovSource {
    pub fn new(successor: Vec<usize>, stickiness: f64, sentence_len: usize) -> Result<Self> {
        let n = successor.len();
        if n == 0 || successor.iter().any(|&s| s >= n) {
            return Err(Error::InvalidArgument(
                "successor table must map 0..n into 0..n".into(),
            ));
        }
        if !(0.0..=1.0).contains(&stickiness) || sentence_len == 0 {
            return Err(Error::InvalidArgument(
                "stickiness in [0,1] and positive sentence length required".into(),
            ));
        }
        Ok(MarkovSource {
            successor,
            stickiness,
            sentence_len,
        })
    }

    /// A random successor permutation over `n` words.
    pub fn random(
        n: usize,
        stickiness: f64,
        sentence_len: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        Self::new(perm, stickiness, sentence_len)
    }

    pub fn words(&self) -> usize {
        self.successor.len()
    }

    pub fn sample(&self, total: usize, rng: &mut RngStream) -> Vec<String> {
        let n = self.words();
        let mut out = Vec::with_capacity(total);
        let mut word = rng.below(n);
        let mut in_sentence = 0;
        while out.len() < total {
            if in_sentence == self.sentence_len {
                out.push(EOS.to_string());
                in_sentence = 0;
                continue;
            }
            out.push(format!("t{word}"));
            in_sentence += 1;
            word = if rng.next_f64() < self.stickiness {
                self.successor[word]
            } else {
                rng.below(n)
            };
        }
        out
    }
}

/// Splits for a distribution-shift experiment: train and validation come
/// from regime A; test is regime A for its first half and regime B (a
/// different successor permutation over the same words) for the second.
#[derive(Clone, Debug)]
pub struct TwoRegime {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

pub fn two_regime(seed: u64, words: usize, train_len: usize, eval_len: usize) -> Result<TwoRegime> {
    let mut rng = RngStream::new(seed);
    let a = MarkovSource::random(words, 0.9, 12, &mut rng)?;
    let b = MarkovSource::random(words, 0.9, 12, &mut rng)?;
    let train = a.sample(train_len, &mut rng);
    let valid = a.sample(eval_len, &mut rng);
    let mut test = a.sample(eval_len / 2, &mut rng);
    test.extend(b.sample(eval_len - eval_len / 2, &mut rng));
    Ok(TwoRegime { train, valid, test })
}

/// Renders tokens as text lines, breaking at each `<eos>`. Reading the
/// result back yields the same tokens when the sequence ends with `<eos>`.
pub fn to_text(tokens: &[String]) -> String {
    let mut out = String::new();
    let mut first = true;
    for t in tokens {
        if t == EOS {
            out.push('\n');
            first = true;
        } else {
            if !first {
                out.push(' ');
            }
            out.push_str(t);
            first = false;
        }
    }
    if !first {
        out.push('\n');
    }
    out
}

pub fn write_tokens(path: &Path, tokens: &[String]) -> Result<()> {
    std::fs::write(path, to_text(tokens)).map_err(|e| Error::io(path, e))
}

//! Deterministic synthetic tasks and a character-level text task.
//!
//! Token 0 is the separator everywhere; task symbols start at 1.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::training::{DatasetSplit, Sample};

/// Digits occupy tokens 1..=10, then the `+` sign.
const DIGIT0: usize = 1;
const PLUS: usize = 11;
const MODULAR_VOCAB: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub enum TaskSpec {
    /// Echo a random string over symbols `1..vocab`.
    Copy { vocab: usize, len: usize },
    /// Emit the prompt reversed.
    Reverse { vocab: usize, len: usize },
    /// `a+b` with decimal digits, answer `(a+b) mod p`.
    ModularArithmetic { p: usize },
    /// Windows over a byte corpus; the first half is the prompt.
    CharLM { path: PathBuf, window: usize },
    /// Weighted interleave of several tasks; weights are normalized.
    MultiTaskMix(Vec<(TaskSpec, f64)>),
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::Copy { .. } => "copy",
            TaskSpec::Reverse { .. } => "reverse",
            TaskSpec::ModularArithmetic { .. } => "modular",
            TaskSpec::CharLM { .. } => "charlm",
            TaskSpec::MultiTaskMix(_) => "mix",
        }
    }

    /// Smallest vocabulary that holds every token the task emits.
    pub fn vocab_size(&self) -> usize {
        match self {
            TaskSpec::Copy { vocab, .. } | TaskSpec::Reverse { vocab, .. } => *vocab,
            TaskSpec::ModularArithmetic { .. } => MODULAR_VOCAB,
            TaskSpec::CharLM { .. } => 257,
            TaskSpec::MultiTaskMix(parts) => parts.iter().map(|(t, _)| t.vocab_size()).max().unwrap_or(1),
        }
    }

    /// Longest prompt + separator + target a sample can need.
    pub fn max_len(&self) -> usize {
        match self {
            TaskSpec::Copy { len, .. } | TaskSpec::Reverse { len, .. } => 2 * len + 1,
            TaskSpec::ModularArithmetic { p } => {
                let digits = p.saturating_sub(1).max(1).to_string().len();
                3 * digits + 2
            }
            TaskSpec::CharLM { window, .. } => window + 1,
            TaskSpec::MultiTaskMix(parts) => parts.iter().map(|(t, _)| t.max_len()).max().unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::Copy { vocab, len } | TaskSpec::Reverse { vocab, len } => {
                if *vocab < 2 || *len == 0 {
                    return Err(Error::config("task needs vocab >= 2 and len >= 1"));
                }
            }
            TaskSpec::ModularArithmetic { p } => {
                if *p < 2 {
                    return Err(Error::config("modulus must be at least 2"));
                }
            }
            TaskSpec::CharLM { window, .. } => {
                if *window < 2 {
                    return Err(Error::config("character window must be at least 2"));
                }
            }
            TaskSpec::MultiTaskMix(parts) => {
                if parts.is_empty() {
                    return Err(Error::config("task mix is empty"));
                }
                for (t, w) in parts {
                    if !(*w > 0.0 && w.is_finite()) {
                        return Err(Error::config(format!("mix weight {w} must be positive")));
                    }
                    if matches!(t, TaskSpec::MultiTaskMix(_)) {
                        return Err(Error::config("nested task mixes are not supported"));
                    }
                    t.validate()?;
                }
            }
        }
        Ok(())
    }
}

fn digits(mut v: usize) -> Vec<usize> {
    let mut out = Vec::new();
    loop {
        out.push(DIGIT0 + v % 10);
        v /= 10;
        if v == 0 {
            break;
        }
    }
    out.reverse();
    out
}

struct Corpus(Vec<u8>);

fn load_corpus(path: &PathBuf, window: usize) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::input(format!("cannot read corpus {}: {e}", path.display())))?;
    if bytes.len() < window {
        return Err(Error::input(format!(
            "corpus {} has {} bytes, window needs {window}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(Corpus(bytes))
}

fn sample_one(spec: &TaskSpec, corpus: Option<&Corpus>, rng: &mut ChaCha8Rng) -> Sample {
    let task = spec.name().to_string();
    match spec {
        TaskSpec::Copy { vocab, len } => {
            let prompt: Vec<usize> = (0..*len).map(|_| rng.gen_range(1..*vocab)).collect();
            Sample { target: prompt.clone(), prompt, task }
        }
        TaskSpec::Reverse { vocab, len } => {
            let prompt: Vec<usize> = (0..*len).map(|_| rng.gen_range(1..*vocab)).collect();
            let target = prompt.iter().rev().copied().collect();
            Sample { prompt, target, task }
        }
        TaskSpec::ModularArithmetic { p } => {
            let (a, b) = (rng.gen_range(0..*p), rng.gen_range(0..*p));
            let mut prompt = digits(a);
            prompt.push(PLUS);
            prompt.extend(digits(b));
            Sample { prompt, target: digits((a + b) % p), task }
        }
        TaskSpec::CharLM { window, .. } => {
            let bytes = &corpus.expect("corpus loaded").0;
            let start = rng.gen_range(0..=bytes.len() - window);
            let toks: Vec<usize> = bytes[start..start + window].iter().map(|&b| b as usize + 1).collect();
            let half = window / 2;
            Sample { prompt: toks[..half].to_vec(), target: toks[half..].to_vec(), task }
        }
        TaskSpec::MultiTaskMix(_) => unreachable!("mixes are expanded by the caller"),
    }
}

/// Generates `n` samples from `spec` and splits them 90/10 into train/dev.
/// Output is a pure function of `(spec, n, seed)`.
pub fn make_dataset(spec: &TaskSpec, n: usize, seed: u64) -> Result<DatasetSplit> {
    if n < 2 {
        return Err(Error::input("a dataset needs at least two samples"));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts: Vec<(TaskSpec, f64)> = match spec {
        TaskSpec::MultiTaskMix(parts) => parts.clone(),
        other => vec![(other.clone(), 1.0)],
    };
    let corpora: Vec<Option<Corpus>> = parts
        .iter()
        .map(|(t, _)| match t {
            TaskSpec::CharLM { path, window } => load_corpus(path, *window).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;
    let total_w: f64 = parts.iter().map(|(_, w)| w).sum();
    let weights: Vec<f64> = parts.iter().map(|(_, w)| w / total_w).collect();

    // Largest-deficit interleave: after i samples, task j has been chosen
    // within one of i·w_j times.
    let mut taken = vec![0usize; parts.len()];
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let j = (0..parts.len())
            .max_by(|&a, &b| {
                let da = weights[a] * (i + 1) as f64 - taken[a] as f64;
                let db = weights[b] * (i + 1) as f64 - taken[b] as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("nonempty mix");
        taken[j] += 1;
        samples.push(sample_one(&parts[j].0, corpora[j].as_ref(), &mut rng));
    }
    samples.shuffle(&mut rng);
    let n_dev = (n / 10).max(1);
    let dev = samples.split_off(n - n_dev);
    Ok(DatasetSplit { train: samples, dev })
}

/// Parses a whitespace- or comma-separated token list.
pub fn parse_tokens(s: &str) -> Result<Vec<usize>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|_| Error::input(format!("bad token `{t}`"))))
        .collect()
}

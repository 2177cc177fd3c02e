//! Tabular autoregressive softmax policy.
//!
//! A policy is a trie of logit vectors keyed by token prefix. Sampling,
//! sequence probabilities and log-probability gradients are all exact: there
//! is no function approximation anywhere. Prefixes that have never been
//! written read as all-zero logits (a uniform row).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DcrlError, Result};

pub type Token = u32;
pub type QuestionId = u32;

/// Token space shared by every policy in a suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub sep: Token,
    pub eos: Token,
}

impl Vocab {
    pub fn new(size: usize, sep: Token, eos: Token) -> Result<Self> {
        let vocab = Self { size, sep, eos };
        vocab.validate()?;
        Ok(vocab)
    }

    /// `size` tokens where the last two are SEP and EOS.
    pub fn with_size(size: usize) -> Result<Self> {
        if size < 3 {
            return Err(DcrlError::InvalidVocab(format!("size {size} < 3")));
        }
        Self::new(size, size as Token - 2, size as Token - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 3 {
            return Err(DcrlError::InvalidVocab(format!("size {} < 3", self.size)));
        }
        if self.sep == self.eos {
            return Err(DcrlError::InvalidVocab("sep and eos must differ".into()));
        }
        if self.sep as usize >= self.size || self.eos as usize >= self.size {
            return Err(DcrlError::InvalidVocab(format!(
                "sep {} / eos {} out of range for size {}",
                self.sep, self.eos, self.size
            )));
        }
        Ok(())
    }

    /// Tokens that are neither SEP nor EOS, in ascending order.
    pub fn content_tokens(&self) -> impl Iterator<Item = Token> + '_ {
        (0..self.size as Token).filter(move |&t| t != self.sep && t != self.eos)
    }

    pub fn n_content(&self) -> usize {
        self.size - 2
    }
}

/// An extracted answer: the token run between the last SEP and the final EOS.
///
/// Ordering is lexicographic on the token sequence, which is also the
/// tie-break order for every argmax over answers.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Answer(pub Vec<Token>);

impl Answer {
    pub fn single(token: Token) -> Self {
        Self(vec![token])
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }
}

impl std::fmt::Display for Answer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|t| t.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Anchor,
    Explorer,
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<Token>,
    /// Probability of each emitted token under the sampling policy.
    pub step_probs: Vec<f64>,
    /// `None` encodes an unparseable (INVALID) response.
    pub answer: Option<Answer>,
    pub source: Source,
}

impl Trajectory {
    /// Sequence probability under the behavior policy at sampling time.
    pub fn behavior_prob(&self) -> f64 {
        self.step_probs.iter().product()
    }

    pub fn behavior_log_prob(&self) -> f64 {
        self.step_probs.iter().map(|p| p.ln()).sum()
    }
}

/// Sparse gradient with the same layout as the policy trie.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    rows: BTreeMap<Vec<Token>, Vec<f64>>,
}

impl Gradient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[Token], &[f64])> {
        self.rows.iter().map(|(k, v)| (k.as_slice(), v.as_slice()))
    }

    pub fn row(&self, prefix: &[Token]) -> Option<&[f64]> {
        self.rows.get(prefix).map(Vec::as_slice)
    }

    pub fn get(&self, prefix: &[Token], token: Token) -> f64 {
        self.row(prefix)
            .and_then(|r| r.get(token as usize).copied())
            .unwrap_or(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `row[prefix] += alpha * values`, creating a zero row when missing.
    pub fn add_row(&mut self, prefix: &[Token], alpha: f64, values: &[f64]) {
        let row = self
            .rows
            .entry(prefix.to_vec())
            .or_insert_with(|| vec![0.0; values.len()]);
        for (r, v) in row.iter_mut().zip(values) {
            *r += alpha * v;
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Gradient) {
        for (prefix, values) in &other.rows {
            self.add_row(prefix, alpha, values);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for row in self.rows.values_mut() {
            row.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|v| v.is_finite())
    }
}

/// The generative model for one question: a trie of per-prefix logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    question_id: QuestionId,
    vocab: Vocab,
    max_len: usize,
    logits: BTreeMap<Vec<Token>, Vec<f64>>,
}

impl PolicyParams {
    pub fn new(question_id: QuestionId, vocab: Vocab, max_len: usize) -> Result<Self> {
        vocab.validate()?;
        if max_len == 0 {
            return Err(DcrlError::InvalidConfig("max_len must be positive".into()));
        }
        Ok(Self {
            question_id,
            vocab,
            max_len,
            logits: BTreeMap::new(),
        })
    }

    pub fn question_id(&self) -> QuestionId {
        self.question_id
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn logits_at(&self, prefix: &[Token]) -> Option<&[f64]> {
        self.logits.get(prefix).map(Vec::as_slice)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[Token], &[f64])> {
        self.logits.iter().map(|(k, v)| (k.as_slice(), v.as_slice()))
    }

    pub fn n_entries(&self) -> usize {
        self.logits.len()
    }

    /// Next-token distribution at `prefix`. At depth `max_len` this is a
    /// point mass on EOS regardless of any stored logits.
    pub fn probs_at(&self, prefix: &[Token]) -> Vec<f64> {
        if prefix.len() >= self.max_len {
            let mut p = vec![0.0; self.vocab.size];
            p[self.vocab.eos as usize] = 1.0;
            return p;
        }
        match self.logits.get(prefix) {
            Some(row) => softmax(row),
            None => vec![1.0 / self.vocab.size as f64; self.vocab.size],
        }
    }

    pub fn set_logits(&mut self, prefix: &[Token], logits: Vec<f64>) -> Result<()> {
        self.check_row(prefix, &logits)?;
        self.logits.insert(prefix.to_vec(), logits);
        Ok(())
    }

    fn check_row(&self, prefix: &[Token], logits: &[f64]) -> Result<()> {
        let bad = |reason: String| DcrlError::InvalidLogits {
            prefix: prefix.to_vec(),
            reason,
        };
        if prefix.len() > self.max_len {
            return Err(bad(format!("prefix deeper than max_len {}", self.max_len)));
        }
        if let Some(&t) = prefix.iter().find(|&&t| t as usize >= self.vocab.size) {
            return Err(bad(format!("token {t} out of vocabulary")));
        }
        if logits.len() != self.vocab.size {
            return Err(bad(format!(
                "expected {} logits, got {}",
                self.vocab.size,
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite logit".into()));
        }
        Ok(())
    }

    /// `logits += step * grad`. Rows touched for the first time start at zero.
    /// Rows at depth `max_len` are never materialized: their emission is forced.
    pub fn apply(&mut self, grad: &Gradient, step: f64) {
        if step == 0.0 {
            return;
        }
        for (prefix, values) in grad.rows() {
            if prefix.len() >= self.max_len {
                continue;
            }
            let row = self
                .logits
                .entry(prefix.to_vec())
                .or_insert_with(|| vec![0.0; values.len()]);
            for (r, v) in row.iter_mut().zip(values) {
                *r += step * v;
            }
        }
    }

    /// Materializes a zero row at `prefix` if none is stored yet.
    pub fn touch(&mut self, prefix: &[Token]) {
        if prefix.len() < self.max_len && !self.logits.contains_key(prefix) {
            self.logits.insert(prefix.to_vec(), vec![0.0; self.vocab.size]);
        }
    }

    pub(crate) fn logit_mut(&mut self, prefix: &[Token], token: Token) -> Option<&mut f64> {
        self.logits.get_mut(prefix).and_then(|row| row.get_mut(token as usize))
    }

    pub fn is_finite(&self) -> bool {
        self.logits.values().flatten().all(|v| v.is_finite())
    }

    /// Checks that `tokens` is a sequence this policy can emit.
    pub fn validate_sequence(&self, tokens: &[Token]) -> Result<()> {
        let bad = |msg: String| Err(DcrlError::InvalidSequence(msg));
        let Some(&last) = tokens.last() else {
            return bad("empty sequence".into());
        };
        if last != self.vocab.eos {
            return bad(format!("sequence {tokens:?} does not end in eos"));
        }
        if tokens.len() > self.max_len + 1 {
            return bad(format!(
                "length {} exceeds max_len + 1 = {}",
                tokens.len(),
                self.max_len + 1
            ));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab.size) {
            return bad(format!("token {t} out of vocabulary"));
        }
        if tokens[..tokens.len() - 1].contains(&self.vocab.eos) {
            return bad(format!("sequence {tokens:?} has eos before its end"));
        }
        Ok(())
    }

    /// Serializes to the checkpoint JSON layout with 17 significant digits
    /// per float.
    pub fn to_checkpoint_json(&self) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "{{\"question_id\":{},\"max_len\":{},\"vocab\":{{\"size\":{},\"sep\":{},\"eos\":{}}},\"entries\":[",
            self.question_id, self.max_len, self.vocab.size, self.vocab.sep, self.vocab.eos
        );
        for (i, (prefix, logits)) in self.logits.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let prefix: Vec<String> = prefix.iter().map(|t| t.to_string()).collect();
            let logits: Vec<String> = logits.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = write!(
                out,
                "{{\"prefix\":[{}],\"logits\":[{}]}}",
                prefix.join(","),
                logits.join(",")
            );
        }
        out.push_str("]}");
        out
    }

    pub fn from_checkpoint_json(json: &str) -> Result<Self> {
        let repr: CheckpointRepr = serde_json::from_str(json)?;
        let mut params = Self::new(repr.question_id, repr.vocab, repr.max_len)?;
        for entry in repr.entries {
            params.set_logits(&entry.prefix, entry.logits)?;
        }
        Ok(params)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRepr {
    question_id: QuestionId,
    max_len: usize,
    vocab: Vocab,
    entries: Vec<CheckpointEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointEntry {
    prefix: Vec<Token>,
    logits: Vec<f64>,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Samples one trajectory autoregressively. Terminates on EOS or at the
/// forced EOS at depth `max_len`.
pub fn sample_trajectory<R: Rng + ?Sized>(params: &PolicyParams, source: Source, rng: &mut R) -> Trajectory {
    let eos = params.vocab.eos;
    let mut tokens = Vec::with_capacity(params.max_len + 1);
    let mut step_probs = Vec::with_capacity(params.max_len + 1);
    loop {
        let probs = params.probs_at(&tokens);
        let k = sample_index(&probs, rng);
        tokens.push(k as Token);
        step_probs.push(probs[k]);
        if k as Token == eos {
            break;
        }
    }
    let answer = extract_answer(&tokens, &params.vocab);
    Trajectory {
        tokens,
        step_probs,
        answer,
        source,
    }
}

pub fn sample_group<R: Rng + ?Sized>(params: &PolicyParams, source: Source, n: usize, rng: &mut R) -> Vec<Trajectory> {
    (0..n).map(|_| sample_trajectory(params, source, rng)).collect()
}

/// `log pi(tokens | x)`.
pub fn log_seq_prob(params: &PolicyParams, tokens: &[Token]) -> Result<f64> {
    params.validate_sequence(tokens)?;
    Ok((0..tokens.len())
        .map(|t| params.probs_at(&tokens[..t])[tokens[t] as usize].ln())
        .sum())
}

/// `pi(tokens | x)` as a product of per-step softmax probabilities.
pub fn exact_seq_prob(params: &PolicyParams, tokens: &[Token]) -> Result<f64> {
    params.validate_sequence(tokens)?;
    Ok((0..tokens.len())
        .map(|t| params.probs_at(&tokens[..t])[tokens[t] as usize])
        .product())
}

/// Gradient of `log pi(tokens | x)` with respect to the logits. Each visited
/// prefix contributes `onehot(emitted) - softmax(row)`; forced EOS steps
/// contribute nothing.
pub fn logprob_grad(params: &PolicyParams, tokens: &[Token]) -> Result<Gradient> {
    params.validate_sequence(tokens)?;
    let mut grad = Gradient::new();
    accumulate_logprob_grad(params, tokens, 1.0, &mut grad);
    Ok(grad)
}

/// `grad += weight * d log pi(tokens) / d logits` for an already validated sequence.
pub(crate) fn accumulate_logprob_grad(params: &PolicyParams, tokens: &[Token], weight: f64, grad: &mut Gradient) {
    let free = tokens.len().min(params.max_len);
    for t in 0..free {
        let prefix = &tokens[..t];
        let mut row = params.probs_at(prefix);
        row.iter_mut().for_each(|p| *p = -*p);
        row[tokens[t] as usize] += 1.0;
        grad.add_row(prefix, weight, &row);
    }
}

/// Answer between the last SEP and the terminal EOS, or `None` (INVALID)
/// when there is no SEP or the span is empty.
pub fn extract_answer(tokens: &[Token], vocab: &Vocab) -> Option<Answer> {
    let body = match tokens.split_last() {
        Some((&last, body)) if last == vocab.eos => body,
        _ => return None,
    };
    let sep_pos = body.iter().rposition(|&t| t == vocab.sep)?;
    let span = &body[sep_pos + 1..];
    if span.is_empty() {
        None
    } else {
        Some(Answer(span.to_vec()))
    }
}

/// Shannon entropy (nats) of the exact answer distribution, with INVALID
/// treated as one more outcome.
pub fn entropy_of_answer_distribution(params: &PolicyParams) -> Result<f64> {
    Ok(crate::oracle::exact_answer_distribution(params)?.entropy())
}

//! Corpus BLEU, token-level edit distance and exact match.
//!
//! All scores are on a 0..=100 scale and compare already tokenized
//! sequences, so there is no tokenizer ambiguity.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use crate::error::{Error, Result};

fn check_counts<T>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!("{} candidates for {} references", candidates.len(), references.len())));
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total, summed over the
/// corpus.
pub fn clipped_precision<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> (usize, usize) {
    let mut matched = 0;
    let mut total = 0;
    for (c, r) in candidates.iter().zip(references) {
        let rc = ngram_counts(r, n);
        for (gram, count) in ngram_counts(c, n) {
            matched += count.min(rc.get(gram).copied().unwrap_or(0));
            total += count;
        }
    }
    (matched, total)
}

/// Corpus BLEU-4 with uniform weights and brevity penalty.
pub fn bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    bleu_smoothed(candidates, references, false)
}

/// As [`bleu`]; with `smooth` a zero precision becomes `1e-9` instead of
/// zeroing the score.
pub fn bleu_smoothed<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], smooth: bool) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Invalid("BLEU needs at least one candidate".into()));
    }
    check_counts(candidates, references)?;
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (matched, total) = clipped_precision(candidates, references, n);
        let p = if total == 0 { 0.0 } else { matched as f64 / total as f64 };
        if p == 0.0 {
            if !smooth {
                return Ok(0.0);
            }
            log_sum += 1e-9f64.ln();
        } else {
            log_sum += p.ln();
        }
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

/// Unit-cost Levenshtein distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100 · (1 − Σ lev / Σ max(len))`; empty-vs-empty pairs are skipped.
pub fn edit_score<T: PartialEq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_counts(candidates, references)?;
    let (mut dist, mut norm) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        dist += levenshtein(c, r);
        norm += c.len().max(r.len());
    }
    Ok(if norm == 0 { 100.0 } else { 100.0 * (1.0 - dist as f64 / norm as f64) })
}

pub fn exact_match<T: PartialEq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_counts(candidates, references)?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let hits = candidates.iter().zip(references).filter(|(c, r)| c == r).count();
    Ok(100.0 * hits as f64 / candidates.len() as f64)
}

/// Scores for one evaluated split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub exact_match: f64,
    pub bleu: f64,
    pub edit_score: f64,
    /// Mean Levenshtein distance per sample, in tokens.
    pub mean_edit_distance: f64,
    pub n: usize,
}

impl EvalReport {
    pub const HEADER: &'static str = "exact_match\tbleu\tedit_score\tmean_edit_distance\tn";

    pub fn compute<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<Self> {
        let bleu = bleu(candidates, references)?;
        let total: usize = candidates.iter().zip(references).map(|(c, r)| levenshtein(c, r)).sum();
        Ok(Self {
            exact_match: exact_match(candidates, references)?,
            bleu,
            edit_score: edit_score(candidates, references)?,
            mean_edit_distance: total as f64 / candidates.len() as f64,
            n: candidates.len(),
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
            self.exact_match, self.bleu, self.edit_score, self.mean_edit_distance, self.n
        )
    }
}

//! Corpus-level BLEU over pre-tokenised sequences, with floor smoothing of
//! zero-match orders.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    /// In [0, 100].
    pub score: f64,
    /// Precision entering the geometric mean per order (smoothed when an
    /// order has no match); `None` for orders the hypotheses do not reach.
    pub precisions: [Option<f64>; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    /// Hypothesis n-gram counts per order.
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    /// Set when every hypothesis is empty; the score is then 0.
    pub degenerate: bool,
    /// Identifies the reference set the score was computed against.
    pub reference_fingerprint: u64,
}

impl BleuScore {
    pub fn ratio(&self) -> f64 {
        if self.ref_len == 0 {
            0.0
        } else {
            self.hyp_len as f64 / self.ref_len as f64
        }
    }
}

impl fmt::Display for BleuScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ps: Vec<String> = self
            .precisions
            .iter()
            .map(|p| p.map_or_else(|| "-".to_string(), |p| format!("{:.1}", 100.0 * p)))
            .collect();
        write!(
            f,
            "BLEU = {:.2} ({}, BP={:.3}, ratio={:.3})",
            self.score,
            ps.join("/"),
            self.brevity_penalty,
            self.ratio()
        )
    }
}

/// Fingerprint of a reference set; order-sensitive.
pub fn reference_fingerprint<T: Hash>(references: &[Vec<T>]) -> u64 {
    let mut h = DefaultHasher::new();
    references.len().hash(&mut h);
    for r in references {
        r.hash(&mut h);
    }
    h.finish()
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn corpus_bleu<T: Hash + Eq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuScore> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("hypotheses"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (hyp, r) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
            matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }

    let mut precisions = [None; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if totals[n] > 0 {
            let p = if matches[n] == 0 {
                1.0 / (2.0 * totals[n] as f64)
            } else {
                matches[n] as f64 / totals[n] as f64
            };
            precisions[n] = Some(p);
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let included: Vec<f64> = precisions.iter().flatten().copied().collect();
    let degenerate = hyp_len == 0;
    let score = if degenerate {
        0.0
    } else {
        let w = 1.0 / included.len() as f64;
        100.0 * brevity_penalty * included.iter().map(|p| w * p.ln()).sum::<f64>().exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
        degenerate,
        reference_fingerprint: reference_fingerprint(references),
    })
}

/// Decrease from `baseline` to `pruned`; negative when pruning helps.
pub fn bleu_drop(baseline: &BleuScore, pruned: &BleuScore) -> Result<f64> {
    if baseline.reference_fingerprint != pruned.reference_fingerprint {
        return Err(Error::ReferenceMismatch);
    }
    Ok(baseline.score - pruned.score)
}

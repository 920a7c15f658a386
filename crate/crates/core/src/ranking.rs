//! Head orderings (metric-based, random and sequential backward selection)
//! and pruning curves obtained by masking heads along an ordering.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bleu::{bleu_drop, corpus_bleu, BleuScore};
use crate::corpus::Token;
use crate::error::{Error, Result};
use crate::heads::{AttnType, HeadId, HeadLayout, HeadMask};
use crate::metrics::MetricTable;
use crate::nmt::layers::Real;
use crate::nmt::Model;

/// Heads of one attention type, least important first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadRanking {
    /// `conf`, `var`, `cov`, `sbs` or `rand-<run>`.
    pub method: String,
    pub attn: AttnType,
    pub pair: String,
    pub order: Vec<HeadId>,
    /// Seed or source-table description the ranking was derived from.
    pub provenance: String,
}

impl HeadRanking {
    /// Checks the order is a permutation of the heads of its attention type.
    pub fn validate(&self, layout: &HeadLayout) -> Result<()> {
        let mut sorted = self.order.clone();
        sorted.sort();
        if sorted != layout.heads_of(self.attn) {
            return Err(Error::IncompleteRanking(format!(
                "{} ranking for {}/{} is not a permutation of the {} {} heads",
                self.method,
                self.attn,
                self.pair,
                layout.count(self.attn),
                self.attn
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Mask of the first `k` heads.
    pub fn prefix_mask(&self, k: usize) -> HeadMask {
        self.order[..k].iter().copied().collect()
    }

    /// 1-based rank position of every head.
    pub fn positions(&self) -> BTreeMap<HeadId, usize> {
        self.order.iter().enumerate().map(|(i, &h)| (h, i + 1)).collect()
    }
}

/// Ascending normalized score; ties by head id.
pub fn rank_by_metric(table: &MetricTable, layout: &HeadLayout) -> Result<HeadRanking> {
    table.check_complete(layout)?;
    let mut rows: Vec<(f64, HeadId)> = table.rows.iter().map(|r| (r.normalized, r.head)).collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(HeadRanking {
        method: table.kind.to_string(),
        attn: table.attn,
        pair: table.pair.clone(),
        order: rows.into_iter().map(|(_, h)| h).collect(),
        provenance: format!("table {}/{}/{}", table.kind, table.attn, table.pair),
    })
}

/// Uniformly random permutation of the heads of `attn`, fixed by `seed`.
pub fn rank_random(layout: &HeadLayout, attn: AttnType, pair: &str, seed: u64) -> HeadRanking {
    let mut order = layout.heads_of(attn);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    HeadRanking {
        method: "rand".into(),
        attn,
        pair: pair.to_string(),
        order,
        provenance: format!("seed {seed}"),
    }
}

/// Scores translations produced under a head mask.
pub trait MaskEvaluator: Sync {
    fn evaluate(&self, mask: &HeadMask) -> Result<BleuScore>;
}

/// Counts evaluations of the wrapped evaluator.
pub struct CountingEvaluator<E> {
    inner: E,
    calls: AtomicUsize,
}

impl<E: MaskEvaluator> CountingEvaluator<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<E: MaskEvaluator> MaskEvaluator for CountingEvaluator<E> {
    fn evaluate(&self, mask: &HeadMask) -> Result<BleuScore> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.evaluate(mask)
    }
}

impl<E: MaskEvaluator> MaskEvaluator for &E {
    fn evaluate(&self, mask: &HeadMask) -> Result<BleuScore> {
        (**self).evaluate(mask)
    }
}

/// Encoded sources of one language pair with their references.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub pair: String,
    pub sources: Vec<Vec<Token>>,
    pub references: Vec<Vec<Token>>,
}

/// Translates every set with the model and scores all sets as one corpus.
/// Skipped sentences count as empty hypotheses.
pub struct CorpusEvaluator<'a, T: Real> {
    pub model: &'a Model<T>,
    pub sets: Vec<EvalSet>,
}

impl<T: Real> MaskEvaluator for CorpusEvaluator<'_, T> {
    fn evaluate(&self, mask: &HeadMask) -> Result<BleuScore> {
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for set in &self.sets {
            let out = self.model.translate(&set.pair, &set.sources, mask, false)?;
            hyps.extend(out.hypotheses_or_empty());
            refs.extend(set.references.iter().cloned());
        }
        corpus_bleu(&hyps, &refs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDrop {
    pub head: HeadId,
    pub bleu: f64,
    pub drop: f64,
}

/// One selection step: every remaining candidate was evaluated with the
/// mask `selections + candidate`, and `selected` had the smallest drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbsStep {
    pub step: usize,
    pub selected: HeadId,
    pub bleu: f64,
    pub drop: f64,
    pub candidates: Vec<CandidateDrop>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbsOutcome {
    pub ranking: HeadRanking,
    pub log: Vec<SbsStep>,
    /// Mask evaluations performed.
    pub calls: usize,
}

/// An aborted selection run with the steps completed before the failure.
#[derive(Debug, thiserror::Error)]
#[error("selection aborted after {} completed steps: {source}", .completed.len())]
pub struct SbsFailure {
    pub completed: Vec<SbsStep>,
    #[source]
    pub source: Error,
}

/// Sequential backward selection over the heads of `attn`. Drops are
/// measured against the constant unpruned `baseline`; `on_step` sees each
/// step as soon as it completes.
pub fn sbs<E: MaskEvaluator>(
    evaluator: &E,
    layout: &HeadLayout,
    attn: AttnType,
    pair: &str,
    baseline: &BleuScore,
    mut on_step: impl FnMut(&SbsStep) -> Result<()>,
) -> std::result::Result<SbsOutcome, SbsFailure> {
    let mut remaining = layout.heads_of(attn);
    let mut selections = HeadMask::empty();
    let mut order = Vec::with_capacity(remaining.len());
    let mut log: Vec<SbsStep> = Vec::with_capacity(remaining.len());
    let mut calls = 0;

    while !remaining.is_empty() {
        calls += remaining.len();
        let scored: Result<Vec<CandidateDrop>> = remaining
            .par_iter()
            .map(|&head| {
                let score = evaluator.evaluate(&selections.with(head))?;
                Ok(CandidateDrop {
                    head,
                    bleu: score.score,
                    drop: bleu_drop(baseline, &score)?,
                })
            })
            .collect();
        let candidates = match scored {
            Ok(c) => c,
            Err(source) => {
                return Err(SbsFailure {
                    completed: log,
                    source,
                })
            }
        };
        // `remaining` is sorted, so the first minimum is the smallest head id
        let best = candidates
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.drop.total_cmp(&b.1.drop).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
            .expect("non-empty candidate list");
        let chosen = candidates[best].clone();
        let step = SbsStep {
            step: log.len(),
            selected: chosen.head,
            bleu: chosen.bleu,
            drop: chosen.drop,
            candidates,
        };
        if let Err(source) = on_step(&step) {
            return Err(SbsFailure {
                completed: log,
                source,
            });
        }
        log.push(step);
        selections.insert(chosen.head);
        order.push(chosen.head);
        remaining.remove(best);
    }

    Ok(SbsOutcome {
        ranking: HeadRanking {
            method: "sbs".into(),
            attn,
            pair: pair.to_string(),
            order,
            provenance: format!("baseline bleu {}", baseline.score),
        },
        log,
        calls,
    })
}

/// Re-evaluates every logged prefix mask and returns the fresh scores,
/// one per step.
pub fn replay_sbs<E: MaskEvaluator>(evaluator: &E, log: &[SbsStep]) -> Result<Vec<f64>> {
    let mut mask = HeadMask::empty();
    log.iter()
        .map(|s| {
            mask.insert(s.selected);
            Ok(evaluator.evaluate(&mask)?.score)
        })
        .collect()
}

pub fn write_sbs_log<W: Write>(mut out: W, log: &[SbsStep]) -> Result<()> {
    for step in log {
        serde_json::to_writer(&mut out, step)?;
        out.write_all(b"\n").map_err(|e| Error::io("<sbs log>", e))?;
    }
    Ok(())
}

pub fn read_sbs_log<R: BufRead>(input: R) -> Result<Vec<SbsStep>> {
    let mut log = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<sbs log>", e))?;
        if !line.trim().is_empty() {
            log.push(serde_json::from_str(&line)?);
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    /// Heads masked.
    pub k: usize,
    pub bleu: f64,
}

/// BLEU as a function of the number of heads pruned along a ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneCurve {
    pub method: String,
    pub attn: AttnType,
    pub pair: String,
    pub points: Vec<CurvePoint>,
    /// Smoothed samples for display only.
    pub fitted: Option<Vec<(f64, f64)>>,
}

impl PruneCurve {
    pub fn ks(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.k).collect()
    }

    pub fn bleu_at(&self, k: usize) -> Option<f64> {
        self.points.iter().find(|p| p.k == k).map(|p| p.bleu)
    }
}

/// 0, step, 2*step, ... and always `n` itself.
pub fn curve_grid(n: usize, step: usize) -> Result<Vec<usize>> {
    if step == 0 {
        return Err(Error::Config("curve step must be >= 1".into()));
    }
    let mut ks: Vec<usize> = (0..=n).step_by(step).collect();
    if *ks.last().expect("grid starts at 0") != n {
        ks.push(n);
    }
    Ok(ks)
}

pub fn prune_curve<E: MaskEvaluator>(evaluator: &E, ranking: &HeadRanking, step: usize) -> Result<PruneCurve> {
    let points = curve_grid(ranking.len(), step)?
        .into_iter()
        .map(|k| {
            Ok(CurvePoint {
                k,
                bleu: evaluator.evaluate(&ranking.prefix_mask(k))?.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PruneCurve {
        method: ranking.method.clone(),
        attn: ranking.attn,
        pair: ranking.pair.clone(),
        points,
        fitted: None,
    })
}

/// Pointwise mean of curves sampled on one grid.
pub fn average_curves(curves: &[PruneCurve], method: &str) -> Result<PruneCurve> {
    let first = curves.first().ok_or(Error::Empty("curves"))?;
    if curves.iter().any(|c| c.ks() != first.ks() || c.attn != first.attn) {
        return Err(Error::GridMismatch);
    }
    let points = first
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| CurvePoint {
            k: p.k,
            bleu: curves.iter().map(|c| c.points[i].bleu).sum::<f64>() / curves.len() as f64,
        })
        .collect();
    Ok(PruneCurve {
        method: method.to_string(),
        attn: first.attn,
        pair: first.pair.clone(),
        points,
        fitted: None,
    })
}

/// Population standard deviation of each head's 1-based rank across the
/// per-pair rankings, in head-id order.
pub fn rank_std_across_pairs(rankings: &BTreeMap<String, HeadRanking>) -> Result<Vec<(HeadId, f64)>> {
    if rankings.len() < 2 {
        return Err(Error::Config(format!(
            "rank spread needs at least 2 pairs, got {}",
            rankings.len()
        )));
    }
    let positions: Vec<BTreeMap<HeadId, usize>> = rankings.values().map(HeadRanking::positions).collect();
    let universe: Vec<HeadId> = positions[0].keys().copied().collect();
    for ((pair, r), pos) in rankings.iter().zip(&positions) {
        if pos.len() != r.order.len() || !pos.keys().copied().eq(universe.iter().copied()) {
            return Err(Error::IncompleteRanking(format!(
                "ranking for {pair} does not share the head universe"
            )));
        }
    }
    let n = positions.len() as f64;
    Ok(universe
        .into_iter()
        .map(|h| {
            let ranks: Vec<f64> = positions.iter().map(|p| p[&h] as f64).collect();
            let mean = ranks.iter().sum::<f64>() / n;
            let var = ranks.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
            (h, var.sqrt())
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct RankingRow {
    method: String,
    attn: AttnType,
    pair: String,
    rank: usize,
    layer: usize,
    head: usize,
}

/// Writes `method,attn,pair,rank,layer,head` with 1-based ranks.
pub fn write_rankings_csv<W: Write>(out: W, rankings: &[HeadRanking]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rankings {
        for (i, h) in r.order.iter().enumerate() {
            w.serialize(RankingRow {
                method: r.method.clone(),
                attn: r.attn,
                pair: r.pair.clone(),
                rank: i + 1,
                layer: h.layer,
                head: h.head,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("<ranking csv>", e))?;
    Ok(())
}

pub fn read_rankings_csv<R: Read>(input: R) -> Result<Vec<HeadRanking>> {
    let mut out: Vec<HeadRanking> = Vec::new();
    for rec in csv::Reader::from_reader(input).deserialize() {
        let row: RankingRow = rec?;
        let same = out
            .last()
            .is_some_and(|r| r.method == row.method && r.attn == row.attn && r.pair == row.pair);
        if !same {
            out.push(HeadRanking {
                method: row.method.clone(),
                attn: row.attn,
                pair: row.pair.clone(),
                order: Vec::new(),
                provenance: String::new(),
            });
        }
        let r = out.last_mut().expect("pushed above");
        if row.rank != r.order.len() + 1 {
            return Err(Error::format(
                "ranking csv",
                format!("rank {} out of sequence for {}/{}", row.rank, row.method, row.pair),
            ));
        }
        r.order.push(HeadId::new(row.attn, row.layer, row.head));
    }
    if out.is_empty() {
        return Err(Error::format("ranking csv", "no rows"));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    method: String,
    attn: AttnType,
    pair: String,
    k: usize,
    bleu: f64,
}

/// Writes `method,attn,pair,k,bleu`.
pub fn write_curves_csv<W: Write>(out: W, curves: &[PruneCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in curves {
        for p in &c.points {
            w.serialize(CurveRow {
                method: c.method.clone(),
                attn: c.attn,
                pair: c.pair.clone(),
                k: p.k,
                bleu: p.bleu,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("<curve csv>", e))?;
    Ok(())
}

pub fn read_curves_csv<R: Read>(input: R) -> Result<Vec<PruneCurve>> {
    let mut out: Vec<PruneCurve> = Vec::new();
    for rec in csv::Reader::from_reader(input).deserialize() {
        let row: CurveRow = rec?;
        let same = out
            .last()
            .is_some_and(|c| c.method == row.method && c.attn == row.attn && c.pair == row.pair);
        if !same {
            out.push(PruneCurve {
                method: row.method.clone(),
                attn: row.attn,
                pair: row.pair.clone(),
                points: Vec::new(),
                fitted: None,
            });
        }
        let c = out.last_mut().expect("pushed above");
        if c.points.last().is_some_and(|p| p.k >= row.k) || (c.points.is_empty() && row.k != 0) {
            return Err(Error::format("curve csv", format!("k grid of {}/{} must rise from 0", row.method, row.pair)));
        }
        c.points.push(CurvePoint { k: row.k, bleu: row.bleu });
    }
    if out.is_empty() {
        return Err(Error::format("curve csv", "no rows"));
    }
    Ok(out)
}

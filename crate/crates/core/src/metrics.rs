//! Per-head importance metrics computed from attention weights:
//! confidence, (negated) variance and coverage, their average over a
//! sentence set and z-normalisation across the heads of one attention type.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::capture::{AttentionCapture, AttentionMatrix};
use crate::error::{Error, Result};
use crate::heads::{AttnType, HeadId, HeadLayout};

/// Pair tag of tables computed over every language pair jointly.
pub const ALL_PAIRS: &str = "ALL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "conf")]
    Confidence,
    #[serde(rename = "var")]
    Variance,
    #[serde(rename = "cov")]
    Coverage,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Confidence, MetricKind::Variance, MetricKind::Coverage];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Confidence => "conf",
            MetricKind::Variance => "var",
            MetricKind::Coverage => "cov",
        }
    }

    pub fn eval(self, m: &AttentionMatrix) -> Result<f64> {
        match self {
            MetricKind::Confidence => confidence(m),
            MetricKind::Variance => variance(m),
            MetricKind::Coverage => coverage(m),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conf" | "confidence" => Ok(MetricKind::Confidence),
            "var" | "variance" => Ok(MetricKind::Variance),
            "cov" | "coverage" => Ok(MetricKind::Coverage),
            other => Err(Error::format("metric", format!("expected conf|var|cov, got {other:?}"))),
        }
    }
}

fn non_empty(m: &AttentionMatrix) -> Result<()> {
    if m.is_empty() {
        Err(Error::EmptyMatrix)
    } else {
        Ok(())
    }
}

/// Mean over query rows of the largest weight in the row.
pub fn confidence(m: &AttentionMatrix) -> Result<f64> {
    non_empty(m)?;
    let total: f64 = m
        .row_iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / m.rows() as f64)
}

/// Negated attention-weighted squared distance of key positions from each
/// row's expected position. Positions are 0-based; the value is shift
/// invariant, so the base does not matter.
pub fn variance(m: &AttentionMatrix) -> Result<f64> {
    non_empty(m)?;
    let mut total = 0.0;
    for row in m.row_iter() {
        let mu: f64 = row.iter().enumerate().map(|(j, &a)| j as f64 * a).sum();
        total += row
            .iter()
            .enumerate()
            .map(|(j, &a)| {
                let dev = mu - j as f64;
                a * dev * dev
            })
            .sum::<f64>();
    }
    Ok(-total)
}

/// Sum over key positions of the squared total attention each key receives.
pub fn coverage(m: &AttentionMatrix) -> Result<f64> {
    non_empty(m)?;
    let mut cols = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (c, &a) in cols.iter_mut().zip(row) {
            *c += a;
        }
    }
    Ok(cols.iter().map(|c| c * c).sum())
}

/// Sentence-averaged metric values, one per head of an attention type.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScores {
    pub kind: MetricKind,
    pub attn: AttnType,
    pub pair: String,
    pub sentences: usize,
    pub scores: Vec<(HeadId, f64)>,
}

/// Averages `kind` over every capture of attention type `attn`. Masked
/// (all-zero) matrices are skipped; per-head sums run in (sid, pair) order
/// so the result does not depend on the order of `captures`.
pub fn aggregate(
    captures: &[AttentionCapture],
    kind: MetricKind,
    attn: AttnType,
    layout: &HeadLayout,
    pair: &str,
) -> Result<RawScores> {
    let mut selected: Vec<&AttentionCapture> = captures.iter().filter(|c| c.attn == attn).collect();
    if selected.is_empty() {
        return Err(Error::Empty("captures"));
    }
    selected.sort_by(|a, b| (a.sid, &a.pair).cmp(&(b.sid, &b.pair)));

    let heads = layout.heads_of(attn);
    let mut sums = vec![0.0; heads.len()];
    let mut counts = vec![0usize; heads.len()];
    for cap in &selected {
        for (slot_idx, id) in heads.iter().enumerate() {
            let Some(slot) = cap.slot(id.layer, id.head) else {
                continue;
            };
            if slot.masked || slot.matrix.is_zero() {
                continue;
            }
            sums[slot_idx] += kind.eval(&slot.matrix)?;
            counts[slot_idx] += 1;
        }
    }
    let scores = heads
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(&id, (&s, &c))| {
            if c == 0 {
                Err(Error::NoUsableMatrices(id))
            } else {
                Ok((id, s / c as f64))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RawScores {
        kind,
        attn,
        pair: pair.to_string(),
        sentences: selected.len(),
        scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub head: HeadId,
    pub raw: f64,
    pub normalized: f64,
}

/// Raw and z-normalised scores of one metric for every head of one
/// attention type and one pair scope.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub kind: MetricKind,
    pub attn: AttnType,
    pub pair: String,
    pub sentences: usize,
    pub rows: Vec<MetricRow>,
}

/// Population z-scores; all-equal inputs map to exactly zero.
pub fn z_scores(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::TooFewHeads);
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok(vec![0.0; values.len()]);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}

pub fn normalize(raw: &RawScores) -> Result<MetricTable> {
    let values: Vec<f64> = raw.scores.iter().map(|(_, v)| *v).collect();
    let z = z_scores(&values)?;
    Ok(MetricTable {
        kind: raw.kind,
        attn: raw.attn,
        pair: raw.pair.clone(),
        sentences: raw.sentences,
        rows: raw
            .scores
            .iter()
            .zip(z)
            .map(|(&(head, raw), normalized)| MetricRow {
                head,
                raw,
                normalized,
            })
            .collect(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    metric: MetricKind,
    attn: AttnType,
    pair: String,
    layer: usize,
    head: usize,
    raw: f64,
    normalized: f64,
}

impl MetricTable {
    /// Checks that the table covers every head of its attention type once.
    pub fn check_complete(&self, layout: &HeadLayout) -> Result<()> {
        let mut heads: Vec<HeadId> = self.rows.iter().map(|r| r.head).collect();
        heads.sort();
        if heads != layout.heads_of(self.attn) {
            return Err(Error::IncompleteRanking(format!(
                "{} table for {} covers {} of {} heads",
                self.kind,
                self.pair,
                heads.len(),
                layout.count(self.attn)
            )));
        }
        Ok(())
    }

    pub fn normalized(&self) -> BTreeMap<HeadId, f64> {
        self.rows.iter().map(|r| (r.head, r.normalized)).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_tables_csv(out, std::slice::from_ref(self))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut tables = read_tables_csv(input)?;
        match tables.len() {
            1 => Ok(tables.remove(0)),
            n => Err(Error::format("metric table", format!("expected one table, found {n}"))),
        }
    }
}

/// Writes `metric,attn,pair,layer,head,raw,normalized` with shortest
/// round-trip float formatting.
pub fn write_tables_csv<W: Write>(out: W, tables: &[MetricTable]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for t in tables {
        for r in &t.rows {
            w.serialize(CsvRow {
                metric: t.kind,
                attn: t.attn,
                pair: t.pair.clone(),
                layer: r.head.layer,
                head: r.head.head,
                raw: r.raw,
                normalized: r.normalized,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("<metric csv>", e))?;
    Ok(())
}

/// Reads one or more tables; consecutive rows sharing (metric, attn, pair)
/// form one table. The sentence count is not stored and reads back as 0.
pub fn read_tables_csv<R: Read>(input: R) -> Result<Vec<MetricTable>> {
    let mut r = csv::Reader::from_reader(input);
    let mut tables: Vec<MetricTable> = Vec::new();
    for rec in r.deserialize() {
        let row: CsvRow = rec?;
        let same = tables
            .last()
            .is_some_and(|t| t.kind == row.metric && t.attn == row.attn && t.pair == row.pair);
        if !same {
            tables.push(MetricTable {
                kind: row.metric,
                attn: row.attn,
                pair: row.pair.clone(),
                sentences: 0,
                rows: Vec::new(),
            });
        }
        tables.last_mut().unwrap().rows.push(MetricRow {
            head: HeadId::new(row.attn, row.layer, row.head),
            raw: row.raw,
            normalized: row.normalized,
        });
    }
    if tables.is_empty() {
        return Err(Error::format("metric table", "no rows"));
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> AttentionMatrix {
        AttentionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn uniform(n: usize, m: usize) -> AttentionMatrix {
        AttentionMatrix::new(n, m, vec![1.0 / m as f64; n * m]).unwrap()
    }

    fn identity(n: usize) -> AttentionMatrix {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        AttentionMatrix::new(n, n, data).unwrap()
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(&uniform(4, 4)).unwrap(), 0.25);
        assert_eq!(confidence(&identity(3)).unwrap(), 1.0);
        assert_abs_diff_eq!(confidence(&mat(&[&[0.5, 0.5], &[0.1, 0.9]])).unwrap(), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn variance_examples() {
        assert_eq!(variance(&identity(4)).unwrap(), 0.0);
        assert_eq!(variance(&mat(&[&[0.5, 0.5]])).unwrap(), -0.25);
        assert_eq!(variance(&uniform(2, 2)).unwrap(), -0.5);
    }

    #[test]
    fn coverage_examples() {
        assert_abs_diff_eq!(coverage(&uniform(4, 4)).unwrap(), 4.0, epsilon = 1e-12);
        let col0 = mat(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert_eq!(coverage(&col0).unwrap(), 9.0);
        assert_eq!(coverage(&identity(3)).unwrap(), 3.0);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        let e = AttentionMatrix::new(0, 0, vec![]).unwrap();
        for k in MetricKind::ALL {
            assert!(matches!(k.eval(&e), Err(Error::EmptyMatrix)));
        }
    }

    #[test]
    fn normalize_examples() {
        let z = z_scores(&[1.0, 2.0, 3.0]).unwrap();
        let expected = (1.5f64).sqrt(); // 1 / sqrt(2/3)
        assert_abs_diff_eq!(z[0], -expected, epsilon = 1e-12);
        assert_eq!(z[1], 0.0);
        assert_abs_diff_eq!(z[2], expected, epsilon = 1e-12);
        assert_eq!(z_scores(&[5.0; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(z_scores(&[0.0, 2.0]).unwrap(), vec![-1.0, 1.0]);
        assert!(matches!(z_scores(&[1.0]), Err(Error::TooFewHeads)));
    }

    fn capture_with(sid: usize, pair: &str, per_head: &[AttentionMatrix]) -> AttentionCapture {
        let n = per_head[0].rows();
        let mut c = AttentionCapture::new(sid, pair, AttnType::EncSelf, 1, per_head.len(), n, n);
        for (h, m) in per_head.iter().enumerate() {
            c.set(0, h, m.clone(), false);
        }
        c
    }

    #[test]
    fn aggregate_means_and_masking() {
        let layout = HeadLayout::new(1, 1, 2).unwrap();
        let a = mat(&[&[0.4, 0.3, 0.3], &[0.4, 0.3, 0.3], &[0.3, 0.4, 0.3]]);
        let b = mat(&[&[0.6, 0.2, 0.2], &[0.2, 0.6, 0.2], &[0.2, 0.2, 0.6]]);
        let caps = vec![capture_with(0, "x", &[a.clone(), b.clone()]), capture_with(1, "x", &[b.clone(), a.clone()])];
        let single = aggregate(&caps[..1], MetricKind::Confidence, AttnType::EncSelf, &layout, "x").unwrap();
        assert_abs_diff_eq!(single.scores[0].1, 0.4, epsilon = 1e-15);
        let both = aggregate(&caps, MetricKind::Confidence, AttnType::EncSelf, &layout, "x").unwrap();
        assert_abs_diff_eq!(both.scores[0].1, 0.5, epsilon = 1e-15);
        assert_eq!(both.sentences, 2);

        let mut masked = caps.clone();
        masked[1].set(0, 0, AttentionMatrix::zeros(3, 3), true);
        let m = aggregate(&masked, MetricKind::Confidence, AttnType::EncSelf, &layout, "x").unwrap();
        assert_abs_diff_eq!(m.scores[0].1, 0.4, epsilon = 1e-15);

        masked[0].set(0, 0, AttentionMatrix::zeros(3, 3), true);
        assert!(matches!(
            aggregate(&masked, MetricKind::Confidence, AttnType::EncSelf, &layout, "x"),
            Err(Error::NoUsableMatrices(h)) if h == HeadId::enc(0, 0)
        ));
    }

    #[test]
    fn aggregate_is_order_independent() {
        let layout = HeadLayout::new(1, 1, 1).unwrap();
        let caps: Vec<_> = (0..7)
            .map(|i| {
                let p = 0.1 + 0.1 * i as f64;
                capture_with(i, "x", &[mat(&[&[p, 1.0 - p], &[1.0 - p, p]])])
            })
            .collect();
        let mut rev = caps.clone();
        rev.reverse();
        for k in MetricKind::ALL {
            let a = aggregate(&caps, k, AttnType::EncSelf, &layout, "x").unwrap();
            let b = aggregate(&rev, k, AttnType::EncSelf, &layout, "x").unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn csv_roundtrip_exact() {
        let raw = RawScores {
            kind: MetricKind::Coverage,
            attn: AttnType::Cross,
            pair: "rev".into(),
            sentences: 3,
            scores: vec![
                (HeadId::cross(0, 0), 0.1 + 0.2),
                (HeadId::cross(0, 1), std::f64::consts::PI),
                (HeadId::cross(1, 0), -1e-300),
            ],
        };
        let t = normalize(&raw).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("metric,attn,pair,layer,head,raw,normalized\ncov,cross,rev,0,0,"));
        let back = MetricTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.rows, t.rows);
    }

    fn arb_matrix() -> impl Strategy<Value = AttentionMatrix> {
        (1usize..9, 1usize..9).prop_flat_map(|(n, m)| {
            proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, m), n).prop_map(move |rows| {
                let rows: Vec<Vec<f64>> = rows
                    .into_iter()
                    .map(|r| {
                        let z: f64 = r.iter().sum();
                        if z == 0.0 {
                            vec![1.0 / r.len() as f64; r.len()]
                        } else {
                            r.iter().map(|v| v / z).collect()
                        }
                    })
                    .collect();
                AttentionMatrix::from_rows(&rows).unwrap()
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn metric_bounds(m in arb_matrix()) {
            let (i, j) = (m.rows() as f64, m.cols() as f64);
            let c = confidence(&m).unwrap();
            prop_assert!(c >= 1.0 / j - 1e-12 && c <= 1.0 + 1e-12);
            let v = variance(&m).unwrap();
            prop_assert!(v <= 1e-12);
            let cov = coverage(&m).unwrap();
            prop_assert!(cov >= i * i / j - 1e-9 && cov <= i * i + 1e-9);
        }
    }

    proptest! {
        #[test]
        fn variance_shift_invariant(m in arb_matrix(), shift in 1usize..5) {
            // prepend `shift` zero columns: every position index moves by `shift`
            let rows: Vec<Vec<f64>> = m
                .row_iter()
                .map(|r| std::iter::repeat_n(0.0, shift).chain(r.iter().copied()).collect())
                .collect();
            let shifted = AttentionMatrix::from_rows(&rows).unwrap();
            prop_assert!((variance(&m).unwrap() - variance(&shifted).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn doubly_stochastic_coverage(n in 1usize..7, perm_seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            // average of the identity and a permutation matrix
            let mut data = vec![0.0; n * n];
            for i in 0..n {
                data[i * n + i] += 0.5;
                data[i * n + perm[i]] += 0.5;
            }
            let m = AttentionMatrix::new(n, n, data).unwrap();
            prop_assert!((coverage(&m).unwrap() - n as f64).abs() < 1e-12);
        }

        #[test]
        fn z_scores_are_standardized(values in proptest::collection::vec(-1e3f64..1e3, 2..40)) {
            let z = z_scores(&values).unwrap();
            if values.iter().all(|&v| v == values[0]) {
                prop_assert!(z.iter().all(|&x| x == 0.0));
            } else {
                let n = z.len() as f64;
                let mean = z.iter().sum::<f64>() / n;
                let std = (z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((std - 1.0).abs() < 1e-9);
            }
        }
    }
}

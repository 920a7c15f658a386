//! Two-sided Mann-Whitney U test.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::heads::AttnType;
use crate::ranking::PruneCurve;

/// Largest sample size for which the exact null distribution is used.
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MwuMode {
    Exact,
    Normal,
}

impl fmt::Display for MwuMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MwuMode::Exact => "exact",
            MwuMode::Normal => "normal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MwuMethod {
    /// Exact when both samples are small and tie-free, normal otherwise.
    #[default]
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MwuResult {
    /// U of the first sample.
    pub u: f64,
    pub n: usize,
    pub m: usize,
    pub p: f64,
    pub mode: MwuMode,
    /// Every value of both samples is identical; `p` is then 1.
    pub degenerate: bool,
}

/// Number of rank assignments giving each U value, for sizes `n` and `m`
/// without ties. Index is U, length is n*m + 1.
pub fn u_distribution(n: usize, m: usize) -> Vec<u64> {
    // table[j] holds the distribution for (i, j) while i sweeps 0..=n
    let mut table: Vec<Vec<u64>> = (0..=m).map(|_| vec![1]).collect();
    for i in 1..=n {
        let mut next: Vec<Vec<u64>> = Vec::with_capacity(m + 1);
        next.push(vec![1]);
        for j in 1..=m {
            // the largest value is either from the first sample, which then
            // beats all j values of the second, or from the second
            let mut d = vec![0u64; i * j + 1];
            for (u, &c) in table[j].iter().enumerate() {
                d[u + j] += c;
            }
            for (u, &c) in next[j - 1].iter().enumerate() {
                d[u] += c;
            }
            next.push(d);
        }
        table = next;
    }
    table.swap_remove(m)
}

fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MwuResult> {
    mann_whitney_u_with(a, b, MwuMethod::Auto)
}

pub fn mann_whitney_u_with(a: &[f64], b: &[f64], method: MwuMethod) -> Result<MwuResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("sample"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Config("sample contains NaN".into()));
    }
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum: f64 = ranks[..n].iter().sum();
    let u = rank_sum - (n * (n + 1)) as f64 / 2.0;

    let small = n <= EXACT_LIMIT && m <= EXACT_LIMIT;
    let mode = match method {
        MwuMethod::Auto if small && ties.is_empty() => MwuMode::Exact,
        MwuMethod::Auto | MwuMethod::Normal => MwuMode::Normal,
        MwuMethod::Exact if ties.is_empty() && small => MwuMode::Exact,
        MwuMethod::Exact => {
            return Err(Error::Config(format!(
                "exact test needs tie-free samples of at most {EXACT_LIMIT} values"
            )))
        }
    };

    let degenerate = ties.len() == 1 && ties[0] == n + m;
    let p = if degenerate {
        1.0
    } else if mode == MwuMode::Exact {
        let dist = u_distribution(n, m);
        let total: u64 = dist.iter().sum();
        let u = u as usize;
        let le: u64 = dist[..=u].iter().sum();
        let ge: u64 = dist[u..].iter().sum();
        ((2 * le.min(ge)) as f64 / total as f64).min(1.0)
    } else {
        let big_n = (n + m) as f64;
        let nm = (n * m) as f64;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (big_n * (big_n - 1.0));
        let sigma = (nm / 12.0 * ((big_n + 1.0) - tie_term)).sqrt();
        let z = ((u - nm / 2.0).abs() - 0.5).max(0.0) / sigma;
        erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(MwuResult {
        u,
        n,
        m,
        p,
        mode,
        degenerate,
    })
}

/// Tests the per-k BLEU values of two curves on one grid, excluding k = 0.
pub fn compare_curves(a: &PruneCurve, b: &PruneCurve) -> Result<MwuResult> {
    if a.ks() != b.ks() {
        return Err(Error::GridMismatch);
    }
    let sample = |c: &PruneCurve| -> Vec<f64> { c.points.iter().filter(|p| p.k != 0).map(|p| p.bleu).collect() };
    mann_whitney_u(&sample(a), &sample(b))
}

/// One line of the comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MwuRow {
    pub metric: String,
    pub attn: AttnType,
    #[serde(rename = "pairA")]
    pub pair_a: String,
    #[serde(rename = "pairB")]
    pub pair_b: String,
    #[serde(rename = "U")]
    pub u: f64,
    pub n: usize,
    pub m: usize,
    pub p: f64,
    pub mode: MwuMode,
}

impl MwuRow {
    pub fn new(metric: &str, attn: AttnType, pair_a: &str, pair_b: &str, r: &MwuResult) -> Self {
        Self {
            metric: metric.to_string(),
            attn,
            pair_a: pair_a.to_string(),
            pair_b: pair_b.to_string(),
            u: r.u,
            n: r.n,
            m: r.m,
            p: r.p,
            mode: r.mode,
        }
    }
}

/// Writes `metric,attn,pairA,pairB,U,n,m,p,mode`.
pub fn write_mwu_csv<W: Write>(out: W, rows: &[MwuRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<mwu csv>", e))?;
    Ok(())
}

pub fn read_mwu_csv<R: Read>(input: R) -> Result<Vec<MwuRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::CurvePoint;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, SeedableRng};

    /// Two-sided exact p by enumerating every choice of ranks for the
    /// first sample.
    fn brute_force_p(a: &[f64], b: &[f64]) -> f64 {
        let (n, m) = (a.len(), b.len());
        let total_n = n + m;
        let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        pooled.sort_by(f64::total_cmp);
        let observed: usize = a.iter().map(|x| pooled.iter().position(|y| y == x).unwrap() + 1).sum::<usize>() - n * (n + 1) / 2;
        let (mut le, mut ge, mut all) = (0u64, 0u64, 0u64);
        for bits in 0u32..(1 << total_n) {
            if bits.count_ones() as usize != n {
                continue;
            }
            let rank_sum: usize = (0..total_n).filter(|i| bits >> i & 1 == 1).map(|i| i + 1).sum();
            let u = rank_sum - n * (n + 1) / 2;
            all += 1;
            le += (u <= observed) as u64;
            ge += (u >= observed) as u64;
        }
        ((2 * le.min(ge)) as f64 / all as f64).min(1.0)
    }

    #[test]
    fn small_example() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert_eq!(r.mode, MwuMode::Exact);
        assert_eq!(r.p, 2.0 / 6.0);
    }

    #[test]
    fn distribution_counts() {
        assert_eq!(u_distribution(2, 2), vec![1, 1, 2, 1, 1]);
        assert_eq!(u_distribution(12, 12).iter().sum::<u64>(), 2_704_156);
        assert_eq!(u_distribution(0, 3), vec![1]);
    }

    #[test]
    fn identical_samples_give_one() {
        let a = [3.0, 1.0, 2.0, 7.5];
        let r = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(r.p, 1.0);
        assert_eq!(r.mode, MwuMode::Normal);
        let d = mann_whitney_u(&[2.0; 3], &[2.0; 4]).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.p, 1.0);
    }

    #[test]
    fn errors() {
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
        assert!(mann_whitney_u(&[f64::NAN], &[1.0]).is_err());
        assert!(mann_whitney_u_with(&[1.0, 1.0], &[2.0], MwuMethod::Exact).is_err());
    }

    #[test]
    fn exact_matches_enumeration_up_to_eight() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for n in 1..=8 {
            for m in 1..=8 {
                let mut values: Vec<f64> = (0..n + m).map(|v| v as f64 * 1.5 - 3.0).collect();
                values.shuffle(&mut rng);
                let (a, b) = values.split_at(n);
                let r = mann_whitney_u(a, b).unwrap();
                assert_eq!(r.mode, MwuMode::Exact);
                assert_eq!(r.p, brute_force_p(a, b), "n={n} m={m}");
            }
        }
    }

    #[test]
    fn normal_close_to_exact_at_ten() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let mut values: Vec<f64> = (0..20).map(|v| v as f64).collect();
            values.shuffle(&mut rng);
            let (a, b) = values.split_at(10);
            let e = mann_whitney_u_with(a, b, MwuMethod::Exact).unwrap();
            let z = mann_whitney_u_with(a, b, MwuMethod::Normal).unwrap();
            worst = worst.max((e.p - z.p).abs());
        }
        assert!(worst < 0.02, "{worst}");
    }

    fn curve(values: &[f64]) -> PruneCurve {
        PruneCurve {
            method: "conf".into(),
            attn: AttnType::EncSelf,
            pair: "x".into(),
            points: values.iter().enumerate().map(|(k, &bleu)| CurvePoint { k, bleu }).collect(),
            fitted: None,
        }
    }

    #[test]
    fn curve_comparisons() {
        // spread below 10 points, so the shifted copy lies entirely below
        let a = curve(&[95.0, 94.8, 94.1, 93.5, 92.0, 91.2, 90.3, 89.9, 88.7]);
        assert_eq!(compare_curves(&a, &a).unwrap().p, 1.0);
        let b = curve(&a.points.iter().map(|p| p.bleu - 10.0).collect::<Vec<_>>());
        let r = compare_curves(&a, &b).unwrap();
        // k = 0 is excluded, leaving 8 points per curve
        assert_eq!((r.n, r.m), (8, 8));
        assert_eq!(r.mode, MwuMode::Exact);
        let sa: Vec<f64> = a.points[1..].iter().map(|p| p.bleu).collect();
        let sb: Vec<f64> = b.points[1..].iter().map(|p| p.bleu).collect();
        let wins = sa.iter().map(|x| sb.iter().filter(|y| x > y).count()).sum::<usize>();
        assert_eq!(r.u, wins as f64);
        assert_eq!(r.p, brute_force_p(&sa, &sb));
        assert_eq!(r.u, 64.0);
        // only the most extreme split on each side: 2 / C(16, 8)
        assert_eq!(r.p, 2.0 / 12870.0);
        let mut short = a.clone();
        short.points.pop();
        assert!(matches!(compare_curves(&a, &short), Err(Error::GridMismatch)));
    }

    #[test]
    fn csv_roundtrip() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        let rows = vec![MwuRow::new("conf", AttnType::Cross, "rev", "ALL", &r)];
        let mut buf = Vec::new();
        write_mwu_csv(&mut buf, &rows).unwrap();
        assert!(buf.starts_with(b"metric,attn,pairA,pairB,U,n,m,p,mode\nconf,cross,rev,ALL,0.0,2,2,0.3333333333333333,exact\n"));
        assert_eq!(read_mwu_csv(buf.as_slice()).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn swapping_samples_mirrors_u(
            a in proptest::collection::vec(0u8..30, 1..15),
            b in proptest::collection::vec(0u8..30, 1..15),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let ab = mann_whitney_u(&a, &b).unwrap();
            let ba = mann_whitney_u(&b, &a).unwrap();
            prop_assert_eq!(ba.u, (a.len() * b.len()) as f64 - ab.u);
            prop_assert_eq!(ab.p, ba.p);
            prop_assert!(ab.p > 0.0 && ab.p <= 1.0);
            prop_assert!(ab.u >= 0.0 && ab.u <= (a.len() * b.len()) as f64);
        }
    }
}

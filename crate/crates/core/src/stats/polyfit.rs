//! Least-squares polynomial fits for smoothing pruning curves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_DEGREE: usize = 4;

/// Singular values below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PolyFit {
    pub degree: usize,
    /// Ascending powers of x in the original coordinates.
    pub coefficients: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
    /// Residual sum of squares.
    pub rss: f64,
    center: f64,
    half_width: f64,
    /// Ascending powers of the rescaled abscissa.
    scaled: Vec<f64>,
}

fn horner(coefficients: &[f64], t: f64) -> f64 {
    coefficients.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl PolyFit {
    fn rescale(&self, x: f64) -> f64 {
        (x - self.center) / self.half_width
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        if !(self.lo..=self.hi).contains(&x) {
            return Err(Error::OutOfRange {
                x,
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(horner(&self.scaled, self.rescale(x)))
    }

    /// `count` evenly spaced samples spanning the input range.
    pub fn sample(&self, count: usize) -> Vec<(f64, f64)> {
        let span = self.hi - self.lo;
        (0..count)
            .map(|i| {
                let x = if i + 1 == count {
                    self.hi
                } else {
                    self.lo + span * i as f64 / (count - 1).max(1) as f64
                };
                (x, horner(&self.scaled, self.rescale(x)))
            })
            .collect()
    }
}

pub fn polyfit(points: &[(f64, f64)], degree: usize) -> Result<PolyFit> {
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Config("polynomial fit needs finite points".into()));
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < degree + 1 {
        return Err(Error::RankDeficient { degree });
    }
    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    let center = (lo + hi) / 2.0;
    let half_width = if hi > lo { (hi - lo) / 2.0 } else { 1.0 };

    let cols = degree + 1;
    let a = DMatrix::from_fn(points.len(), cols, |r, c| ((points[r].0 - center) / half_width).powi(c as i32));
    let b = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let svd = a.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    if svd.singular_values.iter().any(|&s| s <= s_max * RANK_TOLERANCE) {
        return Err(Error::RankDeficient { degree });
    }
    let solution = svd
        .solve(&b, s_max * RANK_TOLERANCE)
        .map_err(|_| Error::RankDeficient { degree })?;
    let scaled: Vec<f64> = solution.iter().copied().collect();
    let residuals = &b - &a * &solution;
    let rss = residuals.norm_squared();

    // expand sum_k s_k ((x - center) / half_width)^k in powers of x
    let mut coefficients = vec![0.0; cols];
    for (k, &s) in scaled.iter().enumerate() {
        let scale = s / half_width.powi(k as i32);
        for (j, c) in coefficients.iter_mut().enumerate().take(k + 1) {
            *c += scale * binomial(k, j) * (-center).powi((k - j) as i32);
        }
    }
    Ok(PolyFit {
        degree,
        coefficients,
        lo,
        hi,
        rss,
        center,
        half_width,
        scaled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn line_is_recovered() {
        let pts: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect();
        let f = polyfit(&pts, 1).unwrap();
        assert!((f.coefficients[0] - 1.0).abs() < 1e-9);
        assert!((f.coefficients[1] - 2.0).abs() < 1e-9);
        assert!(f.rss < 1e-20);
        assert!((f.eval(2.5).unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_fit_is_the_mean() {
        let pts = [(0.0, 1.0), (1.0, 4.0), (5.0, 7.0)];
        let f = polyfit(&pts, 0).unwrap();
        assert!((f.coefficients[0] - 4.0).abs() < 1e-12);
        assert!((f.rss - 18.0).abs() < 1e-9);
    }

    #[test]
    fn full_degree_interpolates() {
        let pts = [(0.0, 3.0), (2.0, -1.0), (3.0, 4.0), (7.0, 0.5), (8.0, 2.0)];
        let f = polyfit(&pts, 4).unwrap();
        assert!(f.rss < 1e-9);
        for &(x, y) in &pts {
            assert!((f.eval(x).unwrap() - y).abs() < 1e-8);
            let expanded: f64 = f.coefficients.iter().enumerate().map(|(k, c)| c * x.powi(k as i32)).sum();
            assert!((expanded - y).abs() < 1e-6);
        }
    }

    #[test]
    fn deficient_and_out_of_range() {
        assert!(matches!(polyfit(&[(1.0, 1.0), (1.0, 2.0), (2.0, 0.0)], 2), Err(Error::RankDeficient { degree: 2 })));
        let f = polyfit(&[(0.0, 0.0), (1.0, 1.0)], 1).unwrap();
        assert!(matches!(f.eval(1.5), Err(Error::OutOfRange { .. })));
        assert!(f.eval(-0.1).is_err());
        let s = f.sample(5);
        assert_eq!(s.len(), 5);
        assert_eq!(s[0].0, 0.0);
        assert_eq!(s[4].0, 1.0);
    }

    proptest! {
        #[test]
        fn residuals_orthogonal_to_basis(
            ys in proptest::collection::vec(-100.0f64..100.0, 6..30),
            degree in 0usize..5,
        ) {
            let pts: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, &y)| (i as f64 * 2.0, y)).collect();
            let f = polyfit(&pts, degree).unwrap();
            prop_assert_eq!(f.coefficients.len(), degree + 1);
            for k in 0..=degree {
                let dot: f64 = pts
                    .iter()
                    .map(|&(x, y)| {
                        let t = f.rescale(x);
                        (y - horner(&f.scaled, t)) * t.powi(k as i32)
                    })
                    .sum();
                prop_assert!(dot.abs() < 1e-8, "k={} dot={}", k, dot);
            }
        }
    }
}

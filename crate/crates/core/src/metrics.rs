//! Phonetic accuracy from Levenshtein alignments, dynamic time warping and
//! attention diagonality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Pooled alignment counts; `acc = (n - d - s - i) / n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub n: usize,
    pub d: usize,
    pub s: usize,
    pub i: usize,
    pub acc: f64,
}

impl AccuracyReport {
    fn from_counts(n: usize, d: usize, s: usize, i: usize) -> Self {
        Self {
            n,
            d,
            s,
            i,
            acc: (n as f64 - d as f64 - s as f64 - i as f64) / n as f64,
        }
    }

    pub fn errors(&self) -> usize {
        self.d + self.s + self.i
    }
}

/// Minimal unit-cost alignment of `hyp` against `reference`. The backtrace
/// takes the diagonal whenever it is optimal, then deletion, then insertion.
pub fn align_count<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<AccuracyReport> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut del, mut sub, mut ins) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let miss = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[(i - 1) * w + j - 1] + miss == here {
                sub += miss;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            del += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(AccuracyReport::from_counts(n, del, sub, ins))
}

/// Counts pooled over every pair, then one ratio.
pub fn corpus_accuracy<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<AccuracyReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (mut n, mut d, mut s, mut i) = (0, 0, 0, 0);
    for (r, h) in pairs {
        let a = align_count(r, h)?;
        n += a.n;
        d += a.d;
        s += a.s;
        i += a.i;
    }
    Ok(AccuracyReport::from_counts(n, d, s, i))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtwResult {
    pub cost: f64,
    pub path: Vec<(usize, usize)>,
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Euclidean DTW with steps (1,0), (0,1), (1,1). The backtrace prefers the
/// diagonal, then the vertical step.
pub fn dtw(a: &Mat, b: &Mat) -> Result<DtwResult> {
    if a.rows == 0 || b.rows == 0 {
        return Err(Error::DimensionMismatch("DTW needs non-empty sequences".into()));
    }
    if a.cols != b.cols {
        return Err(Error::DimensionMismatch(format!("DTW frame sizes differ: {} vs {}", a.cols, b.cols)));
    }
    let (n, m) = (a.rows, b.rows);
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let cost = euclidean(a.row(i), b.row(j));
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i * m + j] = cost + best;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
        let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
        let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwResult {
        cost: acc[n * m - 1],
        path,
    })
}

pub const DIAGONAL_BAND: f64 = 0.15;

/// Fraction of attention mass within `|(i+.5)/T - (j+.5)/L| <= 0.15`.
pub fn attention_diagonality(weights: &Mat) -> Result<f64> {
    let (t, l) = (weights.rows, weights.cols);
    if t == 0 || l == 0 {
        return Err(Error::NonStochasticRows("empty attention matrix".into()));
    }
    let mut inside = 0.0;
    let mut total = 0.0;
    for i in 0..t {
        let row = weights.row(i);
        let sum: f64 = row.iter().map(|&w| w as f64).sum();
        if row.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-3 {
            return Err(Error::NonStochasticRows(format!("row {i} sums to {sum}")));
        }
        let y = (i as f64 + 0.5) / t as f64;
        for (j, &w) in row.iter().enumerate() {
            let x = (j as f64 + 0.5) / l as f64;
            if (y - x).abs() <= DIAGONAL_BAND + 1e-12 {
                inside += w as f64;
            }
        }
        total += sum;
    }
    Ok(inside / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        let a = align_count(&['a', 'b', 'c'], &['a', 'b', 'c']).unwrap();
        assert_eq!((a.n, a.d, a.s, a.i, a.acc), (3, 0, 0, 0, 1.0));
        let a = align_count(&['a', 'b', 'c'], &['a', 'c']).unwrap();
        assert_eq!((a.d, a.s, a.i), (1, 0, 0));
        assert!((a.acc - 2.0 / 3.0).abs() < 1e-12);
        let a = align_count(&['a', 'b'], &['b', 'a']).unwrap();
        assert_eq!((a.d, a.s, a.i, a.acc), (0, 2, 0, 0.0));
        assert!(matches!(align_count::<char>(&[], &['a']), Err(Error::EmptyReference)));
    }

    #[test]
    fn insertions_can_make_accuracy_negative() {
        let a = align_count(&[1], &[2, 3, 4]).unwrap();
        assert_eq!((a.s, a.i), (1, 2));
        assert!(a.acc < 0.0);
    }

    #[test]
    fn pooled_accuracy() {
        let r = corpus_accuracy(&[(vec![1, 2, 3], vec![1, 3]), (vec![4, 5], vec![4, 6])]).unwrap();
        assert_eq!((r.n, r.d, r.s, r.i), (5, 1, 1, 0));
        assert!((r.acc - 0.6).abs() < 1e-12);
        let one = corpus_accuracy(&[(vec![1, 2], vec![2])]).unwrap();
        assert_eq!(one, align_count(&[1, 2], &[2]).unwrap());
        let perfect = corpus_accuracy(&[(vec![1, 2], vec![1, 2]), (vec![1, 2], vec![1, 2])]).unwrap();
        assert_eq!(perfect.acc, 1.0);
        assert!(matches!(corpus_accuracy::<u8>(&[]), Err(Error::EmptyCorpus)));
    }

    fn col(v: &[f32]) -> Mat {
        Mat::new(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn dtw_examples() {
        let a = Mat::from_fn(4, 2, |r, c| (r * 2 + c) as f32);
        let r = dtw(&a, &a).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.path, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        let r = dtw(&col(&[0.0, 1.0]), &col(&[0.0, 0.0, 1.0])).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.path, vec![(0, 0), (0, 1), (1, 2)]);
        assert!(matches!(dtw(&a, &col(&[1.0])), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn diagonality_examples() {
        let eye = Mat::from_fn(10, 10, |r, c| if r == c { 1.0 } else { 0.0 });
        assert!((attention_diagonality(&eye).unwrap() - 1.0).abs() < 1e-12);
        let uni = Mat::from_fn(400, 400, |_, _| 1.0 / 400.0);
        assert!((attention_diagonality(&uni).unwrap() - 0.2775).abs() < 0.005);
        let first = Mat::from_fn(100, 100, |_, c| if c == 0 { 1.0 } else { 0.0 });
        assert!((attention_diagonality(&first).unwrap() - 0.15).abs() < 0.011);
        let bad = Mat::from_fn(2, 2, |_, _| 0.2);
        assert!(matches!(attention_diagonality(&bad), Err(Error::NonStochasticRows(_))));
    }

    proptest! {
        #[test]
        fn accuracy_is_one_iff_equal(r in proptest::collection::vec(0u8..4, 1..8), h in proptest::collection::vec(0u8..4, 0..8)) {
            let a = align_count(&r, &h).unwrap();
            prop_assert_eq!(a.acc == 1.0, r == h);
            prop_assert!(a.s <= a.n && a.d <= a.n);
        }

        #[test]
        fn pooled_accuracy_is_permutation_invariant(pairs in proptest::collection::vec((proptest::collection::vec(0u8..3, 1..5), proptest::collection::vec(0u8..3, 0..5)), 1..5)) {
            let mut rev = pairs.clone();
            rev.reverse();
            prop_assert_eq!(corpus_accuracy(&pairs).unwrap(), corpus_accuracy(&rev).unwrap());
        }

        #[test]
        fn dtw_cost_is_symmetric(a in proptest::collection::vec(-3.0f32..3.0, 1..7), b in proptest::collection::vec(-3.0f32..3.0, 1..7)) {
            let (x, y) = (col(&a), col(&b));
            let (p, q) = (dtw(&x, &y).unwrap(), dtw(&y, &x).unwrap());
            prop_assert!((p.cost - q.cost).abs() < 1e-9);
            prop_assert_eq!(dtw(&x, &x).unwrap().cost, 0.0);
            for w in p.path.windows(2) {
                let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                prop_assert!(matches!(step, (1, 0) | (0, 1) | (1, 1)));
            }
        }
    }
}

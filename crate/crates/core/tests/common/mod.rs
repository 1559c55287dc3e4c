#![allow(dead_code)]

//! Test-only oracles shared by the integration suites.

pub mod gradcases;

use cuedgen::nn::{Graph, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Builder<'a> = dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId + 'a;

/// Scalarizes a possibly non-scalar output with a fixed random projection so
/// every output component contributes to the checked gradient.
pub fn projected(g: &mut Graph<f64>, out: NodeId, seed: u64) -> NodeId {
    let (r, c) = g.dims(out);
    if r * c == 1 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let proj: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = g.constant(r, c, proj).unwrap();
    let m = g.mul(out, p).unwrap();
    g.sum(m)
}

/// Relative error `|a - n| / max(|a|, |n|)` between the analytic and the
/// central-difference gradient of every input, taken over the whole vector.
pub fn max_relative_error(inputs: &[(usize, usize, Vec<f64>)], build: &Builder, seed: u64) -> f64 {
    let h = 1e-5;
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .zip(vals)
            .map(|((r, c, _), v)| g.input(*r, *c, v.clone()).unwrap())
            .collect();
        let out = build(&mut g, &ids);
        let loss = projected(&mut g, out, seed);
        g.scalar(loss)
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, _, v)| v.clone()).collect();
    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|(r, c, v)| g.input(*r, *c, v.clone()).unwrap())
        .collect();
    let out = build(&mut g, &ids);
    let loss = projected(&mut g, out, seed);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(*id)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; base[k].len()]);
        let mut numeric = vec![0.0; base[k].len()];
        for i in 0..base[k].len() {
            let mut plus = base.clone();
            plus[k][i] += h;
            let mut minus = base.clone();
            minus[k][i] -= h;
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> (usize, usize, Vec<f64>) {
    (
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect(),
    )
}

/// Sum over every length-`T` path of `C` classes whose collapse equals
/// `labels` of the path probability, by exhaustive enumeration.
pub fn ctc_brute_force(probs: &[f64], classes: usize, labels: &[usize], blank: usize) -> f64 {
    let frames = probs.len() / classes;
    let mut total = 0.0;
    let count = classes.pow(frames as u32);
    for code in 0..count {
        let mut c = code;
        let mut path = Vec::with_capacity(frames);
        for _ in 0..frames {
            path.push(c % classes);
            c /= classes;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != blank {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == labels {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| probs[t * classes + k])
                .product::<f64>();
        }
    }
    total
}

/// Recursive memoized Levenshtein distance.
pub fn edit_distance_oracle<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if i == 0 {
            j
        } else if j == 0 {
            i
        } else {
            let sub = go(a, b, i - 1, j - 1, memo) + usize::from(a[i - 1] != b[j - 1]);
            let del = go(a, b, i - 1, j, memo) + 1;
            let ins = go(a, b, i, j - 1, memo) + 1;
            sub.min(del).min(ins)
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, a.len(), b.len(), &mut memo)
}

/// Minimum DTW cost over every monotone path, by exhaustive recursion.
pub fn dtw_brute_force(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn dist(x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
    }
    fn walk(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + dist(&a[i], &b[j]);
        if i == a.len() - 1 && j == b.len() - 1 {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

//! Classical classifiers over pooled source trials, for comparison runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::signal::DomainDataset;

const LDA_RIDGE: f64 = 1e-6;
const LINEAR_RIDGE: f64 = 1e-2;
const LINEAR_ITERS: usize = 300;

/// Baseline selector; `Linear` is a ridge-regularized one-vs-rest linear
/// classifier standing in for a linear-kernel SVM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Knn(usize),
    Lda,
    Linear,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Knn(_) => "knn",
            BaselineKind::Lda => "lda",
            BaselineKind::Linear => "linear",
        }
    }
}

struct Pooled {
    x: Vec<f64>,
    y: Vec<usize>,
    n: usize,
    d: usize,
    class_count: usize,
}

fn pool(train: &[DomainDataset]) -> Result<Pooled> {
    if train.is_empty() {
        return Err(Error::config("baseline needs at least one training domain"));
    }
    let d = train[0].n_channels() * train[0].n_timesteps();
    let class_count = train[0].class_count;
    let n: usize = train.iter().map(DomainDataset::n_samples).sum();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for ds in train {
        if ds.n_channels() * ds.n_timesteps() != d || ds.class_count != class_count {
            return Err(Error::contract(format!(
                "domain {} disagrees with the first training domain on shape or classes",
                ds.domain_id
            )));
        }
        for i in 0..ds.n_samples() {
            x.extend_from_slice(ds.flat_row(i));
            y.push(ds.y[i]);
        }
    }
    Ok(Pooled { x, y, n, d, class_count })
}

fn check_test(test: &DomainDataset, d: usize, class_count: usize) -> Result<()> {
    if test.n_channels() * test.n_timesteps() != d {
        return Err(Error::contract(format!(
            "test rows have {} values, training rows have {d}",
            test.n_channels() * test.n_timesteps()
        )));
    }
    if test.class_count != class_count {
        return Err(Error::contract(format!(
            "test set has {} classes, training pool has {class_count}",
            test.class_count
        )));
    }
    Ok(())
}

/// Ties on vote counts resolve to the smallest label.
fn argmax_smallest_tie(scores: &[f64]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

/// Majority vote over the k nearest training rows by Euclidean distance.
pub fn knn_predict(
    train: &[DomainDataset],
    test: &DomainDataset,
    k: usize,
) -> Result<Vec<usize>> {
    let pooled = pool(train)?;
    check_test(test, pooled.d, pooled.class_count)?;
    if k == 0 || k > pooled.n {
        return Err(Error::config(format!(
            "k must lie in 1..={}, got {k}",
            pooled.n
        )));
    }
    let mut out = Vec::with_capacity(test.n_samples());
    for i in 0..test.n_samples() {
        let row = test.flat_row(i);
        let mut dists: Vec<(f64, usize)> = (0..pooled.n)
            .map(|j| {
                let base = j * pooled.d;
                let mut acc = 0.0;
                for (a, b) in row.iter().zip(&pooled.x[base..base + pooled.d]) {
                    let diff = a - b;
                    acc += diff * diff;
                }
                (acc, j)
            })
            .collect();
        // Distance ties break on training index, keeping votes deterministic.
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let mut votes = vec![0.0; pooled.class_count];
        for &(_, j) in &dists[..k] {
            votes[pooled.y[j]] += 1.0;
        }
        out.push(argmax_smallest_tie(&votes));
    }
    Ok(out)
}

/// Shared-covariance Gaussian discriminant with a ridge on the pooled
/// covariance. Classes absent from the pool are never predicted.
pub fn lda_predict(train: &[DomainDataset], test: &DomainDataset) -> Result<Vec<usize>> {
    let pooled = pool(train)?;
    check_test(test, pooled.d, pooled.class_count)?;
    let (n, d, k) = (pooled.n, pooled.d, pooled.class_count);

    let mut counts = vec![0usize; k];
    let mut means = vec![vec![0.0; d]; k];
    for (i, &label) in pooled.y.iter().enumerate() {
        counts[label] += 1;
        for (m, v) in means[label].iter_mut().zip(&pooled.x[i * d..(i + 1) * d]) {
            *m += v;
        }
    }
    for (c, mean) in means.iter_mut().enumerate() {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
        }
    }

    let present = counts.iter().filter(|&&c| c > 0).count();
    if n <= present {
        return Err(Error::config(format!(
            "pooled covariance needs more samples ({n}) than classes present ({present})"
        )));
    }
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for (i, &label) in pooled.y.iter().enumerate() {
        for (j, v) in pooled.x[i * d..(i + 1) * d].iter().enumerate() {
            centered[j] = v - means[label][j];
        }
        for r in 0..d {
            let cr = centered[r];
            if cr == 0.0 {
                continue;
            }
            for s in 0..d {
                cov[r * d + s] += cr * centered[s];
            }
        }
    }
    let scale = 1.0 / (n - present) as f64;
    cov.iter_mut().for_each(|v| *v *= scale);
    for r in 0..d {
        cov[r * d + r] += LDA_RIDGE;
    }

    // Discriminant c: x . w_c - 0.5 mu_c . w_c + ln prior_c, w_c = cov^-1 mu_c.
    let mut weights = vec![Vec::new(); k];
    let mut offsets = vec![f64::NEG_INFINITY; k];
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let w = linalg::solve(&cov, &means[c], d)?;
        let dot: f64 = means[c].iter().zip(&w).map(|(m, wv)| m * wv).sum();
        offsets[c] = -0.5 * dot + (counts[c] as f64 / n as f64).ln();
        weights[c] = w;
    }

    let mut out = Vec::with_capacity(test.n_samples());
    for i in 0..test.n_samples() {
        let row = test.flat_row(i);
        let scores: Vec<f64> = (0..k)
            .map(|c| {
                if counts[c] == 0 {
                    return f64::NEG_INFINITY;
                }
                let dot: f64 = row.iter().zip(&weights[c]).map(|(a, b)| a * b).sum();
                dot + offsets[c]
            })
            .collect();
        out.push(argmax_smallest_tie(&scores));
    }
    Ok(out)
}

/// One-vs-rest ridge-regularized linear classifier fit by gradient descent
/// with a step size bounded by the curvature of the quadratic objective.
pub fn linear_predict(
    train: &[DomainDataset],
    test: &DomainDataset,
    seed: u64,
) -> Result<Vec<usize>> {
    let pooled = pool(train)?;
    check_test(test, pooled.d, pooled.class_count)?;
    let (n, d, k) = (pooled.n, pooled.d, pooled.class_count);

    let max_sq_norm = (0..n)
        .map(|i| pooled.x[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    // Lipschitz bound of the gradient: 2 max ||x||^2 + 2 lambda + bias term.
    let lr = 1.0 / (2.0 * max_sq_norm + 2.0 * LINEAR_RIDGE + 2.0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let mut w = vec![vec![0.0; d]; k];
    let mut b = vec![0.0; k];
    for wc in w.iter_mut() {
        for v in wc.iter_mut() {
            *v = normal.sample(&mut rng);
        }
    }

    let mut scores = vec![0.0; n];
    for c in 0..k {
        for _ in 0..LINEAR_ITERS {
            for (i, s) in scores.iter_mut().enumerate() {
                let dot: f64 = pooled.x[i * d..(i + 1) * d]
                    .iter()
                    .zip(&w[c])
                    .map(|(a, bv)| a * bv)
                    .sum();
                *s = dot + b[c];
            }
            let mut grad_w = vec![0.0; d];
            let mut grad_b = 0.0;
            for i in 0..n {
                let y = if pooled.y[i] == c { 1.0 } else { -1.0 };
                let err = 2.0 * (scores[i] - y) / n as f64;
                grad_b += err;
                for (g, v) in grad_w.iter_mut().zip(&pooled.x[i * d..(i + 1) * d]) {
                    *g += err * v;
                }
            }
            for (wv, g) in w[c].iter_mut().zip(&grad_w) {
                *wv -= lr * (g + 2.0 * LINEAR_RIDGE * *wv);
            }
            b[c] -= lr * grad_b;
        }
    }

    let mut out = Vec::with_capacity(test.n_samples());
    for i in 0..test.n_samples() {
        let row = test.flat_row(i);
        let class_scores: Vec<f64> = (0..k)
            .map(|c| {
                let dot: f64 = row.iter().zip(&w[c]).map(|(a, bv)| a * bv).sum();
                dot + b[c]
            })
            .collect();
        out.push(argmax_smallest_tie(&class_scores));
    }
    Ok(out)
}

/// Fits the chosen baseline on the pooled sources and labels the test set.
/// Only the linear baseline consumes the seed.
pub fn baseline_fit_predict(
    kind: BaselineKind,
    train: &[DomainDataset],
    test: &DomainDataset,
    seed: u64,
) -> Result<Vec<usize>> {
    match kind {
        BaselineKind::Knn(k) => knn_predict(train, test, k),
        BaselineKind::Lda => lda_predict(train, test),
        BaselineKind::Linear => linear_predict(train, test, seed),
    }
}

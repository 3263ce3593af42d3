//! Training losses: marginal alignment (kernel MMD of each domain against the
//! pooled mixture), conditional alignment (class geometry within and across
//! domains), and stabilized cross-entropy heads.
//!
//! Distances are sqrt(pairwise_sq_dist); the sqrt gradient is guarded by
//! eps = 1e-12 so coincident points stay finite while forward values remain
//! exact.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Gradient guard inside sqrt backward; forward distances are unmodified.
pub const DIST_EPS: f64 = 1e-12;

thread_local! {
    static MMD_CALLS: Cell<u64> = const { Cell::new(0) };
    static CENTER_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// (mmd_to_mean calls, class_centers calls) on this thread since the last reset.
pub fn invariance_call_counts() -> (u64, u64) {
    (MMD_CALLS.with(Cell::get), CENTER_CALLS.with(Cell::get))
}

pub fn reset_invariance_call_counts() {
    MMD_CALLS.with(|c| c.set(0));
    CENTER_CALLS.with(|c| c.set(0));
}

/// Kernel for the marginal discrepancy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec {
    /// Gaussian kernel exp(-|x-z|^2 / (2 sigma^2)).
    Rbf(Bandwidth),
    /// Dot-product kernel; MMD then reduces to the squared mean gap, which
    /// makes hand-computable test values.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median of pairwise Euclidean distances over the pooled set, recomputed
    /// per call; falls back to 1 when the median is zero.
    Median,
    Fixed(f64),
}

impl KernelSpec {
    /// Replaces a median policy with the concrete bandwidth for `pooled`.
    /// The bandwidth is treated as a constant: no gradient flows through it.
    pub fn resolve(&self, pooled: &Tensor) -> Result<KernelSpec> {
        match self {
            KernelSpec::Linear => Ok(KernelSpec::Linear),
            KernelSpec::Rbf(Bandwidth::Fixed(s)) => {
                if *s <= 0.0 || !s.is_finite() {
                    return Err(Error::config(format!("rbf bandwidth must be positive, got {s}")));
                }
                Ok(KernelSpec::Rbf(Bandwidth::Fixed(*s)))
            }
            KernelSpec::Rbf(Bandwidth::Median) => {
                let sigma = median_pairwise_distance(pooled)?;
                let sigma = if sigma > 0.0 { sigma } else { 1.0 };
                Ok(KernelSpec::Rbf(Bandwidth::Fixed(sigma)))
            }
        }
    }
}

/// Median Euclidean distance over unordered row pairs; 0 when fewer than one
/// pair exists. Even pair counts average the two middle values.
pub fn median_pairwise_distance(x: &Tensor) -> Result<f64> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::dim(format!("median distance needs [n,d], got {:?}", s)));
    }
    let (n, d) = (s[0], s[1]);
    if n < 2 {
        return Ok(0.0);
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for k in 0..d {
                let diff = x.data()[i * d + k] - x.data()[j * d + k];
                acc += diff * diff;
            }
            let dist = acc.sqrt();
            if !dist.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite pairwise distance between rows {i} and {j}"
                )));
            }
            dists.push(dist);
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let m = dists.len();
    Ok(if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    })
}

fn mean_kernel(tape: &mut Tape, a: TensorId, b: TensorId, kernel: &KernelSpec) -> Result<TensorId> {
    match kernel {
        KernelSpec::Linear => {
            let bt = tape.transpose(b)?;
            let k = tape.matmul(a, bt)?;
            tape.mean_all(k)
        }
        KernelSpec::Rbf(Bandwidth::Fixed(sigma)) => {
            let d = tape.pairwise_sq_dist(a, b)?;
            let scaled = tape.scale(d, -1.0 / (2.0 * sigma * sigma))?;
            let k = tape.exp(scaled)?;
            tape.mean_all(k)
        }
        KernelSpec::Rbf(Bandwidth::Median) => unreachable!("resolved before dispatch"),
    }
}

/// Squared RKHS distance between the empirical mean embedding of `features`
/// and that of `pooled`, as the biased estimator
/// mean(K_ff) - 2 mean(K_fp) + mean(K_pp).
pub fn mmd_to_mean(
    tape: &mut Tape,
    features: TensorId,
    pooled: TensorId,
    kernel: &KernelSpec,
) -> Result<TensorId> {
    let (sf, sp) = (tape.shape(features).to_vec(), tape.shape(pooled).to_vec());
    if sf.len() != 2 || sp.len() != 2 || sf[1] != sp[1] {
        return Err(Error::dim(format!(
            "mmd_to_mean needs [m,d] and [M,d], got {:?} and {:?}",
            sf, sp
        )));
    }
    if sf[0] == 0 || sp[0] == 0 {
        return Err(Error::contract("mmd_to_mean on empty feature set"));
    }
    MMD_CALLS.with(|c| c.set(c.get() + 1));
    let kernel = kernel.resolve(tape.value(pooled))?;
    let t_ff = mean_kernel(tape, features, features, &kernel)?;
    let t_fp = mean_kernel(tape, features, pooled, &kernel)?;
    let t_pp = mean_kernel(tape, pooled, pooled, &kernel)?;
    let cross = tape.scale(t_fp, -2.0)?;
    let partial = tape.add(t_ff, cross)?;
    tape.add(partial, t_pp)
}

/// Average MMD of every domain's features against the pooled concatenation.
pub fn margin_invariant_loss(
    tape: &mut Tape,
    features: &[TensorId],
    kernel: &KernelSpec,
) -> Result<TensorId> {
    if features.len() < 2 {
        return Err(Error::config(format!(
            "marginal alignment needs at least 2 domains, got {}",
            features.len()
        )));
    }
    let pooled = tape.concat(features, 0)?;
    // Resolve the bandwidth once so every per-domain term uses the same kernel.
    let kernel = kernel.resolve(tape.value(pooled))?;
    let mut acc: Option<TensorId> = None;
    for &f in features {
        let term = mmd_to_mean(tape, f, pooled, &kernel)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    tape.scale(acc.expect("at least two terms"), 1.0 / features.len() as f64)
}

fn masked_mean_distance(
    tape: &mut Tape,
    features: TensorId,
    mask: Tensor,
    scale: f64,
) -> Result<TensorId> {
    let d = tape.pairwise_sq_dist(features, features)?;
    let dist = tape.sqrt_guarded(d, DIST_EPS)?;
    let m = tape.constant(mask);
    let masked = tape.mul(dist, m)?;
    let s = tape.sum_all(masked)?;
    tape.scale(s, scale)
}

fn check_features_labels(tape: &Tape, features: TensorId, labels: &[usize]) -> Result<usize> {
    let s = tape.shape(features);
    if s.len() != 2 {
        return Err(Error::dim(format!("features must be [n,d], got {:?}", s)));
    }
    if s[0] != labels.len() {
        return Err(Error::dim(format!(
            "{} feature rows vs {} labels",
            s[0],
            labels.len()
        )));
    }
    if s[0] == 0 {
        return Err(Error::contract("empty feature set"));
    }
    Ok(s[0])
}

/// Mean distance over ordered same-class pairs, 1/n * sum_{i,j} d(x_i, x_j)
/// [y_i = y_j]. Self-pairs contribute exactly zero and are skipped.
pub fn intra_class_compactness(
    tape: &mut Tape,
    features: TensorId,
    labels: &[usize],
) -> Result<TensorId> {
    let n = check_features_labels(tape, features, labels)?;
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && labels[i] == labels[j] {
                mask[i * n + j] = 1.0;
            }
        }
    }
    masked_mean_distance(tape, features, Tensor::new(vec![n, n], mask)?, 1.0 / n as f64)
}

/// Mean distance over ordered different-class pairs, 1/n * sum_{i,j}
/// d(x_i, x_j) [y_i != y_j].
pub fn inter_class_separation(
    tape: &mut Tape,
    features: TensorId,
    labels: &[usize],
) -> Result<TensorId> {
    let n = check_features_labels(tape, features, labels)?;
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if labels[i] != labels[j] {
                mask[i * n + j] = 1.0;
            }
        }
    }
    masked_mean_distance(tape, features, Tensor::new(vec![n, n], mask)?, 1.0 / n as f64)
}

/// Per-class feature means. Row c of the result is the mean of class-c rows;
/// absent classes yield a zero row and `present[c] = false`.
pub fn class_centers(
    tape: &mut Tape,
    features: TensorId,
    labels: &[usize],
    class_count: usize,
) -> Result<(TensorId, Vec<bool>)> {
    let n = check_features_labels(tape, features, labels)?;
    if class_count == 0 {
        return Err(Error::config("class_count must be positive"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(Error::ingestion(format!(
            "label {} out of range for {} classes",
            bad, class_count
        )));
    }
    CENTER_CALLS.with(|c| c.set(c.get() + 1));
    let mut counts = vec![0usize; class_count];
    for &l in labels {
        counts[l] += 1;
    }
    // Selection matrix S[c][i] = 1/count_c for rows of class c; centers = S x.
    let mut sel = vec![0.0; class_count * n];
    for (i, &l) in labels.iter().enumerate() {
        sel[l * n + i] = 1.0 / counts[l] as f64;
    }
    let s = tape.constant(Tensor::new(vec![class_count, n], sel)?);
    let centers = tape.matmul(s, features)?;
    Ok((centers, counts.iter().map(|&c| c > 0).collect()))
}

/// Mean distance between same-class centers of two domains, averaged over
/// classes present in both. Returns a constant zero (with a warning) when no
/// class is shared.
pub fn cross_domain_center_distance(
    tape: &mut Tape,
    centers_a: TensorId,
    present_a: &[bool],
    centers_b: TensorId,
    present_b: &[bool],
) -> Result<TensorId> {
    let (sa, sb) = (tape.shape(centers_a).to_vec(), tape.shape(centers_b).to_vec());
    if sa != sb || sa.len() != 2 {
        return Err(Error::dim(format!(
            "center matrices must share shape [C,d], got {:?} and {:?}",
            sa, sb
        )));
    }
    let c = sa[0];
    if present_a.len() != c || present_b.len() != c {
        return Err(Error::dim(format!(
            "presence masks must have length {}, got {} and {}",
            c,
            present_a.len(),
            present_b.len()
        )));
    }
    let common: Vec<usize> = (0..c).filter(|&i| present_a[i] && present_b[i]).collect();
    if common.is_empty() {
        log::warn!("no class present in both domains; center distance treated as 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let diff = tape.sub(centers_a, centers_b)?;
    let sq = tape.square(diff)?;
    let row_sq = tape.sum_axis(sq, 1)?;
    let dist = tape.sqrt_guarded(row_sq, DIST_EPS)?;
    let mut mask = vec![0.0; c];
    for &i in &common {
        mask[i] = 1.0 / common.len() as f64;
    }
    let m = tape.constant(Tensor::new(vec![c], mask)?);
    let masked = tape.mul(dist, m)?;
    tape.sum_all(masked)
}

/// Scalar values backing one conditional-alignment evaluation, for logging.
#[derive(Debug, Clone, Default)]
pub struct ConditionDetail {
    pub delta_c: Vec<f64>,
    pub delta_s: Vec<f64>,
    /// (domain a, domain b, mean same-class center distance), a < b.
    pub center_gaps: Vec<(usize, usize, f64)>,
}

/// Conditional alignment across domains:
/// sum_n [ delta_c(n) - alpha * delta_s(n) + 1/2 sum_{n' != n} D(n', n) ].
/// D is symmetric, so each unordered pair contributes its distance once.
/// The separation term makes the sum unbounded below; `floor`, when set,
/// clamps the result (gradients vanish below the floor).
pub fn condition_invariant_loss(
    tape: &mut Tape,
    features: &[TensorId],
    labels: &[&[usize]],
    alpha: f64,
    class_count: usize,
    floor: Option<f64>,
) -> Result<(TensorId, ConditionDetail)> {
    if features.len() < 2 {
        return Err(Error::config(format!(
            "conditional alignment needs at least 2 domains, got {}",
            features.len()
        )));
    }
    if features.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} feature sets vs {} label sets",
            features.len(),
            labels.len()
        )));
    }
    let n_domains = features.len();
    let mut detail = ConditionDetail {
        delta_c: Vec::with_capacity(n_domains),
        delta_s: Vec::with_capacity(n_domains),
        center_gaps: Vec::new(),
    };
    let mut acc: Option<TensorId> = None;
    let add_term = |tape: &mut Tape, acc: &mut Option<TensorId>, id: TensorId| -> Result<()> {
        *acc = Some(match *acc {
            None => id,
            Some(a) => tape.add(a, id)?,
        });
        Ok(())
    };
    let mut centers = Vec::with_capacity(n_domains);
    for n in 0..n_domains {
        let dc = intra_class_compactness(tape, features[n], labels[n])?;
        let ds = inter_class_separation(tape, features[n], labels[n])?;
        detail.delta_c.push(tape.scalar_value(dc)?);
        detail.delta_s.push(tape.scalar_value(ds)?);
        add_term(tape, &mut acc, dc)?;
        let neg = tape.scale(ds, -alpha)?;
        add_term(tape, &mut acc, neg)?;
        centers.push(class_centers(tape, features[n], labels[n], class_count)?);
    }
    for a in 0..n_domains {
        for b in (a + 1)..n_domains {
            let (ca, pa) = &centers[a];
            let (cb, pb) = &centers[b];
            let gap = cross_domain_center_distance(tape, *ca, pa, *cb, pb)?;
            detail.center_gaps.push((a, b, tape.scalar_value(gap)?));
            add_term(tape, &mut acc, gap)?;
        }
    }
    let mut loss = acc.expect("at least two domains");
    if let Some(f) = floor {
        loss = tape.clamp_min(loss, f)?;
    }
    Ok((loss, detail))
}

/// Mean cross-entropy of logits against integer labels, stabilized through
/// log-softmax max subtraction.
pub fn classification_loss(tape: &mut Tape, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 {
        return Err(Error::dim(format!("logits must be [n, classes], got {:?}", s)));
    }
    let (n, c) = (s[0], s[1]);
    if n != labels.len() {
        return Err(Error::dim(format!("{} logit rows vs {} labels", n, labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::ingestion(format!("label {} out of range for {} classes", bad, c)));
    }
    let ls = tape.log_softmax(logits, 1)?;
    let mut onehot = vec![0.0; n * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = 1.0;
    }
    let oh = tape.constant(Tensor::new(vec![n, c], onehot)?);
    let picked = tape.mul(ls, oh)?;
    let per_row = tape.sum_axis(picked, 1)?;
    let mean = tape.mean_all(per_row)?;
    tape.scale(mean, -1.0)
}

/// Cross-entropy of the domain head against domain indices; identical math to
/// [`classification_loss`], kept separate so call sites read clearly.
pub fn domain_classification_loss(
    tape: &mut Tape,
    domain_logits: TensorId,
    domain_labels: &[usize],
) -> Result<TensorId> {
    classification_loss(tape, domain_logits, domain_labels)
}

/// Loss terms of one training step. `total` always equals
/// l_clc + beta1*l_mir + beta2*l_cir + beta_d*l_dom up to rounding; disabled
/// terms are stored as zero.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_clc: f64,
    pub l_mir: f64,
    pub l_cir: f64,
    pub l_dom: f64,
    pub total: f64,
    /// Marginal discrepancy diagnostic; None when the marginal term was not
    /// evaluated this step.
    pub avg_mmd: Option<f64>,
    pub delta_c: Vec<f64>,
    pub delta_s: Vec<f64>,
    pub center_gaps: Vec<(usize, usize, f64)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Explicit O(m*M) double-sum MMD, independent of the tape ops.
    fn mmd_oracle(a: &[Vec<f64>], b: &[Vec<f64>], kernel: &KernelSpec) -> f64 {
        let k = |x: &[f64], z: &[f64]| -> f64 {
            match kernel {
                KernelSpec::Linear => x.iter().zip(z).map(|(p, q)| p * q).sum(),
                KernelSpec::Rbf(Bandwidth::Fixed(s)) => {
                    let d2: f64 = x.iter().zip(z).map(|(p, q)| (p - q) * (p - q)).sum();
                    (-d2 / (2.0 * s * s)).exp()
                }
                KernelSpec::Rbf(Bandwidth::Median) => unreachable!(),
            }
        };
        let mut t1 = 0.0;
        for x in a {
            for z in a {
                t1 += k(x, z);
            }
        }
        t1 /= (a.len() * a.len()) as f64;
        let mut t2 = 0.0;
        for x in a {
            for z in b {
                t2 += k(x, z);
            }
        }
        t2 /= (a.len() * b.len()) as f64;
        let mut t3 = 0.0;
        for x in b {
            for z in b {
                t3 += k(x, z);
            }
        }
        t3 /= (b.len() * b.len()) as f64;
        t1 - 2.0 * t2 + t3
    }

    fn rows(shape_rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..shape_rows)
            .map(|_| (0..d).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
            .collect()
    }

    fn flat(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), d], data).unwrap()
    }

    #[test]
    fn linear_mmd_of_singleton_against_two_point_pool_is_one() {
        let mut tape = Tape::new();
        let f = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let p = tape.constant(t(&[2, 2], &[0.0, 0.0, 2.0, 0.0]));
        let m = mmd_to_mean(&mut tape, f, p, &KernelSpec::Linear).unwrap();
        assert!((tape.scalar_value(m).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mmd_matches_double_sum_oracle_for_both_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..5 {
            let m = 1 + rng.gen_range(0..12);
            let mm = 1 + rng.gen_range(0..12);
            let d = 1 + rng.gen_range(0..5);
            let a = rows(m, d, &mut rng);
            let b = rows(mm, d, &mut rng);
            for kernel in [KernelSpec::Linear, KernelSpec::Rbf(Bandwidth::Median)] {
                let mut tape = Tape::new();
                let fa = tape.constant(flat(&a));
                let fb = tape.constant(flat(&b));
                let got = mmd_to_mean(&mut tape, fa, fb, &kernel).unwrap();
                let resolved = kernel.resolve(tape.value(fb)).unwrap();
                let want = mmd_oracle(&a, &b, &resolved);
                let err = (tape.scalar_value(got).unwrap() - want).abs();
                assert!(err < 1e-10, "trial {trial} kernel {kernel:?} err {err}");
            }
        }
    }

    #[test]
    fn mmd_of_set_against_itself_is_zero_and_never_meaningfully_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let a = rows(6, 3, &mut rng);
            let mut tape = Tape::new();
            let fa = tape.constant(flat(&a));
            let m = mmd_to_mean(&mut tape, fa, fa, &KernelSpec::Rbf(Bandwidth::Median)).unwrap();
            let v = tape.scalar_value(m).unwrap();
            assert!(v.abs() < 1e-12, "self MMD {v}");

            let b = rows(5, 3, &mut rng);
            let mut tape = Tape::new();
            let fa = tape.constant(flat(&a));
            let fb = tape.constant(flat(&b));
            let m = mmd_to_mean(&mut tape, fa, fb, &KernelSpec::Rbf(Bandwidth::Median)).unwrap();
            assert!(tape.scalar_value(m).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn margin_loss_of_two_singleton_domains_with_linear_kernel_is_one() {
        let mut tape = Tape::new();
        let f1 = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let f2 = tape.constant(t(&[1, 2], &[2.0, 0.0]));
        let l = margin_invariant_loss(&mut tape, &[f1, f2], &KernelSpec::Linear).unwrap();
        assert!((tape.scalar_value(l).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn margin_loss_rejects_single_domain() {
        let mut tape = Tape::new();
        let f1 = tape.constant(t(&[2, 2], &[0.0; 4]));
        let err = margin_invariant_loss(&mut tape, &[f1], &KernelSpec::Linear).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn identical_domains_give_zero_margin_loss() {
        let mut tape = Tape::new();
        let f1 = tape.constant(t(&[2, 2], &[0.5, -1.0, 2.0, 0.25]));
        let f2 = tape.constant(t(&[2, 2], &[0.5, -1.0, 2.0, 0.25]));
        let l = margin_invariant_loss(&mut tape, &[f1, f2], &KernelSpec::Rbf(Bandwidth::Median))
            .unwrap();
        assert!(tape.scalar_value(l).unwrap().abs() < 1e-12);
    }

    #[test]
    fn intra_class_distance_of_two_points_is_exactly_five() {
        let mut tape = Tape::new();
        let f = tape.constant(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0]));
        let dc = intra_class_compactness(&mut tape, f, &[1, 1]).unwrap();
        assert_eq!(tape.scalar_value(dc).unwrap(), 5.0);
        let ds = inter_class_separation(&mut tape, f, &[1, 1]).unwrap();
        assert_eq!(tape.scalar_value(ds).unwrap(), 0.0);
    }

    #[test]
    fn identical_samples_give_exactly_zero_compactness_and_separation() {
        let mut tape = Tape::new();
        let f = tape.constant(t(&[3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]));
        let dc = intra_class_compactness(&mut tape, f, &[0, 0, 0]).unwrap();
        assert_eq!(tape.scalar_value(dc).unwrap(), 0.0);
        let ds = inter_class_separation(&mut tape, f, &[0, 0, 0]).unwrap();
        assert_eq!(tape.scalar_value(ds).unwrap(), 0.0);
    }

    #[test]
    fn class_centers_average_rows_and_flag_missing_classes() {
        let mut tape = Tape::new();
        let f = tape.constant(t(&[3, 2], &[0.0, 0.0, 2.0, 2.0, 4.0, 0.0]));
        let (centers, present) = class_centers(&mut tape, f, &[0, 0, 2], 4).unwrap();
        let v = tape.value(centers).data();
        assert_eq!(&v[0..2], &[1.0, 1.0]);
        assert_eq!(&v[2..4], &[0.0, 0.0]);
        assert_eq!(&v[4..6], &[4.0, 0.0]);
        assert_eq!(present, vec![true, false, true, false]);
    }

    #[test]
    fn center_distance_averages_over_common_classes_only() {
        let mut tape = Tape::new();
        let c1 = tape.constant(t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]));
        let c2 = tape.constant(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
        let d = cross_domain_center_distance(&mut tape, c1, &[true, true], c2, &[true, true])
            .unwrap();
        assert_eq!(tape.scalar_value(d).unwrap(), 2.5);

        // Only class 0 shared: average over one class.
        let d = cross_domain_center_distance(&mut tape, c1, &[true, false], c2, &[true, true])
            .unwrap();
        assert_eq!(tape.scalar_value(d).unwrap(), 5.0);

        // Nothing shared: zero.
        let d = cross_domain_center_distance(&mut tape, c1, &[true, false], c2, &[false, true])
            .unwrap();
        assert_eq!(tape.scalar_value(d).unwrap(), 0.0);
    }

    #[test]
    fn condition_loss_toy_value_is_exactly_ten() {
        // Two domains, each two same-class points (0,0) and (3,4):
        // delta_c = 5 per domain, delta_s = 0, identical centers so the
        // cross-domain term is 0.
        let mut tape = Tape::new();
        let f1 = tape.constant(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0]));
        let f2 = tape.constant(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0]));
        let (l, detail) =
            condition_invariant_loss(&mut tape, &[f1, f2], &[&[0, 0], &[0, 0]], 0.1, 1, None).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 10.0);
        assert_eq!(detail.delta_c, vec![5.0, 5.0]);
        assert_eq!(detail.delta_s, vec![0.0, 0.0]);
        assert_eq!(detail.center_gaps, vec![(0, 1, 0.0)]);
    }

    #[test]
    fn condition_loss_floor_clamps_value_and_kills_gradient() {
        let base = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let labels: &[usize] = &[0, 0, 1, 1];
        let run = |alpha: f64, floor: Option<f64>| {
            let mut tape = Tape::new();
            let f1 = tape.leaf(t(&[4, 2], &base));
            let f2 = tape.leaf(t(&[4, 2], &base));
            let (l, _) =
                condition_invariant_loss(&mut tape, &[f1, f2], &[labels, labels], alpha, 2, floor)
                    .unwrap();
            let v = tape.scalar_value(l).unwrap();
            tape.backward(l).unwrap();
            (v, tape.grad(f1).unwrap().to_vec())
        };
        // Large alpha drives the sum negative; the floor holds it and the
        // clamped region passes no gradient.
        let (unclamped, g_live) = run(100.0, None);
        assert!(unclamped < -1.0);
        assert!(g_live.iter().any(|v| *v != 0.0));
        let (clamped, g_dead) = run(100.0, Some(-1.0));
        assert_eq!(clamped, -1.0);
        assert!(g_dead.iter().all(|v| *v == 0.0));
        // A floor below the value leaves the loss untouched.
        let (free, _) = run(0.1, Some(-1e9));
        let (reference, _) = run(0.1, None);
        assert_eq!(free, reference);
    }

    #[test]
    fn condition_loss_decreases_when_same_class_centers_contract() {
        // Domain 2 is domain 1 shifted; translating it toward domain 1 keeps
        // every intra-domain distance fixed and shrinks only the center gap.
        let base = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let labels: &[usize] = &[0, 0, 1, 1];
        let loss_at = |shift: f64| {
            let mut tape = Tape::new();
            let f1 = tape.constant(t(&[4, 2], &base));
            let shifted: Vec<f64> = base
                .iter()
                .enumerate()
                .map(|(i, v)| if i % 2 == 0 { v + shift } else { *v })
                .collect();
            let f2 = tape.constant(t(&[4, 2], &shifted));
            let (l, _) =
                condition_invariant_loss(&mut tape, &[f1, f2], &[labels, labels], 0.1, 2, None).unwrap();
            tape.scalar_value(l).unwrap()
        };
        assert!(loss_at(1.0) < loss_at(2.0));
        assert!(loss_at(0.25) < loss_at(1.0));
    }

    #[test]
    fn condition_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let f1: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let f2: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let labels: &[usize] = &[0, 1, 0, 1];
            let eval = |v1: &[f64], v2: &[f64]| {
                let mut tape = Tape::new();
                let a = tape.leaf(t(&[4, 2], v1));
                let b = tape.leaf(t(&[4, 2], v2));
                let (l, _) =
                    condition_invariant_loss(&mut tape, &[a, b], &[labels, labels], 0.1, 2, None)
                        .unwrap();
                (tape, a, b, l)
            };
            let (mut tape, a, _, l) = eval(&f1, &f2);
            tape.backward(l).unwrap();
            let ga = tape.grad(a).unwrap().to_vec();
            let na = crate::tensor::test_support::numerical_grad(
                |v| {
                    let (tape, _, _, l) = eval(v, &f2);
                    tape.scalar_value(l).unwrap()
                },
                &f1,
                1e-5,
            );
            let err = crate::tensor::test_support::max_rel_err(&ga, &na);
            assert!(err < 1e-4, "gradient err {err}");
        }
    }

    #[test]
    fn margin_loss_gradient_matches_finite_differences_for_both_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for kernel in [KernelSpec::Linear, KernelSpec::Rbf(Bandwidth::Fixed(1.3))] {
            let f1: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let f2: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let eval = |v1: &[f64], v2: &[f64]| {
                let mut tape = Tape::new();
                let a = tape.leaf(t(&[3, 2], v1));
                let b = tape.leaf(t(&[3, 2], v2));
                let l = margin_invariant_loss(&mut tape, &[a, b], &kernel).unwrap();
                (tape, a, b, l)
            };
            let (mut tape, a, b, l) = eval(&f1, &f2);
            tape.backward(l).unwrap();
            let ga = tape.grad(a).unwrap().to_vec();
            let gb = tape.grad(b).unwrap().to_vec();
            let na = crate::tensor::test_support::numerical_grad(
                |v| {
                    let (tape, _, _, l) = eval(v, &f2);
                    tape.scalar_value(l).unwrap()
                },
                &f1,
                1e-5,
            );
            let nb = crate::tensor::test_support::numerical_grad(
                |v| {
                    let (tape, _, _, l) = eval(&f1, v);
                    tape.scalar_value(l).unwrap()
                },
                &f2,
                1e-5,
            );
            assert!(crate::tensor::test_support::max_rel_err(&ga, &na) < 1e-4);
            assert!(crate::tensor::test_support::max_rel_err(&gb, &nb) < 1e-4);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_class_count() {
        let mut tape = Tape::new();
        let logits = tape.constant(t(&[2, 4], &[0.0; 8]));
        let l = classification_loss(&mut tape, logits, &[0, 3]).unwrap();
        assert!((tape.scalar_value(l).unwrap() - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x0: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let labels: &[usize] = &[2, 0, 1];
        let eval = |v: &[f64]| {
            let mut tape = Tape::new();
            let logits = tape.leaf(t(&[3, 4], v));
            let l = classification_loss(&mut tape, logits, labels).unwrap();
            (tape, logits, l)
        };
        let (mut tape, logits, l) = eval(&x0);
        tape.backward(l).unwrap();
        let g = tape.grad(logits).unwrap().to_vec();
        let n = crate::tensor::test_support::numerical_grad(
            |v| {
                let (tape, _, l) = eval(v);
                tape.scalar_value(l).unwrap()
            },
            &x0,
            1e-5,
        );
        assert!(crate::tensor::test_support::max_rel_err(&g, &n) < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_labels() {
        let mut tape = Tape::new();
        let logits = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let err = classification_loss(&mut tape, logits, &[2]).unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)));
    }

    #[test]
    fn call_counters_track_invariance_paths() {
        reset_invariance_call_counts();
        let (m0, c0) = invariance_call_counts();
        assert_eq!((m0, c0), (0, 0));
        let mut tape = Tape::new();
        let f1 = tape.constant(t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]));
        let f2 = tape.constant(t(&[2, 2], &[0.5, 0.0, 1.0, 0.5]));
        margin_invariant_loss(&mut tape, &[f1, f2], &KernelSpec::Linear).unwrap();
        condition_invariant_loss(&mut tape, &[f1, f2], &[&[0, 1], &[0, 1]], 0.1, 2, None).unwrap();
        let (m1, c1) = invariance_call_counts();
        assert_eq!(m1, 2, "one mmd call per domain");
        assert_eq!(c1, 2, "one center call per domain");
        reset_invariance_call_counts();
        assert_eq!(invariance_call_counts(), (0, 0));
    }
}

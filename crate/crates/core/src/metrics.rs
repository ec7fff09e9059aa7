//! Expert-selection and predictive metrics: Jaccard statistics over expert
//! supports, the random-gate baseline, binary-convergence tracking, and
//! MSE / accuracy helpers.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Jaccard index `|A n B| / |A u B|`. Two empty sets are considered
/// maximally similar (index 1); this cannot occur for simplex-valued gates.
pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

/// Mean Jaccard over within-group task pairs and over cross-group pairs.
/// With a single group there are no cross-group pairs and the second value
/// is absent.
pub fn group_jaccard(
    supports: &[BTreeSet<usize>],
    group_assignment: &[usize],
) -> (f64, Option<f64>) {
    assert_eq!(supports.len(), group_assignment.len());
    assert!(supports.len() >= 2, "group_jaccard needs at least two tasks");
    let mut related = (0.0, 0usize);
    let mut unrelated = (0.0, 0usize);
    for i in 0..supports.len() {
        for j in (i + 1)..supports.len() {
            let v = jaccard(&supports[i], &supports[j]);
            if group_assignment[i] == group_assignment[j] {
                related.0 += v;
                related.1 += 1;
            } else {
                unrelated.0 += v;
                unrelated.1 += 1;
            }
        }
    }
    let related_avg = if related.1 > 0 { related.0 / related.1 as f64 } else { 1.0 };
    let unrelated_avg = if unrelated.1 > 0 { Some(unrelated.0 / unrelated.1 as f64) } else { None };
    (related_avg, unrelated_avg)
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut out: u128 = 1;
    for i in 0..k {
        out = out * (n - i) as u128 / (i + 1) as u128;
    }
    out
}

/// Closed-form expected Jaccard index of two independent uniform k-subsets
/// of n items, via the hypergeometric distribution of their overlap.
pub fn random_gate_expected_jaccard_analytic(n: usize, k: usize) -> f64 {
    assert!(k >= 1 && k <= n);
    let total = binomial(n, k) as f64;
    let mut e = 0.0;
    let j_min = k.saturating_sub(n - k);
    for j in j_min..=k {
        let p = (binomial(k, j) as f64) * (binomial(n - k, k - j) as f64) / total;
        if j > 0 {
            e += p * j as f64 / (2 * k - j) as f64;
        }
    }
    e
}

/// Fixed-seed Monte Carlo estimate of the same expectation; the second route
/// of the dual-method cross-check.
pub fn random_gate_expected_jaccard_mc(n: usize, k: usize, num_samples: usize, seed: u64) -> f64 {
    assert!(k >= 1 && k <= n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..n).collect();
    let draw = |rng: &mut ChaCha8Rng, pool: &mut Vec<usize>| -> BTreeSet<usize> {
        for i in 0..k {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        pool[..k].iter().copied().collect()
    };
    let mut acc = 0.0;
    for _ in 0..num_samples {
        let a = draw(&mut rng, &mut pool);
        let b = draw(&mut rng, &mut pool);
        acc += jaccard(&a, &b);
    }
    acc / num_samples as f64
}

/// Exhaustive expected Jaccard by enumerating all pairs of k-subsets.
/// Only feasible for small n; used as a third, brute-force route in tests.
pub fn random_gate_expected_jaccard_exhaustive(n: usize, k: usize) -> f64 {
    assert!(n <= 20, "exhaustive enumeration is exponential in n");
    let subsets: Vec<BTreeSet<usize>> = (0u32..1 << n)
        .filter(|s| s.count_ones() as usize == k)
        .map(|s| (0..n).filter(|i| s >> i & 1 == 1).collect())
        .collect();
    let mut acc = 0.0;
    for a in &subsets {
        for b in &subsets {
            acc += jaccard(a, b);
        }
    }
    acc / (subsets.len() * subsets.len()) as f64
}

/// Exact support of a gate output: indices with strictly positive weight.
pub fn support_exact(weights: &[f64]) -> BTreeSet<usize> {
    weights.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(i, _)| i).collect()
}

/// Mean support size over a collection of per-example gate outputs.
pub fn avg_support_size<'a>(weight_rows: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let mut total = 0usize;
    let mut count = 0usize;
    for row in weight_rows {
        total += support_exact(row).len();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total as f64 / count as f64
    }
}

/// True when every entry is exactly 0.0 or 1.0.
pub fn is_binary_matrix(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

/// First snapshot step at which `S(Z)` is binary and remains binary for the
/// rest of the trajectory; `None` if that never happens.
pub fn binary_convergence_step(snapshots: &[(u64, Tensor)]) -> Option<u64> {
    let mut candidate: Option<u64> = None;
    for (step, s) in snapshots {
        if is_binary_matrix(s) {
            if candidate.is_none() {
                candidate = Some(*step);
            }
        } else {
            candidate = None;
        }
    }
    candidate
}

/// Mean squared error.
pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len());
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Classification accuracy of probabilities against 0/1 labels, thresholding
/// at one half.
pub fn accuracy(probs: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    if probs.is_empty() {
        return 0.0;
    }
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p > 0.5) == (y > 0.5))
        .count();
    correct as f64 / probs.len() as f64
}

/// Mean binary cross-entropy of probabilities against 0/1 labels.
pub fn binary_cross_entropy(probs: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    let eps = 1e-12;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / probs.len() as f64
}

/// Weighted aggregate of per-task losses. Two tasks use `w` and `1 - w`;
/// more tasks are weighted uniformly.
pub fn task_weighted_aggregate(task_losses: &[f64], task_weight: f64) -> f64 {
    match task_losses.len() {
        0 => 0.0,
        1 => task_losses[0],
        2 => task_weight * task_losses[0] + (1.0 - task_weight) * task_losses[1],
        t => task_losses.iter().sum::<f64>() / t as f64,
    }
}

/// Summary of expert-selection behavior over the tasks of one run.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub supports: Vec<BTreeSet<usize>>,
    pub avg_related_jaccard: f64,
    pub avg_unrelated_jaccard: Option<f64>,
    pub avg_selected_experts: f64,
    pub binary_convergence_step: Option<u64>,
}

impl SelectionReport {
    pub fn from_supports(
        supports: Vec<BTreeSet<usize>>,
        group_assignment: &[usize],
        binary_step: Option<u64>,
    ) -> Self {
        let avg_selected =
            supports.iter().map(|s| s.len()).sum::<usize>() as f64 / supports.len() as f64;
        let (related, unrelated) = if supports.len() >= 2 {
            group_jaccard(&supports, group_assignment)
        } else {
            (1.0, None)
        };
        SelectionReport {
            supports,
            avg_related_jaccard: related,
            avg_unrelated_jaccard: unrelated,
            avg_selected_experts: avg_selected,
            binary_convergence_step: binary_step,
        }
    }
}

//! Independent oracles used by the test suites: central finite differences,
//! two-pass moments, exhaustive scans, and the Kolmogorov-Smirnov statistic.
//!
//! Nothing here touches the backward pass or the partial-sort retrieval
//! path; the point is that each oracle reaches the same answer by a
//! different route. Compiled only for tests (`testkit` feature).

use alloc::string::String;
use alloc::vec::Vec;

use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Central finite-difference gradient of a scalar function of the params.
/// Returns per-parameter gradient tensors in deterministic name order.
pub fn fd_param_grads(
    params: &ParamSet,
    h: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let names: Vec<String> = params.iter().map(|(n, _)| String::from(n)).collect();
    for name in names {
        let shape = params.get(&name).value.shape();
        let mut grad = Tensor::zeros(shape.0, shape.1);
        for idx in 0..grad.numel() {
            let mut plus = params.clone();
            plus.get_mut(&name).value.data_mut()[idx] += h;
            let mut minus = params.clone();
            minus.get_mut(&name).value.data_mut()[idx] -= h;
            grad.data_mut()[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push((name, grad));
    }
    out
}

/// Central finite-difference gradient w.r.t. a raw input tensor.
pub fn fd_input_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    for idx in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[idx] += h;
        let mut minus = x.clone();
        minus.data_mut()[idx] -= h;
        grad.data_mut()[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    grad
}

/// Relative agreement with an absolute floor of 1.0, per the gradient
/// tolerance convention used throughout the suite.
pub fn rel_close(analytic: f64, reference: f64, tol: f64) -> bool {
    let scale = 1.0_f64.max(analytic.abs()).max(reference.abs());
    (analytic - reference).abs() <= tol * scale
}

/// Worst relative disagreement between two gradient sets.
pub fn max_rel_err(analytic: &[(String, Tensor)], reference: &[(String, Tensor)]) -> f64 {
    let mut worst = 0.0_f64;
    for ((na, a), (nb, b)) in analytic.iter().zip(reference.iter()) {
        assert_eq!(na, nb, "gradient name order mismatch");
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            let scale = 1.0_f64.max(x.abs()).max(y.abs());
            worst = worst.max((x - y).abs() / scale);
        }
    }
    worst
}

/// Two-pass mean and population variance over K rows of equal width.
pub fn two_pass_stats(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let k = rows.len();
    let width = rows[0].len();
    let mut mean = alloc::vec![0.0; width];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    let mut var = alloc::vec![0.0; width];
    for r in rows {
        for j in 0..width {
            let d = r[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= k as f64);
    (mean, var)
}

/// Exhaustive nearest-neighbour scan: squared Frobenius distance to every
/// candidate, full sort by (distance, id), self-exclusion, then top-k.
pub fn exhaustive_top_k(
    query_key: &Tensor,
    entries: &[(u64, Tensor)],
    k: usize,
    exclude_id: u64,
) -> Vec<(u64, f64)> {
    let mut scored: Vec<(u64, f64)> = entries
        .iter()
        .filter(|(id, _)| *id != exclude_id)
        .map(|(id, key)| (*id, key.sq_distance(query_key)))
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Kolmogorov-Smirnov statistic of samples against a reference CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n);
        d = d.max((i + 1) as f64 / n - f);
    }
    d
}

/// Exact per-sequence best-sample selection by brute force: returns the
/// index minimizing the mean squared error over the whole horizon.
pub fn brute_force_best_sample(preds: &[Tensor], truth: &Tensor) -> usize {
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (i, p) in preds.iter().enumerate() {
        let err = p.sq_distance(truth);
        if err < best_err {
            best_err = err;
            best = i;
        }
    }
    best
}

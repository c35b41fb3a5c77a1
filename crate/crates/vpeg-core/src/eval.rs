//! Evaluation metrics and experiment protocols: per-step errors with
//! best-of-sample selection, sampling-efficiency curves, spread matching,
//! and template-based mode coverage.

use alloc::vec::Vec;

use crate::baselines::{sample_baseline_rollouts, BaselineKind, BaselineNets};
use crate::disentangle::{FeatureExtractor, MotionFeatureSeq};
use crate::dynamics::{ActionParams, Dataset, DatasetSpec, GeneratorKind, Split};
use crate::error::{Error, Result};
use crate::predictor::{example_stats, sample_rollouts, NoiseMode, VpegNets};
use crate::retrieval::{retrieve, ExampleSet, FeatureIndex};
use crate::rng::{below, mix, stream, Domain};
use crate::tensor::Tensor;

/// Order-independent sum: halves are reduced pairwise, so a parallel
/// aggregation over any split of the data reproduces the serial result.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

fn pairwise_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        pairwise_sum(xs) / xs.len() as f64
    }
}

/// Mean squared error of one step: mean over coordinates.
fn step_mse(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Whole-sequence error: mean over steps of the per-step MSE.
pub fn sequence_mse(pred: &Tensor, truth: &Tensor) -> f64 {
    let h = pred.rows();
    if h == 0 {
        return 0.0;
    }
    (0..h)
        .map(|t| step_mse(pred.row(t), truth.row(t)))
        .sum::<f64>()
        / h as f64
}

/// A PSNR-style view of an MSE value for familiar magnitudes.
pub fn psnr_analog(mse: f64) -> f64 {
    -10.0 * libm::log10(mse.max(1e-300))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    /// Pick the sample with the lowest whole-sequence error, then report
    /// that sample's per-step errors (sequence-level selection).
    BestOf,
    /// Mean error over samples at each step.
    Mean,
}

/// Per-step errors across H prediction steps under the chosen reduction.
pub fn per_step_error(preds: &[Tensor], truth: &Tensor, reduce: Reduce) -> Result<Vec<f64>> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let h = truth.rows();
    for p in preds {
        if p.shape() != truth.shape() {
            return Err(Error::ShapeMismatch {
                op: "per_step_error",
                left: p.shape(),
                right: truth.shape(),
            });
        }
    }
    match reduce {
        Reduce::BestOf => {
            let mut best = 0usize;
            let mut best_err = f64::INFINITY;
            for (i, p) in preds.iter().enumerate() {
                let e = sequence_mse(p, truth);
                if e < best_err {
                    best_err = e;
                    best = i;
                }
            }
            Ok((0..h)
                .map(|t| step_mse(preds[best].row(t), truth.row(t)))
                .collect())
        }
        Reduce::Mean => Ok((0..h)
            .map(|t| {
                let errs: Vec<f64> = preds.iter().map(|p| step_mse(p.row(t), truth.row(t))).collect();
                pairwise_mean(&errs)
            })
            .collect()),
    }
}

/// Relative spread mismatch between predictions and examples, averaged over
/// steps: ||V(preds_t) - V(examples_t)|| / (||V(examples_t)|| + 1e-8).
pub fn variance_match(preds: &[Tensor], examples: &ExampleSet) -> Result<f64> {
    if preds.len() < 2 {
        return Err(Error::TooFewExamples { got: preds.len() });
    }
    let h = preds[0].rows();
    if h == 0 {
        return Ok(0.0);
    }
    let c = preds[0].cols();
    let offset = examples.features[0].rows() - h;
    let mut scores = Vec::with_capacity(h);
    for t in 0..h {
        let rows: Vec<&[f64]> = preds.iter().map(|p| p.row(t)).collect();
        let (_, pred_var) = example_stats(&rows)?;
        let (_, ex_var) = example_stats(&examples.frames_at(offset + t))?;
        let mut dist = 0.0;
        let mut norm = 0.0;
        for k in 0..c {
            let d = pred_var[k] - ex_var[k];
            dist += d * d;
            norm += ex_var[k] * ex_var[k];
        }
        scores.push(libm::sqrt(dist) / (libm::sqrt(norm) + 1e-8));
    }
    Ok(pairwise_mean(&scores))
}

// ── Mode templates ───────────────────────────────────────────────────

/// Nearest-template classification for action-mode trajectories. Each mode
/// is a linear family (center, amplitude along its axis, oscillation
/// coefficients); classifying a trajectory means a least-squares fit per
/// mode and picking the smallest residual, with the amplitude constrained
/// to be non-negative so opposite directions stay distinct.
#[derive(Debug, Clone)]
pub struct ModeClassifier {
    m_context: usize,
    horizon: usize,
    d_obs: usize,
    num_modes: u32,
}

impl ModeClassifier {
    pub fn from_spec(spec: &DatasetSpec) -> Result<ModeClassifier> {
        if spec.kind != GeneratorKind::ActionModes {
            return Err(Error::InvalidSpec(alloc::string::String::from(
                "mode templates exist only for action_modes data",
            )));
        }
        if spec.num_modes < 2 {
            return Err(Error::InvalidSpec(alloc::string::String::from(
                "need at least two modes",
            )));
        }
        Ok(ModeClassifier {
            m_context: spec.m_context,
            horizon: spec.horizon,
            d_obs: spec.d_obs,
            num_modes: spec.num_modes,
        })
    }

    pub fn num_modes(&self) -> u32 {
        self.num_modes
    }

    /// Residual sum of squares of the best template fit for one mode.
    pub fn residual(&self, traj: &Tensor, mode: u32) -> Result<f64> {
        if mode >= self.num_modes {
            return Err(Error::UnknownMode { mode });
        }
        let t_len = self.m_context + self.horizon;
        if traj.rows() != t_len || traj.cols() < self.d_obs {
            return Err(Error::ShapeMismatch {
                op: "mode_residual",
                left: traj.shape(),
                right: (t_len, self.d_obs),
            });
        }
        let dir = crate::dynamics::mode_direction(mode, self.d_obs);
        let mut rss = 0.0;
        for k in 0..self.d_obs {
            let y: Vec<f64> = (0..t_len).map(|t| traj.at(t, k)).collect();
            // regressors: intercept, sin, cos-1, and (on the mode's axis) the ramp
            let mut cols: Vec<Vec<f64>> = Vec::new();
            cols.push(alloc::vec![1.0; t_len]);
            let sc: Vec<(f64, f64)> = (0..t_len)
                .map(|t| {
                    let s = if t_len > 1 {
                        t as f64 / (t_len - 1) as f64
                    } else {
                        0.0
                    };
                    (
                        libm::sin(core::f64::consts::TAU * s),
                        libm::cos(core::f64::consts::TAU * s) - 1.0,
                    )
                })
                .collect();
            cols.push(sc.iter().map(|x| x.0).collect());
            cols.push(sc.iter().map(|x| x.1).collect());
            let on_axis = dir[k] != 0.0;
            if on_axis {
                cols.push(
                    (0..t_len)
                        .map(|t| dir[k] * crate::dynamics::mode_ramp(t, self.m_context, self.horizon))
                        .collect(),
                );
            }
            let mut fit = least_squares(&cols, &y);
            if on_axis && fit.coefs[3] < 0.0 {
                // amplitude hits its non-negativity bound: refit without the ramp
                cols.pop();
                fit = least_squares(&cols, &y);
            }
            rss += fit.rss;
        }
        Ok(rss)
    }

    /// Nearest template by residual; ties resolve to the smaller mode id.
    pub fn classify(&self, traj: &Tensor) -> Result<u32> {
        let mut best = 0u32;
        let mut best_rss = f64::INFINITY;
        for mode in 0..self.num_modes {
            let rss = self.residual(traj, mode)?;
            if rss < best_rss {
                best_rss = rss;
                best = mode;
            }
        }
        Ok(best)
    }
}

struct Fit {
    coefs: Vec<f64>,
    rss: f64,
}

/// Ordinary least squares via normal equations; the systems here are at
/// most 4x4 so Gaussian elimination with partial pivoting is plenty.
fn least_squares(cols: &[Vec<f64>], y: &[f64]) -> Fit {
    let p = cols.len();
    let n = y.len();
    let mut ata = alloc::vec![0.0; p * p];
    let mut aty = alloc::vec![0.0; p];
    for i in 0..p {
        for j in 0..p {
            ata[i * p + j] = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
        }
        aty[i] = cols[i].iter().zip(y).map(|(a, b)| a * b).sum();
    }
    let coefs = solve_dense(&mut ata, &mut aty, p);
    let mut rss = 0.0;
    for t in 0..n {
        let mut fit = 0.0;
        for j in 0..p {
            fit += coefs[j] * cols[j][t];
        }
        let r = y[t] - fit;
        rss += r * r;
    }
    Fit { coefs, rss }
}

fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Vec<f64> {
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if pivot != col {
            for c in 0..n {
                a.swap(col * n + c, pivot * n + c);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        if diag.abs() < 1e-12 {
            continue; // singular direction; coefficient stays zero
        }
        for r in col + 1..n {
            let f = a[r * n + col] / diag;
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = alloc::vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in col + 1..n {
            acc -= a[col * n + c] * x[c];
        }
        let diag = a[col * n + col];
        x[col] = if diag.abs() < 1e-12 { 0.0 } else { acc / diag };
    }
    x
}

// ── Samplers ─────────────────────────────────────────────────────────

/// Anything that can draw N rollouts for a prepared evaluation case.
pub trait RolloutSampler {
    fn sample(
        &self,
        context: &MotionFeatureSeq,
        examples: &ExampleSet,
        n: usize,
        horizon: usize,
        seed: u64,
    ) -> Result<Vec<Tensor>>;

    /// Fingerprint of capacity/budget/seed for fair-comparison assertions.
    fn fairness_fingerprint(&self) -> u64;
}

pub struct VpegSampler<'a> {
    pub nets: &'a VpegNets,
    pub noise_mode: NoiseMode,
    pub fingerprint: u64,
}

impl RolloutSampler for VpegSampler<'_> {
    fn sample(
        &self,
        context: &MotionFeatureSeq,
        examples: &ExampleSet,
        n: usize,
        horizon: usize,
        seed: u64,
    ) -> Result<Vec<Tensor>> {
        sample_rollouts(self.nets, context, examples, n, horizon, self.noise_mode, seed)
    }

    fn fairness_fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

pub struct BaselineSampler<'a> {
    pub nets: &'a BaselineNets,
    pub fingerprint: u64,
}

impl RolloutSampler for BaselineSampler<'_> {
    fn sample(
        &self,
        context: &MotionFeatureSeq,
        examples: &ExampleSet,
        n: usize,
        horizon: usize,
        seed: u64,
    ) -> Result<Vec<Tensor>> {
        let ex = match self.nets.kind {
            BaselineKind::FixedPrior => None,
            BaselineKind::ExampleKl => Some(examples),
        };
        sample_baseline_rollouts(self.nets, context, ex, n, horizon, seed)
    }

    fn fairness_fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

// ── Protocols ────────────────────────────────────────────────────────

/// One prepared test case: context features, ground-truth horizon, and the
/// retrieved guidance examples.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub id: u64,
    pub mode_label: u32,
    pub context: MotionFeatureSeq,
    pub truth: Tensor,
    pub full_feats: MotionFeatureSeq,
    pub examples: ExampleSet,
}

/// Assemble cases for one split, retrieving K examples per query from the
/// given index (self-exclusion applies when the query is in the pool).
pub fn prepare_cases(
    dataset: &Dataset,
    index: &FeatureIndex,
    extractor: &FeatureExtractor,
    k: usize,
    split: Split,
) -> Result<Vec<EvalCase>> {
    let m = dataset.spec.m_context;
    let t_len = dataset.spec.seq_len();
    let mut cases = Vec::new();
    for seq in dataset.sequences.iter().filter(|s| s.split == split) {
        let feats = extractor.extract(seq);
        let context = feats.window(0, m);
        let examples = retrieve(&context, index, k, seq.id)?;
        let truth = feats.feats.slice_rows(m, t_len);
        cases.push(EvalCase {
            id: seq.id,
            mode_label: seq.mode_label,
            context,
            truth,
            full_feats: feats,
            examples,
        });
    }
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(cases)
}

#[derive(Debug, Clone)]
pub struct EvalProtocol {
    /// Canonical best-of budget for per-step errors.
    pub samples: usize,
    pub p_list: Vec<usize>,
    /// Subset resamplings per case for the best-of-P curve.
    pub trials: usize,
    /// Sample count for mode coverage (the training-time N).
    pub coverage_samples: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            samples: 20,
            p_list: alloc::vec![1, 5, 20],
            trials: 8,
            coverage_samples: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Best-of-`samples` per-step MSE, sequence-level selection.
    pub per_step_best: Vec<f64>,
    /// Mean-over-samples per-step MSE.
    pub per_step_mean: Vec<f64>,
    /// (P, mean best-of-P whole-sequence error), non-increasing in P.
    pub best_of_curve: Vec<(usize, f64)>,
    pub variance_match: f64,
    pub mode_coverage: Option<f64>,
    pub mode_consistency: Option<f64>,
    pub n_cases: usize,
    pub seed: u64,
}

impl EvalReport {
    /// Whole-sequence best-of error at the canonical budget.
    pub fn best_of_sequence_error(&self) -> f64 {
        pairwise_mean(&self.per_step_best)
    }
}

/// Best-of-P curve over one shared pool per case. Each trial permutes the
/// pool once and reads prefix minima, so the curve is exactly non-increasing
/// in P within every trial, and therefore in the mean.
pub fn best_of_p_curve(
    sampler: &dyn RolloutSampler,
    cases: &[EvalCase],
    p_list: &[usize],
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let pool_size = *p_list.iter().max().expect("non-empty p_list");
    let mut sums = alloc::vec![0.0; p_list.len()];
    let mut count = 0usize;
    for case in cases {
        let preds = sampler.sample(
            &case.context,
            &case.examples,
            pool_size,
            horizon,
            mix(&[seed, case.id]),
        )?;
        let errs: Vec<f64> = preds.iter().map(|p| sequence_mse(p, &case.truth)).collect();
        for trial in 0..trials {
            let mut order: Vec<usize> = (0..pool_size).collect();
            let mut rng = stream(seed, Domain::EvalSubsets, mix(&[case.id, trial as u64]) >> 16);
            for i in (1..order.len()).rev() {
                let j = below(&mut rng, i + 1);
                order.swap(i, j);
            }
            let mut running = f64::INFINITY;
            let mut cursor = 0usize;
            let mut sorted_ps: Vec<(usize, usize)> =
                p_list.iter().copied().enumerate().map(|(i, p)| (p, i)).collect();
            sorted_ps.sort_unstable();
            for (p, slot) in sorted_ps {
                while cursor < p {
                    running = running.min(errs[order[cursor]]);
                    cursor += 1;
                }
                sums[slot] += running;
            }
            count += 1;
        }
    }
    Ok(p_list
        .iter()
        .zip(&sums)
        .map(|(&p, &s)| (p, s / count as f64))
        .collect())
}

/// Coverage: a case counts as covered when its samples collectively hit
/// every reachable mode. With shared-context templates every mode in the
/// dataset is reachable from every context.
pub fn mode_coverage(
    samples_per_case: &[(u32, Vec<Tensor>)],
    classifier: &ModeClassifier,
    reachable: &[u32],
    context_feats: &[&MotionFeatureSeq],
) -> Result<f64> {
    for &mode in reachable {
        if mode >= classifier.num_modes() {
            return Err(Error::UnknownMode { mode });
        }
    }
    let mut covered = 0usize;
    for ((_, preds), ctx) in samples_per_case.iter().zip(context_feats) {
        let mut hit = alloc::vec![false; classifier.num_modes() as usize];
        for p in preds {
            let traj = Tensor::vstack(&[&ctx.feats, p])?;
            let mode = classifier.classify(&traj)?;
            hit[mode as usize] = true;
        }
        if reachable.iter().all(|&m| hit[m as usize]) {
            covered += 1;
        }
    }
    Ok(covered as f64 / samples_per_case.len() as f64)
}

/// Consistency: mean fraction of samples classified as the case's own mode.
pub fn mode_consistency(
    samples_per_case: &[(u32, Vec<Tensor>)],
    classifier: &ModeClassifier,
    context_feats: &[&MotionFeatureSeq],
) -> Result<f64> {
    let mut fractions = Vec::with_capacity(samples_per_case.len());
    for ((true_mode, preds), ctx) in samples_per_case.iter().zip(context_feats) {
        let mut hits = 0usize;
        for p in preds {
            let traj = Tensor::vstack(&[&ctx.feats, p])?;
            if classifier.classify(&traj)? == *true_mode {
                hits += 1;
            }
        }
        fractions.push(hits as f64 / preds.len() as f64);
    }
    Ok(pairwise_mean(&fractions))
}

/// Full evaluation of one sampler over prepared cases.
pub fn evaluate(
    sampler: &dyn RolloutSampler,
    cases: &[EvalCase],
    horizon: usize,
    protocol: &EvalProtocol,
    classifier: Option<&ModeClassifier>,
) -> Result<EvalReport> {
    let mut best_acc = alloc::vec![Vec::new(); horizon];
    let mut mean_acc = alloc::vec![Vec::new(); horizon];
    let mut var_scores = Vec::with_capacity(cases.len());
    let mut coverage_samples = Vec::with_capacity(cases.len());

    for case in cases {
        let preds = sampler.sample(
            &case.context,
            &case.examples,
            protocol.samples,
            horizon,
            mix(&[protocol.seed, case.id]),
        )?;
        let best = per_step_error(&preds, &case.truth, Reduce::BestOf)?;
        let mean = per_step_error(&preds, &case.truth, Reduce::Mean)?;
        for t in 0..horizon {
            best_acc[t].push(best[t]);
            mean_acc[t].push(mean[t]);
        }
        var_scores.push(variance_match(&preds, &case.examples)?);
        if classifier.is_some() {
            let cov_preds = sampler.sample(
                &case.context,
                &case.examples,
                protocol.coverage_samples,
                horizon,
                mix(&[protocol.seed, case.id, 0xC0FFEE]),
            )?;
            coverage_samples.push((case.mode_label, cov_preds));
        }
    }

    let (mut coverage, mut consistency) = (None, None);
    if let Some(cls) = classifier {
        let ctxs: Vec<&MotionFeatureSeq> = cases.iter().map(|c| &c.context).collect();
        let reachable: Vec<u32> = (0..cls.num_modes()).collect();
        coverage = Some(mode_coverage(&coverage_samples, cls, &reachable, &ctxs)?);
        consistency = Some(mode_consistency(&coverage_samples, cls, &ctxs)?);
    }

    let curve = best_of_p_curve(
        sampler,
        cases,
        &protocol.p_list,
        protocol.trials,
        horizon,
        protocol.seed,
    )?;

    Ok(EvalReport {
        per_step_best: best_acc.iter().map(|v| pairwise_mean(v)).collect(),
        per_step_mean: mean_acc.iter().map(|v| pairwise_mean(v)).collect(),
        best_of_curve: curve,
        variance_match: pairwise_mean(&var_scores),
        mode_coverage: coverage,
        mode_consistency: consistency,
        n_cases: cases.len(),
        seed: protocol.seed,
    })
}

/// Unseen-class protocol: the model never saw the held-out mode in
/// training; guidance is retrieved from the held-out pool itself.
pub fn unseen_class_eval(
    sampler: &dyn RolloutSampler,
    dataset: &Dataset,
    extractor: &FeatureExtractor,
    k: usize,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    if dataset.spec.held_out_modes.is_empty() {
        return Err(Error::NoHeldOutMode);
    }
    for seq in dataset.train() {
        if dataset.spec.held_out_modes.contains(&seq.mode_label) {
            return Err(Error::HeldOutModeInTrain {
                mode: seq.mode_label,
            });
        }
    }
    let classifier = ModeClassifier::from_spec(&dataset.spec)?;
    // guidance pool: the held-out sequences in the test split
    let pool_index = crate::retrieval::build_index_where(dataset, extractor, true, |s| {
        s.split == Split::Test && dataset.spec.held_out_modes.contains(&s.mode_label)
    })?;

    let m = dataset.spec.m_context;
    let t_len = dataset.spec.seq_len();
    let horizon = dataset.spec.horizon;
    let mut cases = Vec::new();
    for seq in dataset
        .test()
        .filter(|s| dataset.spec.held_out_modes.contains(&s.mode_label))
    {
        let feats = extractor.extract(seq);
        let context = feats.window(0, m);
        let examples = retrieve(&context, &pool_index, k, seq.id)?;
        cases.push(EvalCase {
            id: seq.id,
            mode_label: seq.mode_label,
            context,
            truth: feats.feats.slice_rows(m, t_len),
            full_feats: feats,
            examples,
        });
    }
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    evaluate(sampler, &cases, horizon, protocol, Some(&classifier))
}

/// Canonical per-sequence action params for template sanity tests.
pub fn canonical_action_params(d_obs: usize) -> ActionParams {
    ActionParams::canonical(d_obs)
}

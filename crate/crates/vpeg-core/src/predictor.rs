//! Example-guided stochastic-process prediction.
//!
//! N noise-driven rollouts share one recurrent predictor. Per step, the
//! retrieved examples are summarized into an elementwise mean and variance;
//! a prior net maps that summary to a Gaussian whose reparameterized draws
//! drive the rollouts. Training matches the best rollout to ground truth,
//! matches the rollout spread to the example spread, and keeps each rollout
//! on the data manifold with a hinge-GAN critic over differenced sequences.

use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::disentangle::{FeatureExtractor, MotionFeatureSeq};
use crate::dynamics::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Axis, NodeId, Tape};
use crate::layers::{tile_rows, Dense, GruCell, Mlp};
use crate::params::{bind, harvest, optimizer_step, Bound, OptimKind, ParamSet};
use crate::retrieval::{retrieve, retrieve_random, ExampleSet, FeatureIndex};
use crate::rng::{below, mix, standard_normal, stream, Domain};
use crate::tensor::Tensor;

const PRIOR_HIDDEN: usize = 64;
const PRED_HIDDEN: usize = 128;
const DISC_HIDDEN: usize = 64;

/// Gaussian parameters over the noise space from example statistics.
/// Input is the concatenated (mean, variance) summary of the K examples at
/// one step; output is (mu, log variance) with the variance exponentiated,
/// so it is positive by construction.
#[derive(Debug, Clone)]
pub struct PriorNet {
    pub params: ParamSet,
    mlp: Mlp,
    pub c_f: usize,
    pub h_z: usize,
}

impl PriorNet {
    pub fn new(c_f: usize, h_z: usize, seed: u64) -> PriorNet {
        Self::with_hidden(c_f, h_z, PRIOR_HIDDEN, seed)
    }

    pub fn with_hidden(c_f: usize, h_z: usize, hidden: usize, seed: u64) -> PriorNet {
        let mut params = ParamSet::new();
        let mut rng = stream(seed, Domain::ParamInit, 1);
        let mlp = Mlp::init(
            &mut params,
            "qz",
            &[2 * c_f, hidden, hidden, 2 * h_z],
            &mut rng,
        );
        PriorNet {
            params,
            mlp,
            c_f,
            h_z,
        }
    }
}

/// Recurrent predictor: one gated cell over [feature, noise, example
/// summary] plus a linear readout to the next feature. Baselines reuse it
/// without the example summary at identical capacity.
#[derive(Debug, Clone)]
pub struct PredictorNet {
    pub params: ParamSet,
    gru: GruCell,
    head: Dense,
    pub c_f: usize,
    pub h_z: usize,
    pub with_example_stats: bool,
    hidden: usize,
}

impl PredictorNet {
    pub fn new(c_f: usize, h_z: usize, with_example_stats: bool, seed: u64) -> PredictorNet {
        Self::with_hidden(c_f, h_z, with_example_stats, PRED_HIDDEN, seed)
    }

    /// Reduced-width variant for gradient checks, where central differences
    /// over the full 128-wide cell would dominate the runtime budget.
    pub fn with_hidden(
        c_f: usize,
        h_z: usize,
        with_example_stats: bool,
        hidden: usize,
        seed: u64,
    ) -> PredictorNet {
        let mut params = ParamSet::new();
        let mut rng = stream(seed, Domain::ParamInit, 2);
        let in_dim = c_f + h_z + if with_example_stats { 2 * c_f } else { 0 };
        let gru = GruCell::init(&mut params, "pre/cell", in_dim, hidden, &mut rng);
        let head = Dense::init(&mut params, "pre/head", hidden, c_f, &mut rng);
        PredictorNet {
            params,
            gru,
            head,
            c_f,
            h_z,
            with_example_stats,
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

/// Scalar critic over a flattened, temporally differenced feature sequence.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub params: ParamSet,
    mlp: Mlp,
    pub seq_len: usize,
    pub c_f: usize,
}

impl Discriminator {
    pub fn new(seq_len: usize, c_f: usize, seed: u64) -> Discriminator {
        let mut params = ParamSet::new();
        let mut rng = stream(seed, Domain::ParamInit, 3);
        let in_dim = (seq_len - 1) * c_f;
        let mlp = Mlp::init(
            &mut params,
            "dcm",
            &[in_dim, DISC_HIDDEN, DISC_HIDDEN, 1],
            &mut rng,
        );
        Discriminator {
            params,
            mlp,
            seq_len,
            c_f,
        }
    }
}

/// Parameter bundle trained together.
#[derive(Debug, Clone)]
pub struct VpegNets {
    pub pred: PredictorNet,
    pub prior: PriorNet,
    pub disc: Discriminator,
}

impl VpegNets {
    pub fn new(c_f: usize, h_z: usize, seq_len: usize, seed: u64) -> VpegNets {
        VpegNets {
            pred: PredictorNet::new(c_f, h_z, true, seed),
            prior: PriorNet::new(c_f, h_z, seed),
            disc: Discriminator::new(seq_len, c_f, seed),
        }
    }
}

/// When rollouts draw fresh noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// A fresh draw per sample per prediction step.
    PerStep,
    /// One draw per sample at the first prediction step; the mean afterwards.
    FirstStepOnly,
    /// Never sample; every rollout uses the prior mean (deterministic).
    MeanOnly,
}

impl NoiseMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseMode::PerStep => "per_step",
            NoiseMode::FirstStepOnly => "first_step_only",
            NoiseMode::MeanOnly => "mean_only",
        }
    }

    pub fn parse(s: &str) -> Option<NoiseMode> {
        match s {
            "per_step" => Some(NoiseMode::PerStep),
            "first_step_only" => Some(NoiseMode::FirstStepOnly),
            "mean_only" => Some(NoiseMode::MeanOnly),
            _ => None,
        }
    }
}

/// Whether training guidance comes from nearest-neighbour retrieval or a
/// random pool draw (the ablation that knocks out motion similarity).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guidance {
    Retrieved,
    Random,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub k: usize,
    pub n: usize,
    /// [reconstruction, distribution, discriminator, generator] weights.
    pub lambda: [f64; 4],
    pub lr_pred: f64,
    pub lr_disc: f64,
    pub epochs: usize,
    pub h_z: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub noise_mode: NoiseMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 5,
            n: 5,
            lambda: [1.0, 0.1, 0.01, 0.01],
            lr_pred: 1e-3,
            lr_disc: 1e-3,
            epochs: 30,
            h_z: 4,
            seed: 0,
            batch_size: 16,
            noise_mode: NoiseMode::PerStep,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|&l| l < 0.0) {
            return Err(Error::InvalidConfig(String::from("lambdas must be >= 0")));
        }
        if self.n == 0 {
            return Err(Error::InvalidConfig(String::from("n must be >= 1")));
        }
        if self.lambda[1] > 0.0 && self.n < 2 {
            return Err(Error::InvalidConfig(String::from(
                "spread matching needs n >= 2; one sample has no variance",
            )));
        }
        if self.k < 2 {
            return Err(Error::InvalidConfig(String::from(
                "example statistics need k >= 2",
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig(String::from("batch_size must be >= 1")));
        }
        if self.lr_pred <= 0.0 || self.lr_disc <= 0.0 {
            return Err(Error::InvalidConfig(String::from("learning rates must be > 0")));
        }
        if self.h_z == 0 {
            return Err(Error::InvalidConfig(String::from("h_z must be >= 1")));
        }
        Ok(())
    }

    /// Fingerprint of everything that must match between methods for a fair
    /// comparison: capacity, optimizer budget, and seeds.
    pub fn fairness_fingerprint(&self) -> u64 {
        mix(&[
            self.k as u64,
            self.n as u64,
            self.h_z as u64,
            PRED_HIDDEN as u64,
            self.epochs as u64,
            self.batch_size as u64,
            self.lr_pred.to_bits(),
            self.seed,
        ])
    }
}

/// Elementwise mean and population variance over K aligned feature vectors,
/// single-pass (Welford). The two-pass computation lives in the oracle.
pub fn example_stats(frames: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = frames.len();
    if k < 2 {
        return Err(Error::TooFewExamples { got: k });
    }
    let width = frames[0].len();
    let mut mean = alloc::vec![0.0; width];
    let mut m2 = alloc::vec![0.0; width];
    for (n, f) in frames.iter().enumerate() {
        debug_assert_eq!(f.len(), width);
        for j in 0..width {
            let delta = f[j] - mean[j];
            mean[j] += delta / (n + 1) as f64;
            m2[j] += delta * (f[j] - mean[j]);
        }
    }
    let var: Vec<f64> = m2.into_iter().map(|v| v / k as f64).collect();
    Ok((mean, var))
}

/// Map example statistics to the noise Gaussian. The input node is a leaf
/// constant: predicted states never reach the prior, which `rollout`
/// asserts structurally.
pub fn prior_params(
    prior: &PriorNet,
    tape: &mut Tape,
    bound: &Bound,
    mean: &[f64],
    var: &[f64],
) -> Result<(NodeId, NodeId)> {
    let mut input = mean.to_vec();
    input.extend_from_slice(var);
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { op: "prior_params" });
    }
    let x = tape.constant(Tensor::row_vector(&input));
    assert!(
        tape.is_leaf(x) && !tape.requires_grad(x),
        "prior input must be a constant leaf built from example statistics"
    );
    let out = prior.mlp.forward(tape, bound, x)?;
    let mu = tape.slice(out, Axis::Cols, 0, prior.h_z)?;
    let logvar = tape.slice(out, Axis::Cols, prior.h_z, 2 * prior.h_z)?;
    let sigma2 = tape.exp(logvar);
    Ok((mu, sigma2))
}

/// N reparameterized draws from N(mu, diag sigma2): z_i = mu + sqrt(sigma2)
/// * eps_i with eps from the caller's streams, so gradients reach the prior.
pub fn sample_noise(
    tape: &mut Tape,
    mu: NodeId,
    sigma2: NodeId,
    n: usize,
    rngs: &mut [ChaCha8Rng],
) -> Result<NodeId> {
    debug_assert_eq!(rngs.len(), n);
    let h_z = tape.value(mu).cols();
    if tape.value(sigma2).data().iter().any(|&v| v < 0.0) {
        let bad = tape
            .value(sigma2)
            .data()
            .iter()
            .copied()
            .find(|&v| v < 0.0)
            .unwrap();
        return Err(Error::InvalidVariance { value: bad });
    }
    let mut eps = Tensor::zeros(n, h_z);
    for (i, rng) in rngs.iter_mut().enumerate() {
        for j in 0..h_z {
            eps.set(i, j, standard_normal(rng));
        }
    }
    let eps = tape.constant(eps);
    let std = tape.sqrt(sigma2);
    let std_tiled = tile_rows(tape, std, n)?;
    let mu_tiled = tile_rows(tape, mu, n)?;
    let scaled = tape.mul(std_tiled, eps)?;
    tape.add(mu_tiled, scaled)
}

/// One recurrent step for a batch of samples. Returns (next feature batch,
/// next state batch).
pub fn predict_step(
    pred: &PredictorNet,
    tape: &mut Tape,
    bound: &Bound,
    state: NodeId,
    f_prev: NodeId,
    z: NodeId,
    stats: Option<(&[f64], &[f64])>,
) -> Result<(NodeId, NodeId)> {
    for node in [state, f_prev, z] {
        if !tape.value(node).is_finite() {
            return Err(Error::NonFiniteInput { op: "predict_step" });
        }
    }
    let batch = tape.value(f_prev).rows();
    let mut parts = alloc::vec![f_prev, z];
    if pred.with_example_stats {
        let (mean, var) = stats.expect("example-guided predictor needs stats");
        let mut guide = mean.to_vec();
        guide.extend_from_slice(var);
        let g = tape.constant(Tensor::row_vector(&guide));
        let g = tile_rows(tape, g, batch)?;
        parts.push(g);
    }
    let x = tape.concat(&parts, Axis::Cols)?;
    let next_state = pred.gru.step(tape, bound, x, state)?;
    let f_next = pred.head.forward(tape, bound, next_state)?;
    Ok((f_next, next_state))
}

/// Graph nodes produced by one rollout.
pub struct RolloutNodes {
    /// One [N x C_f] node per prediction step.
    pub steps: Vec<NodeId>,
    /// Per-step example statistics (mean, variance) used for guidance.
    pub stats: Vec<(Vec<f64>, Vec<f64>)>,
    /// How many eps-vectors were drawn in total.
    pub noise_draws: usize,
}

/// Run the context phase teacher-forced, then N parallel prediction steps.
///
/// Per-sample noise streams are keyed by (seed, sample index), so sample i
/// draws the same noise regardless of how many siblings run beside it.
#[allow(clippy::too_many_arguments)]
pub fn rollout_on_tape(
    tape: &mut Tape,
    pred: &PredictorNet,
    prior: &PriorNet,
    pred_bound: &Bound,
    prior_bound: &Bound,
    context: &MotionFeatureSeq,
    examples: &ExampleSet,
    n: usize,
    horizon: usize,
    noise_mode: NoiseMode,
    seed: u64,
) -> Result<RolloutNodes> {
    let m = context.len();
    if m < 1 {
        return Err(Error::TooFewFrames { got: 0, need: 1 });
    }
    if !context.feats.is_finite() {
        return Err(Error::NonFiniteInput { op: "rollout" });
    }
    let need = m + horizon;
    for f in &examples.features {
        if f.rows() < need {
            return Err(Error::HorizonMismatch {
                need,
                got: f.rows(),
            });
        }
    }

    let mut stats_per_step = Vec::with_capacity(need);
    for t in 0..need {
        stats_per_step.push(example_stats(&examples.frames_at(t))?);
    }

    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| stream(seed, Domain::RolloutNoise, i as u64))
        .collect();
    let mut noise_draws = 0usize;

    // Context phase: single row, teacher forced, mean noise.
    let mut state = tape.constant(Tensor::zeros(1, pred.hidden()));
    for t in 0..m.saturating_sub(1) {
        let (mean, var) = &stats_per_step[t];
        let (mu, _sigma2) = prior_params(prior, tape, prior_bound, mean, var)?;
        let f_t = tape.constant(Tensor::row_vector(context.frame(t)));
        let (_, next_state) = predict_step(
            pred,
            tape,
            pred_bound,
            state,
            f_t,
            mu,
            Some((mean.as_slice(), var.as_slice())),
        )?;
        state = next_state;
    }

    // Fan out to N samples.
    let mut state = tile_rows(tape, state, n)?;
    let last_ctx = tape.constant(Tensor::row_vector(context.frame(m - 1)));
    let mut f_cur = tile_rows(tape, last_ctx, n)?;

    let mut steps = Vec::with_capacity(horizon);
    for step in 0..horizon {
        let t = m - 1 + step;
        let (mean, var) = &stats_per_step[t];
        let (mu, sigma2) = prior_params(prior, tape, prior_bound, mean, var)?;
        let z = match noise_mode {
            NoiseMode::PerStep => {
                noise_draws += n;
                sample_noise(tape, mu, sigma2, n, &mut rngs)?
            }
            NoiseMode::FirstStepOnly if step == 0 => {
                noise_draws += n;
                sample_noise(tape, mu, sigma2, n, &mut rngs)?
            }
            _ => tile_rows(tape, mu, n)?,
        };
        let (f_next, next_state) = predict_step(
            pred,
            tape,
            pred_bound,
            state,
            f_cur,
            z,
            Some((mean.as_slice(), var.as_slice())),
        )?;
        steps.push(f_next);
        f_cur = f_next;
        state = next_state;
    }

    Ok(RolloutNodes {
        steps,
        stats: stats_per_step,
        noise_draws,
    })
}

/// Sample N rollouts as plain tensors, one [H x C_f] matrix per sample.
#[allow(clippy::too_many_arguments)]
pub fn sample_rollouts(
    nets: &VpegNets,
    context: &MotionFeatureSeq,
    examples: &ExampleSet,
    n: usize,
    horizon: usize,
    noise_mode: NoiseMode,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let pred_bound = bind(&mut tape, &nets.pred.params, false);
    let prior_bound = bind(&mut tape, &nets.prior.params, false);
    let nodes = rollout_on_tape(
        &mut tape,
        &nets.pred,
        &nets.prior,
        &pred_bound,
        &prior_bound,
        context,
        examples,
        n,
        horizon,
        noise_mode,
        seed,
    )?;
    let mut out = alloc::vec![Tensor::zeros(horizon, nets.pred.c_f); n];
    for (step, node) in nodes.steps.iter().enumerate() {
        let v = tape.value(*node);
        for (i, sample) in out.iter_mut().enumerate() {
            sample.row_mut(step).copy_from_slice(v.row(i));
        }
    }
    Ok(out)
}

/// Best-of-N reconstruction: the squared error of the sample closest to the
/// truth at this step. Ties resolve to the smallest sample index. Returns
/// the loss node and the winning (0-based) index.
pub fn loss_rcn(tape: &mut Tape, preds: NodeId, truth: &[f64]) -> Result<(NodeId, usize)> {
    let v = tape.value(preds);
    let n = v.rows();
    debug_assert!(n >= 1);
    let mut best = 0usize;
    let mut best_err = f64::INFINITY;
    for i in 0..n {
        let err: f64 = v
            .row(i)
            .iter()
            .zip(truth)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if err < best_err {
            best_err = err;
            best = i;
        }
    }
    let row = tape.slice(preds, Axis::Rows, best, best + 1)?;
    let target = tape.constant(Tensor::row_vector(truth));
    let diff = tape.sub(row, target)?;
    Ok((tape.sq_norm(diff), best))
}

/// Spread matching: squared distance between the elementwise population
/// variance of the N predictions and that of the K examples at this step.
pub fn loss_dst(tape: &mut Tape, preds: NodeId, example_frames: &[&[f64]]) -> Result<NodeId> {
    let n = tape.value(preds).rows();
    if n < 2 {
        return Err(Error::InvalidConfig(String::from(
            "spread loss needs at least two samples",
        )));
    }
    let (_, example_var) = example_stats(example_frames)?;
    let pred_var = tape.var_axis(preds, Axis::Rows);
    let target = tape.constant(Tensor::row_vector(&example_var));
    let diff = tape.sub(pred_var, target)?;
    Ok(tape.sq_norm(diff))
}

/// Critic score of a [T x C_f] feature sequence node: first-order temporal
/// difference, flatten, then the perceptron.
pub fn disc_score(
    disc: &Discriminator,
    tape: &mut Tape,
    bound: &Bound,
    seq: NodeId,
) -> Result<NodeId> {
    let (t_len, c_f) = tape.value(seq).shape();
    if t_len != disc.seq_len || c_f != disc.c_f {
        return Err(Error::ShapeMismatch {
            op: "disc_score",
            left: (t_len, c_f),
            right: (disc.seq_len, disc.c_f),
        });
    }
    let tail = tape.slice(seq, Axis::Rows, 1, t_len)?;
    let head = tape.slice(seq, Axis::Rows, 0, t_len - 1)?;
    let diff = tape.sub(tail, head)?;
    let flat = tape.reshape(diff, 1, (t_len - 1) * c_f)?;
    disc.mlp.forward(tape, bound, flat)
}

/// Hinge loss for the critic: 0.5 * [max(0, 1 - D(real)) + max(0, 1 + D(fake))].
pub fn disc_loss(tape: &mut Tape, d_real: NodeId, d_fake: NodeId) -> Result<NodeId> {
    let neg_real = tape.scale(d_real, -1.0);
    let margin_real = tape.add_scalar(neg_real, 1.0);
    let real_term = tape.relu(margin_real);
    let margin_fake = tape.add_scalar(d_fake, 1.0);
    let fake_term = tape.relu(margin_fake);
    let sum = tape.add(real_term, fake_term)?;
    let total = tape.sum(sum);
    Ok(tape.scale(total, 0.5))
}

/// Generator side of the hinge pair: -D(fake).
pub fn gen_loss(tape: &mut Tape, d_fake: NodeId) -> NodeId {
    let total = tape.sum(d_fake);
    tape.scale(total, -1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub rcn: f64,
    pub dst: f64,
    pub disc: f64,
    pub gen: f64,
    pub fin: f64,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub epochs: Vec<EpochLoss>,
    /// First epoch at which the final objective had improved by less than
    /// 1e-4 relative for ten consecutive epochs; reported, never enforced.
    pub plateau_epoch: Option<usize>,
    pub fairness_fingerprint: u64,
}

struct TrainItem {
    feats: MotionFeatureSeq,
    examples: ExampleSet,
}

/// Full training loop: per batch, N-sample rollouts optimize the weighted
/// sum of reconstruction, spread, and generator losses; the critic then
/// takes one update on the same batch. Examples are retrieved once up
/// front, as a separate phase.
pub fn train(
    nets: &mut VpegNets,
    dataset: &Dataset,
    index: &FeatureIndex,
    extractor: &FeatureExtractor,
    cfg: &TrainConfig,
    guidance: Guidance,
) -> Result<TrainLog> {
    cfg.validate()?;
    let m = dataset.spec.m_context;
    let horizon = dataset.spec.horizon;
    let [l_rcn_w, l_dst_w, l_disc_w, l_gen_w] = cfg.lambda;

    // Retrieval phase.
    let mut items = Vec::new();
    for seq in dataset.train() {
        let feats = extractor.extract(seq);
        let query = feats.window(0, m);
        let examples = match guidance {
            Guidance::Retrieved => retrieve(&query, index, cfg.k, seq.id)?,
            Guidance::Random => {
                retrieve_random(&query, index, cfg.k, mix(&[cfg.seed, seq.id]), seq.id)?
            }
        };
        items.push(TrainItem { feats, examples });
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut log = TrainLog {
        epochs: Vec::with_capacity(cfg.epochs),
        plateau_epoch: None,
        fairness_fingerprint: cfg.fairness_fingerprint(),
    };
    let mut flat_count = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut shuffle_rng = stream(cfg.seed, Domain::TrainOrder, epoch as u64);
        for i in (1..order.len()).rev() {
            let j = below(&mut shuffle_rng, i + 1);
            order.swap(i, j);
        }
        let mut pick_rng = stream(cfg.seed, Domain::DiscriminatorPick, epoch as u64);

        let mut sums = [0.0f64; 4]; // rcn, dst, disc, gen
        let mut batches = 0usize;

        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Generator pass.
            let mut tape = Tape::new();
            let pred_bound = bind(&mut tape, &nets.pred.params, true);
            let prior_bound = bind(&mut tape, &nets.prior.params, true);
            let disc_bound = if l_gen_w > 0.0 {
                Some(bind(&mut tape, &nets.disc.params, false))
            } else {
                None
            };

            let mut batch_loss: Option<NodeId> = None;
            let mut batch_rcn = 0.0;
            let mut batch_dst = 0.0;
            let mut batch_gen = 0.0;
            let mut fakes: Vec<Tensor> = Vec::with_capacity(chunk.len());
            let mut reals: Vec<Tensor> = Vec::with_capacity(chunk.len());

            for &idx in chunk {
                let item = &items[idx];
                let context = item.feats.window(0, m);
                let roll_seed = mix(&[cfg.seed, epoch as u64, item.feats.source_id]);
                let nodes = rollout_on_tape(
                    &mut tape,
                    &nets.pred,
                    &nets.prior,
                    &pred_bound,
                    &prior_bound,
                    &context,
                    &item.examples,
                    cfg.n,
                    horizon,
                    cfg.noise_mode,
                    roll_seed,
                )?;

                let mut seq_loss: Option<NodeId> = None;
                for (step, &pred_node) in nodes.steps.iter().enumerate() {
                    let t = m + step;
                    let truth = item.feats.frame(t);
                    let (rcn, _) = loss_rcn(&mut tape, pred_node, truth)?;
                    batch_rcn += tape.value(rcn).item();
                    let mut step_loss = tape.scale(rcn, l_rcn_w);
                    if l_dst_w > 0.0 && cfg.n >= 2 {
                        let dst =
                            loss_dst(&mut tape, pred_node, &item.examples.frames_at(t))?;
                        batch_dst += tape.value(dst).item();
                        let w = tape.scale(dst, l_dst_w);
                        step_loss = tape.add(step_loss, w)?;
                    }
                    seq_loss = Some(match seq_loss {
                        Some(acc) => tape.add(acc, step_loss)?,
                        None => step_loss,
                    });
                }
                let mut seq_total = match seq_loss {
                    Some(node) if horizon > 0 => tape.scale(node, 1.0 / horizon as f64),
                    Some(node) => node,
                    None => tape.constant(Tensor::scalar(0.0)),
                };

                // One fake sequence per visit: context features plus the
                // horizon of one uniformly chosen sample.
                if horizon > 0 && (l_gen_w > 0.0 || l_disc_w > 0.0) {
                    let i_fake = below(&mut pick_rng, cfg.n);
                    let ctx_node = tape.constant(context.feats.clone());
                    let mut rows = alloc::vec![ctx_node];
                    for &pred_node in &nodes.steps {
                        let row = tape.slice(pred_node, Axis::Rows, i_fake, i_fake + 1)?;
                        rows.push(row);
                    }
                    let fake_seq = tape.concat(&rows, Axis::Rows)?;
                    if let Some(db) = &disc_bound {
                        let d_fake = disc_score(&nets.disc, &mut tape, db, fake_seq)?;
                        let lg = gen_loss(&mut tape, d_fake);
                        batch_gen += tape.value(lg).item();
                        let lg = tape.scale(lg, l_gen_w);
                        seq_total = tape.add(seq_total, lg)?;
                    }
                    if l_disc_w > 0.0 {
                        fakes.push(tape.value(fake_seq).clone());
                        reals.push(item.feats.feats.clone());
                    }
                }

                batch_loss = Some(match batch_loss {
                    Some(acc) => tape.add(acc, seq_total)?,
                    None => seq_total,
                });
            }

            let total = batch_loss.expect("non-empty batch");
            let mean = tape.scale(total, 1.0 / chunk.len() as f64);
            if !tape.value(mean).item().is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            tape.backward(mean)?;
            harvest(&tape, &pred_bound, &mut nets.pred.params);
            harvest(&tape, &prior_bound, &mut nets.prior.params);
            optimizer_step(&mut nets.pred.params, cfg.lr_pred, OptimKind::Adam)?;
            optimizer_step(&mut nets.prior.params, cfg.lr_pred, OptimKind::Adam)?;

            // Critic pass: one update per generator update.
            let mut batch_disc = 0.0;
            if l_disc_w > 0.0 && !fakes.is_empty() {
                let mut dtape = Tape::new();
                let db = bind(&mut dtape, &nets.disc.params, true);
                let mut dloss: Option<NodeId> = None;
                for (real, fake) in reals.iter().zip(&fakes) {
                    let rn = dtape.constant(real.clone());
                    let fn_ = dtape.constant(fake.clone());
                    let d_real = disc_score(&nets.disc, &mut dtape, &db, rn)?;
                    let d_fake = disc_score(&nets.disc, &mut dtape, &db, fn_)?;
                    let ld = disc_loss(&mut dtape, d_real, d_fake)?;
                    batch_disc += dtape.value(ld).item();
                    dloss = Some(match dloss {
                        Some(acc) => dtape.add(acc, ld)?,
                        None => ld,
                    });
                }
                let total = dloss.expect("fakes non-empty");
                let mean = dtape.scale(total, l_disc_w / fakes.len() as f64);
                if !dtape.value(mean).item().is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_no,
                    });
                }
                dtape.backward(mean)?;
                harvest(&dtape, &db, &mut nets.disc.params);
                optimizer_step(&mut nets.disc.params, cfg.lr_disc, OptimKind::Adam)?;
            }

            let steps_in_batch = (chunk.len() * horizon.max(1)) as f64;
            sums[0] += batch_rcn / steps_in_batch;
            sums[1] += batch_dst / steps_in_batch;
            sums[2] += batch_disc / chunk.len().max(1) as f64;
            sums[3] += batch_gen / chunk.len() as f64;
            batches += 1;
        }

        let b = batches.max(1) as f64;
        let rcn = sums[0] / b;
        let dst = sums[1] / b;
        let disc = sums[2] / b;
        let gen = sums[3] / b;
        let fin = l_rcn_w * rcn + l_dst_w * dst + l_disc_w * disc + l_gen_w * gen;
        let row = EpochLoss {
            epoch,
            rcn,
            dst,
            disc,
            gen,
            fin,
        };
        if let Some(prev) = log.epochs.last() {
            let denom = prev.fin.abs().max(1e-12);
            if (prev.fin - fin).abs() / denom < 1e-4 {
                flat_count += 1;
                if flat_count >= 10 && log.plateau_epoch.is_none() {
                    log.plateau_epoch = Some(epoch);
                }
            } else {
                flat_count = 0;
            }
        }
        log.epochs.push(row);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::two_pass_stats;

    #[test]
    fn example_stats_basic() {
        let (mean, var) = example_stats(&[&[1.0, 3.0], &[3.0, 5.0]]).unwrap();
        assert_eq!(mean, alloc::vec![2.0, 4.0]);
        assert_eq!(var, alloc::vec![1.0, 1.0]);
    }

    #[test]
    fn example_stats_identical_examples_zero_var() {
        let f = [0.3, -0.7, 1.1];
        let (_, var) = example_stats(&[&f, &f, &f, &f]).unwrap();
        assert!(var.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn example_stats_matches_two_pass_oracle() {
        let mut rng = stream(4, Domain::EvalSubsets, 0);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..5)
                .map(|_| {
                    (0..3)
                        .map(|_| crate::rng::uniform(&mut rng, -2.0, 2.0))
                        .collect()
                })
                .collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let (m1, v1) = example_stats(&refs).unwrap();
            let (m2, v2) = two_pass_stats(&refs);
            for (a, b) in m1.iter().zip(&m2) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in v1.iter().zip(&v2) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn example_stats_needs_two() {
        assert!(matches!(
            example_stats(&[&[1.0][..]]),
            Err(Error::TooFewExamples { got: 1 })
        ));
    }

    #[test]
    fn loss_rcn_picks_best_and_ties_to_smallest() {
        let mut tape = Tape::new();
        let preds = tape.constant(Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 1.0]]));
        let (loss, j) = loss_rcn(&mut tape, preds, &[0.9, 1.2]).unwrap();
        assert_eq!(j, 1);
        assert!((tape.value(loss).item() - 0.05).abs() < 1e-12);

        // exact tie: both rows equidistant
        let mut tape = Tape::new();
        let preds = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[-1.0, 0.0]]));
        let (_, j) = loss_rcn(&mut tape, preds, &[0.0, 0.0]).unwrap();
        assert_eq!(j, 0, "ties resolve to the smallest index");

        // truth equals one sample: zero loss
        let mut tape = Tape::new();
        let preds = tape.constant(Tensor::from_rows(&[&[0.5, 0.5], &[0.25, -0.5]]));
        let (loss, j) = loss_rcn(&mut tape, preds, &[0.25, -0.5]).unwrap();
        assert_eq!(j, 1);
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn loss_dst_zero_iff_vars_match() {
        // N predictions identical to the K examples (N = K): loss 0
        let rows: Vec<Vec<f64>> = alloc::vec![
            alloc::vec![0.1, 0.2],
            alloc::vec![0.5, -0.3],
            alloc::vec![0.0, 0.7],
        ];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let mut tape = Tape::new();
        let preds = tape.constant(Tensor::from_rows(&refs));
        let loss = loss_dst(&mut tape, preds, &refs).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-24);

        // all predictions equal, example variance v: loss = ||v||^2
        let mut tape = Tape::new();
        let preds = tape.constant(Tensor::from_rows(&[&[0.3, 0.3], &[0.3, 0.3]]));
        let ex_rows = [&[1.0, 3.0][..], &[3.0, 5.0][..]];
        let loss = loss_dst(&mut tape, preds, &ex_rows).unwrap();
        // example var = [1, 1] so squared norm is 2
        assert!((tape.value(loss).item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hinge_losses_trivial_cases() {
        let mut tape = Tape::new();
        let d_real = tape.constant(Tensor::scalar(2.0));
        let d_fake = tape.constant(Tensor::scalar(-2.0));
        let ld = disc_loss(&mut tape, d_real, d_fake).unwrap();
        assert_eq!(tape.value(ld).item(), 0.0);

        let d_fake = tape.constant(Tensor::scalar(0.0));
        let lg = gen_loss(&mut tape, d_fake);
        assert_eq!(tape.value(lg).item(), 0.0);
    }

    #[test]
    fn hinge_disc_loss_nonnegative() {
        let mut rng = stream(8, Domain::EvalSubsets, 1);
        for _ in 0..100 {
            let mut tape = Tape::new();
            let r = tape.constant(Tensor::scalar(crate::rng::uniform(&mut rng, -3.0, 3.0)));
            let f = tape.constant(Tensor::scalar(crate::rng::uniform(&mut rng, -3.0, 3.0)));
            let ld = disc_loss(&mut tape, r, f).unwrap();
            assert!(tape.value(ld).item() >= 0.0);
        }
    }

    #[test]
    fn sample_noise_zero_variance_returns_mean() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::row_vector(&[0.5, -1.0]));
        let sigma2 = tape.constant(Tensor::row_vector(&[0.0, 0.0]));
        let mut rngs = alloc::vec![
            stream(0, Domain::RolloutNoise, 0),
            stream(0, Domain::RolloutNoise, 1),
        ];
        let z = sample_noise(&mut tape, mu, sigma2, 2, &mut rngs).unwrap();
        for i in 0..2 {
            assert_eq!(tape.value(z).row(i), &[0.5, -1.0]);
        }
    }

    #[test]
    fn sample_noise_rejects_negative_variance() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::row_vector(&[0.0]));
        let sigma2 = tape.constant(Tensor::row_vector(&[-0.5]));
        let mut rngs = alloc::vec![stream(0, Domain::RolloutNoise, 0)];
        assert!(matches!(
            sample_noise(&mut tape, mu, sigma2, 1, &mut rngs),
            Err(Error::InvalidVariance { .. })
        ));
    }

    #[test]
    fn sample_noise_moments() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::row_vector(&[1.5]));
        let sigma2 = tape.constant(Tensor::row_vector(&[0.25]));
        let n = 100_000;
        let mut rngs: Vec<ChaCha8Rng> = (0..n)
            .map(|i| stream(12, Domain::RolloutNoise, i as u64))
            .collect();
        let z = sample_noise(&mut tape, mu, sigma2, n, &mut rngs).unwrap();
        let vals: Vec<f64> = tape.value(z).data().to_vec();
        let mean: f64 = vals.iter().sum::<f64>() / n as f64;
        let var: f64 = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!((mean - 1.5).abs() < 0.01 * 1.5, "mean {mean}");
        assert!((var - 0.25).abs() < 0.01 * 0.25 + 0.002, "var {var}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.n = 1;
        assert!(cfg.validate().is_err(), "n = 1 with spread loss active");
        cfg.lambda[1] = 0.0;
        assert!(cfg.validate().is_ok(), "n = 1 allowed once spread loss is off");
        cfg.lambda[0] = -0.1;
        assert!(cfg.validate().is_err());
    }
}

//! Variational baselines at matched capacity: a fixed standard-normal prior,
//! and the naive variant that aims the KL at an example-conditioned target
//! instead of restructuring the objective.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::disentangle::{FeatureExtractor, MotionFeatureSeq};
use crate::dynamics::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Axis, NodeId, Tape};
use crate::layers::{tile_rows, Mlp};
use crate::params::{bind, harvest, optimizer_step, Bound, OptimKind, ParamSet};
use crate::predictor::{
    example_stats, predict_step, prior_params, EpochLoss, Guidance, PredictorNet, PriorNet,
    TrainConfig, TrainLog,
};
use crate::retrieval::{retrieve, retrieve_random, ExampleSet, FeatureIndex};
use crate::rng::{below, mix, standard_normal, stream, Domain};
use crate::tensor::Tensor;

const POST_HIDDEN: usize = 64;

/// Gaussian over the noise space conditioned on the previous feature.
#[derive(Debug, Clone)]
pub struct PosteriorNet {
    pub params: ParamSet,
    mlp: Mlp,
    pub c_f: usize,
    pub h_z: usize,
}

impl PosteriorNet {
    pub fn new(c_f: usize, h_z: usize, seed: u64) -> PosteriorNet {
        let mut params = ParamSet::new();
        let mut rng = stream(seed, Domain::ParamInit, 4);
        let mlp = Mlp::init(
            &mut params,
            "pz",
            &[c_f, POST_HIDDEN, POST_HIDDEN, 2 * h_z],
            &mut rng,
        );
        PosteriorNet {
            params,
            mlp,
            c_f,
            h_z,
        }
    }

    /// (mu_hat, sigma2_hat) from the previous feature vector.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        f_prev: &[f64],
    ) -> Result<(NodeId, NodeId)> {
        let x = tape.constant(Tensor::row_vector(f_prev));
        let out = self.mlp.forward(tape, bound, x)?;
        let mu = tape.slice(out, Axis::Cols, 0, self.h_z)?;
        let logvar = tape.slice(out, Axis::Cols, self.h_z, 2 * self.h_z)?;
        let sigma2 = tape.exp(logvar);
        Ok((mu, sigma2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    FixedPrior,
    ExampleKl,
}

impl BaselineKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineKind::FixedPrior => "fixed_prior",
            BaselineKind::ExampleKl => "example_kl",
        }
    }
}

/// Baseline parameter bundle. The predictor shares the example-guided
/// model's architecture and width, minus the example inputs; the prior net
/// exists only for the example-KL variant, where it supplies the KL target.
#[derive(Debug, Clone)]
pub struct BaselineNets {
    pub kind: BaselineKind,
    pub pred: PredictorNet,
    pub post: PosteriorNet,
    pub prior: Option<PriorNet>,
}

impl BaselineNets {
    pub fn new(kind: BaselineKind, c_f: usize, h_z: usize, seed: u64) -> BaselineNets {
        BaselineNets {
            kind,
            pred: PredictorNet::new(c_f, h_z, false, seed),
            post: PosteriorNet::new(c_f, h_z, seed),
            prior: match kind {
                BaselineKind::FixedPrior => None,
                BaselineKind::ExampleKl => Some(PriorNet::new(c_f, h_z, seed)),
            },
        }
    }
}

fn check_positive(vals: &[f64]) -> Result<()> {
    for &v in vals {
        if v <= 0.0 || !v.is_finite() {
            return Err(Error::InvalidVariance { value: v });
        }
    }
    Ok(())
}

/// Gaussian KL with variances as arguments:
/// sum over dims of 0.5*ln(v/v_hat) + (v_hat + (mu - mu_hat)^2) / (2v).
///
/// This is the standard KL(N(mu_hat, v_hat) || N(mu, v)) plus a constant
/// one-half per dimension, so the minimum over the hatted arguments sits at
/// equality with value dim/2 and zero gradient.
pub fn kl_gaussian(mu: &[f64], var: &[f64], mu_hat: &[f64], var_hat: &[f64]) -> Result<f64> {
    check_positive(var)?;
    check_positive(var_hat)?;
    let mut total = 0.0;
    for i in 0..mu.len() {
        let d = mu[i] - mu_hat[i];
        total += 0.5 * (libm::log(var[i]) - libm::log(var_hat[i]))
            + (var_hat[i] + d * d) / (2.0 * var[i]);
    }
    Ok(total)
}

/// Graph version of `kl_gaussian` over (mu, var) and (mu_hat, var_hat) nodes.
pub fn kl_node(
    tape: &mut Tape,
    mu: NodeId,
    var: NodeId,
    mu_hat: NodeId,
    var_hat: NodeId,
) -> Result<NodeId> {
    check_positive(tape.value(var).data())?;
    check_positive(tape.value(var_hat).data())?;
    let lv = tape.log(var);
    let lvh = tape.log(var_hat);
    let dl = tape.sub(lv, lvh)?;
    let dl = tape.scale(dl, 0.5);
    let dmu = tape.sub(mu, mu_hat)?;
    let dmu2 = tape.mul(dmu, dmu)?;
    let num = tape.add(var_hat, dmu2)?;
    let den = tape.scale(var, 2.0);
    let frac = tape.div(num, den)?;
    let per_dim = tape.add(dl, frac)?;
    Ok(tape.sum(per_dim))
}

fn reparam_one(
    tape: &mut Tape,
    mu: NodeId,
    sigma2: NodeId,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let h = tape.value(mu).cols();
    let eps = Tensor::row_vector(
        &(0..h)
            .map(|_| standard_normal(rng))
            .collect::<Vec<f64>>(),
    );
    let eps = tape.constant(eps);
    let std = tape.sqrt(sigma2);
    let scaled = tape.mul(std, eps)?;
    tape.add(mu, scaled)
}

/// Teacher-forced variational training shared by both baselines. Per step:
/// posterior from the previous true feature, one reparameterized draw, a
/// squared prediction error, and the KL against the variant's target.
fn train_baseline_with(
    nets: &mut BaselineNets,
    feats: &[MotionFeatureSeq],
    examples_per_seq: Option<Vec<ExampleSet>>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if feats.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t_len = feats[0].len();
    let h_z = cfg.h_z;
    let mut log = TrainLog {
        epochs: Vec::with_capacity(cfg.epochs),
        plateau_epoch: None,
        fairness_fingerprint: cfg.fairness_fingerprint(),
    };
    let mut flat_count = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..feats.len()).collect();
        let mut shuffle_rng = stream(cfg.seed, Domain::TrainOrder, epoch as u64);
        for i in (1..order.len()).rev() {
            let j = below(&mut shuffle_rng, i + 1);
            order.swap(i, j);
        }

        let mut sum_mse = 0.0;
        let mut sum_kl = 0.0;
        let mut batches = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let pred_bound = bind(&mut tape, &nets.pred.params, true);
            let post_bound = bind(&mut tape, &nets.post.params, true);
            let prior_bound = nets
                .prior
                .as_ref()
                .map(|p| bind(&mut tape, &p.params, true));

            let mut total: Option<NodeId> = None;
            for &idx in chunk {
                let fseq = &feats[idx];
                let mut noise_rng = stream(
                    mix(&[cfg.seed, epoch as u64]),
                    Domain::RolloutNoise,
                    fseq.source_id,
                );
                let mut state = tape.constant(Tensor::zeros(1, nets.pred.hidden()));
                let mut seq_loss: Option<NodeId> = None;
                for t in 0..t_len - 1 {
                    let (mu_hat, var_hat) =
                        nets.post.forward(&mut tape, &post_bound, fseq.frame(t))?;
                    let z = reparam_one(&mut tape, mu_hat, var_hat, &mut noise_rng)?;
                    let f_t = tape.constant(Tensor::row_vector(fseq.frame(t)));
                    let (f_next, next_state) =
                        predict_step(&nets.pred, &mut tape, &pred_bound, state, f_t, z, None)?;
                    state = next_state;
                    let target = tape.constant(Tensor::row_vector(fseq.frame(t + 1)));
                    let diff = tape.sub(f_next, target)?;
                    let mse = tape.sq_norm(diff);
                    sum_mse += tape.value(mse).item();

                    let kl = match (&nets.prior, &prior_bound, &examples_per_seq) {
                        (Some(prior), Some(pb), Some(ex)) => {
                            let (mean, var) = example_stats(&ex[idx].frames_at(t + 1))?;
                            let (mu_t, var_t) =
                                prior_params(prior, &mut tape, pb, &mean, &var)?;
                            kl_node(&mut tape, mu_t, var_t, mu_hat, var_hat)?
                        }
                        _ => {
                            let zero = tape.constant(Tensor::zeros(1, h_z));
                            let one = tape.constant(Tensor::filled(1, h_z, 1.0));
                            kl_node(&mut tape, zero, one, mu_hat, var_hat)?
                        }
                    };
                    sum_kl += tape.value(kl).item();
                    let step_loss = tape.add(mse, kl)?;
                    seq_loss = Some(match seq_loss {
                        Some(acc) => tape.add(acc, step_loss)?,
                        None => step_loss,
                    });
                }
                let seq_total = tape.scale(seq_loss.expect("t_len >= 2"), 1.0 / (t_len - 1) as f64);
                total = Some(match total {
                    Some(acc) => tape.add(acc, seq_total)?,
                    None => seq_total,
                });
            }
            let total = total.expect("non-empty batch");
            let mean = tape.scale(total, 1.0 / chunk.len() as f64);
            if !tape.value(mean).item().is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            tape.backward(mean)?;
            harvest(&tape, &pred_bound, &mut nets.pred.params);
            harvest(&tape, &post_bound, &mut nets.post.params);
            optimizer_step(&mut nets.pred.params, cfg.lr_pred, OptimKind::Adam)?;
            optimizer_step(&mut nets.post.params, cfg.lr_pred, OptimKind::Adam)?;
            if let (Some(prior), Some(pb)) = (&mut nets.prior, &prior_bound) {
                harvest(&tape, pb, &mut prior.params);
                optimizer_step(&mut prior.params, cfg.lr_pred, OptimKind::Adam)?;
            }
            batches += 1;
        }

        let steps = (feats.len() * (t_len - 1)) as f64;
        let mse = sum_mse / steps;
        let kl = sum_kl / steps;
        let fin = mse + kl;
        let _ = batches;
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
        log.epochs.push(EpochLoss {
            epoch,
            rcn: mse,
            dst: kl,
            disc: 0.0,
            gen: 0.0,
            fin,
        });
    }
    Ok(log)
}

/// Fixed-prior baseline: KL target is the standard normal.
pub fn train_fixed_prior(
    nets: &mut BaselineNets,
    dataset: &Dataset,
    extractor: &FeatureExtractor,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    debug_assert_eq!(nets.kind, BaselineKind::FixedPrior);
    let feats: Vec<MotionFeatureSeq> = dataset.train().map(|s| extractor.extract(s)).collect();
    train_baseline_with(nets, &feats, None, cfg)
}

/// Example-KL baseline: the KL target is an example-conditioned Gaussian,
/// everything else identical to the fixed-prior variant.
pub fn train_example_kl(
    nets: &mut BaselineNets,
    dataset: &Dataset,
    index: &FeatureIndex,
    extractor: &FeatureExtractor,
    cfg: &TrainConfig,
    guidance: Guidance,
) -> Result<TrainLog> {
    debug_assert_eq!(nets.kind, BaselineKind::ExampleKl);
    let m = dataset.spec.m_context;
    let mut feats = Vec::new();
    let mut examples = Vec::new();
    for seq in dataset.train() {
        let f = extractor.extract(seq);
        let query = f.window(0, m);
        let ex = match guidance {
            Guidance::Retrieved => retrieve(&query, index, cfg.k, seq.id)?,
            Guidance::Random => {
                retrieve_random(&query, index, cfg.k, mix(&[cfg.seed, seq.id]), seq.id)?
            }
        };
        feats.push(f);
        examples.push(ex);
    }
    train_baseline_with(nets, &feats, Some(examples), cfg)
}

/// Sample N feedback rollouts from a trained baseline. The context phase is
/// teacher-forced with the posterior mean; over the horizon the noise comes
/// from the variant's prior: standard normal for the fixed-prior model, the
/// example-conditioned Gaussian for the example-KL model.
pub fn sample_baseline_rollouts(
    nets: &BaselineNets,
    context: &MotionFeatureSeq,
    examples: Option<&ExampleSet>,
    n: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let m = context.len();
    if m < 1 {
        return Err(Error::TooFewFrames { got: 0, need: 1 });
    }
    let mut tape = Tape::new();
    let pred_bound = bind(&mut tape, &nets.pred.params, false);
    let post_bound = bind(&mut tape, &nets.post.params, false);
    let prior_bound = nets
        .prior
        .as_ref()
        .map(|p| bind(&mut tape, &p.params, false));

    let mut state = tape.constant(Tensor::zeros(1, nets.pred.hidden()));
    for t in 0..m - 1 {
        let (mu_hat, _) = nets.post.forward(&mut tape, &post_bound, context.frame(t))?;
        let f_t = tape.constant(Tensor::row_vector(context.frame(t)));
        let (_, next) = predict_step(&nets.pred, &mut tape, &pred_bound, state, f_t, mu_hat, None)?;
        state = next;
    }

    let mut state = tile_rows(&mut tape, state, n)?;
    let last = tape.constant(Tensor::row_vector(context.frame(m - 1)));
    let mut f_cur = tile_rows(&mut tape, last, n)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| stream(seed, Domain::RolloutNoise, i as u64))
        .collect();

    let mut out = alloc::vec![Tensor::zeros(horizon, nets.pred.c_f); n];
    for step in 0..horizon {
        let z = match (&nets.prior, &prior_bound, examples) {
            (Some(prior), Some(pb), Some(ex)) => {
                let t = m - 1 + step;
                let (mean, var) = example_stats(&ex.frames_at(t))?;
                let (mu, sigma2) = prior_params(prior, &mut tape, pb, &mean, &var)?;
                crate::predictor::sample_noise(&mut tape, mu, sigma2, n, &mut rngs)?
            }
            _ => {
                let mut eps = Tensor::zeros(n, nets.pred.h_z);
                for (i, rng) in rngs.iter_mut().enumerate() {
                    for j in 0..nets.pred.h_z {
                        eps.set(i, j, standard_normal(rng));
                    }
                }
                tape.constant(eps)
            }
        };
        let (f_next, next_state) =
            predict_step(&nets.pred, &mut tape, &pred_bound, state, f_cur, z, None)?;
        let v = tape.value(f_next);
        for (i, sample) in out.iter_mut().enumerate() {
            sample.row_mut(step).copy_from_slice(v.row(i));
        }
        f_cur = f_next;
        state = next_state;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{fd_param_grads, max_rel_err};
    use alloc::string::{String, ToString};

    #[test]
    fn kl_equality_is_half_per_dim() {
        let mu = [0.3, -1.2, 0.0];
        let var = [0.5, 2.0, 1.0];
        let kl = kl_gaussian(&mu, &var, &mu, &var).unwrap();
        assert_eq!(kl, 1.5, "exactly one half per dimension");
    }

    #[test]
    fn kl_standard_target_half_per_dim() {
        // posterior emitting (0, 1) against the standard normal target
        let kl = kl_gaussian(&[0.0, 0.0], &[1.0, 1.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(kl, 1.0);
    }

    #[test]
    fn kl_rejects_nonpositive_variance() {
        assert!(matches!(
            kl_gaussian(&[0.0], &[0.0], &[0.0], &[1.0]),
            Err(Error::InvalidVariance { .. })
        ));
        assert!(matches!(
            kl_gaussian(&[0.0], &[1.0], &[0.0], &[-2.0]),
            Err(Error::InvalidVariance { .. })
        ));
    }

    #[test]
    fn kl_gradient_vanishes_at_equality() {
        // analytic gradient via the graph at (mu_hat, var_hat) = (mu, var)
        let mut params = ParamSet::new();
        params.insert("mu_hat", Tensor::row_vector(&[0.4, -0.9]));
        params.insert("var_hat", Tensor::row_vector(&[0.7, 1.3]));
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, true);
        let mu = tape.constant(Tensor::row_vector(&[0.4, -0.9]));
        let var = tape.constant(Tensor::row_vector(&[0.7, 1.3]));
        let kl = kl_node(&mut tape, mu, var, bound.node("mu_hat"), bound.node("var_hat")).unwrap();
        assert!((tape.value(kl).item() - 1.0).abs() < 1e-15);
        tape.backward(kl).unwrap();
        harvest(&tape, &bound, &mut params);
        for (name, p) in params.iter() {
            for &g in p.grad.data() {
                assert!(
                    g.abs() < 1e-12,
                    "gradient of {name} should vanish at equality, got {g}"
                );
            }
        }
    }

    #[test]
    fn kl_minimum_sits_at_equality() {
        let mu = [0.2];
        let var = [0.8];
        let at_eq = kl_gaussian(&mu, &var, &mu, &var).unwrap();
        for (dm, dv) in [(0.1, 0.0), (-0.2, 0.1), (0.0, 0.4), (0.05, -0.3)] {
            let other = kl_gaussian(&mu, &var, &[0.2 + dm], &[0.8 + dv]).unwrap();
            assert!(other > at_eq, "perturbed KL {other} not above minimum {at_eq}");
        }
    }

    #[test]
    fn kl_node_matches_raw_and_finite_differences() {
        let mut rng = stream(71, Domain::EvalSubsets, 0);
        for _ in 0..20 {
            let dim = 3;
            let draw =
                |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<f64> {
                    (0..dim).map(|_| crate::rng::uniform(rng, lo, hi)).collect()
                };
            let mu = draw(&mut rng, -1.0, 1.0);
            let var = draw(&mut rng, 0.3, 2.0);
            let mut params = ParamSet::new();
            params.insert("mu_hat", Tensor::row_vector(&draw(&mut rng, -1.0, 1.0)));
            params.insert("var_hat", Tensor::row_vector(&draw(&mut rng, 0.3, 2.0)));

            let value_of = |p: &ParamSet| -> f64 {
                kl_gaussian(
                    &mu,
                    &var,
                    p.get("mu_hat").value.data(),
                    p.get("var_hat").value.data(),
                )
                .unwrap()
            };

            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params, true);
            let mu_n = tape.constant(Tensor::row_vector(&mu));
            let var_n = tape.constant(Tensor::row_vector(&var));
            let kl =
                kl_node(&mut tape, mu_n, var_n, bound.node("mu_hat"), bound.node("var_hat"))
                    .unwrap();
            assert!((tape.value(kl).item() - value_of(&params)).abs() < 1e-12);
            tape.backward(kl).unwrap();
            harvest(&tape, &bound, &mut params);
            let analytic: Vec<(String, Tensor)> = params
                .iter()
                .map(|(n, p)| (n.to_string(), p.grad.clone()))
                .collect();
            let mut probe = params.clone();
            probe.zero_grads();
            let fd = fd_param_grads(&probe, 1e-5, value_of);
            assert!(max_rel_err(&analytic, &fd) < 1e-4);
        }
    }
}

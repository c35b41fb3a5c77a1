//! Self-supervised split of each observation into a static appearance code
//! and a per-frame motion code, trained by swap reconstruction: decode the
//! appearance of frame i with the motion of frame j and demand frame j back.

use alloc::string::String;
use alloc::vec::Vec;

use crate::dynamics::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::graph::{Axis, NodeId, Tape};
use crate::layers::Mlp;
use crate::params::{bind, harvest, optimizer_step, Bound, OptimKind, ParamSet};
use crate::rng::{below, stream, Domain};
use crate::tensor::Tensor;

const HIDDEN: usize = 64;
/// Abort threshold for swap-loss divergence.
const DIVERGE_AT: f64 = 1e3;

#[derive(Debug, Clone)]
pub struct DisentangleConfig {
    /// Observation width the encoder sees (positions + nuisance).
    pub d_in: usize,
    /// Appearance code width.
    pub c_b: usize,
    /// Motion code width; this is the retrieval feature width C_f.
    pub c_h: usize,
    pub seed: u64,
}

impl DisentangleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_b + self.c_h > self.d_in {
            return Err(Error::InvalidConfig(alloc::format!(
                "code width {} + {} exceeds observation width {}",
                self.c_b,
                self.c_h,
                self.d_in
            )));
        }
        if self.c_h == 0 {
            return Err(Error::InvalidConfig(String::from(
                "motion code needs at least one dimension",
            )));
        }
        Ok(())
    }
}

/// Encoder producing (appearance, motion) plus the reconstruction decoder.
#[derive(Debug, Clone)]
pub struct DisentangleModel {
    pub params: ParamSet,
    encoder: Mlp,
    decoder: Mlp,
    pub cfg: DisentangleConfig,
}

impl DisentangleModel {
    pub fn new(cfg: DisentangleConfig) -> Result<DisentangleModel> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = stream(cfg.seed, Domain::ParamInit, 0);
        let code = cfg.c_b + cfg.c_h;
        let encoder = Mlp::init(&mut params, "enc", &[cfg.d_in, HIDDEN, HIDDEN, code], &mut rng);
        let decoder = Mlp::init(&mut params, "dec", &[code, HIDDEN, HIDDEN, cfg.d_in], &mut rng);
        Ok(DisentangleModel {
            params,
            encoder,
            decoder,
            cfg,
        })
    }

    /// Graph-side encode: returns (appearance node, motion node).
    pub fn encode_nodes(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let code = self.encoder.forward(tape, bound, x)?;
        let b = tape.slice(code, Axis::Cols, 0, self.cfg.c_b)?;
        let h = tape.slice(code, Axis::Cols, self.cfg.c_b, self.cfg.c_b + self.cfg.c_h)?;
        Ok((b, h))
    }

    /// Deterministic encode of one observation into (appearance, motion).
    pub fn encode(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.cfg.d_in);
        let code = self.encoder.eval(&self.params, x);
        (
            code[..self.cfg.c_b].to_vec(),
            code[self.cfg.c_b..].to_vec(),
        )
    }

    pub fn decode(&self, b: &[f64], h: &[f64]) -> Vec<f64> {
        let mut code = b.to_vec();
        code.extend_from_slice(h);
        self.decoder.eval(&self.params, &code)
    }

    /// Swap-reconstruction loss node: decode (appearance of frame i, motion
    /// of frame j) and compare against frame j.
    pub fn swap_loss_node(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seq: &Sequence,
        i: usize,
        j: usize,
    ) -> Result<NodeId> {
        if i == j {
            return Err(Error::DegenerateSwap { t: i });
        }
        let xi = tape.constant(Tensor::row_vector(seq.obs.row(i)));
        let xj = tape.constant(Tensor::row_vector(seq.obs.row(j)));
        let (b_i, _) = self.encode_nodes(tape, bound, xi)?;
        let (_, h_j) = self.encode_nodes(tape, bound, xj)?;
        let code = tape.concat(&[b_i, h_j], Axis::Cols)?;
        let recon = self.decoder.forward(tape, bound, code)?;
        let diff = tape.sub(recon, xj)?;
        Ok(tape.sq_norm(diff))
    }

    /// Swap-reconstruction loss value for one (i, j) pair.
    pub fn swap_loss(&self, seq: &Sequence, i: usize, j: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &self.params, false);
        let node = self.swap_loss_node(&mut tape, &bound, seq, i, j)?;
        Ok(tape.value(node).item())
    }

    /// Plain reconstruction error of frame j from its own codes.
    pub fn recon_loss(&self, seq: &Sequence, j: usize) -> f64 {
        let (b, h) = self.encode(seq.obs.row(j));
        let recon = self.decode(&b, &h);
        recon
            .iter()
            .zip(seq.obs.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Motion features of a whole sequence, one row per frame. A single
    /// frame yields a single-row feature matrix.
    pub fn extract_features(&self, seq: &Sequence) -> MotionFeatureSeq {
        let t_len = seq.obs.rows();
        let mut feats = Tensor::zeros(t_len, self.cfg.c_h);
        for t in 0..t_len {
            let (_, h) = self.encode(seq.obs.row(t));
            feats.row_mut(t).copy_from_slice(&h);
        }
        MotionFeatureSeq {
            feats,
            source_id: seq.id,
        }
    }
}

/// Motion features for one sequence: one row per frame, C_f columns.
#[derive(Debug, Clone)]
pub struct MotionFeatureSeq {
    pub feats: Tensor,
    pub source_id: u64,
}

impl MotionFeatureSeq {
    pub fn len(&self) -> usize {
        self.feats.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.feats.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.feats.row(t)
    }

    pub fn window(&self, start: usize, stop: usize) -> MotionFeatureSeq {
        MotionFeatureSeq {
            feats: self.feats.slice_rows(start, stop),
            source_id: self.source_id,
        }
    }
}

/// Where motion features come from. `GroundTruth` bypasses the learned
/// encoder and uses raw positions, which keeps predictor experiments
/// independent of disentangler quality and makes retrieval auditable.
#[derive(Debug, Clone)]
pub enum FeatureExtractor {
    GroundTruth { d_obs: usize },
    Learned(DisentangleModel),
}

impl FeatureExtractor {
    pub fn width(&self) -> usize {
        match self {
            FeatureExtractor::GroundTruth { d_obs } => *d_obs,
            FeatureExtractor::Learned(m) => m.cfg.c_h,
        }
    }

    pub fn extract(&self, seq: &Sequence) -> MotionFeatureSeq {
        match self {
            FeatureExtractor::GroundTruth { d_obs } => {
                let t_len = seq.obs.rows();
                let mut feats = Tensor::zeros(t_len, *d_obs);
                for t in 0..t_len {
                    feats.row_mut(t).copy_from_slice(&seq.obs.row(t)[..*d_obs]);
                }
                MotionFeatureSeq {
                    feats,
                    source_id: seq.id,
                }
            }
            FeatureExtractor::Learned(m) => m.extract_features(seq),
        }
    }
}

/// Minimize the mean swap loss with Adam. One (i, j) pair is drawn fresh
/// per sequence visit. Returns the per-epoch mean loss curve.
pub fn train_disentangle(
    model: &mut DisentangleModel,
    dataset: &Dataset,
    epochs: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let train: Vec<&Sequence> = dataset.train().collect();
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t_len = dataset.spec.seq_len();
    if t_len < 2 {
        return Err(Error::TooFewFrames { got: t_len, need: 2 });
    }
    let batch = 16usize;
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = stream(model.cfg.seed, Domain::TrainOrder, epoch as u64);
        for i in (1..order.len()).rev() {
            let j = below(&mut shuffle_rng, i + 1);
            order.swap(i, j);
        }
        let mut pair_rng = stream(model.cfg.seed, Domain::SwapPairs, epoch as u64);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &model.params, true);
            let mut total: Option<NodeId> = None;
            for &idx in chunk {
                let seq = train[idx];
                let i = below(&mut pair_rng, t_len);
                let j = {
                    // uniform over the t_len - 1 indices distinct from i
                    let r = below(&mut pair_rng, t_len - 1);
                    if r >= i {
                        r + 1
                    } else {
                        r
                    }
                };
                let loss = model.swap_loss_node(&mut tape, &bound, seq, i, j)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, loss)?,
                    None => loss,
                });
            }
            let total = total.expect("non-empty chunk");
            let mean = tape.scale(total, 1.0 / chunk.len() as f64);
            let mean_val = tape.value(mean).item();
            if !mean_val.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: 0 });
            }
            if mean_val > DIVERGE_AT {
                return Err(Error::Diverged {
                    epoch,
                    loss: mean_val,
                });
            }
            tape.backward(mean)?;
            harvest(&tape, &bound, &mut model.params);
            optimizer_step(&mut model.params, lr, OptimKind::Adam)?;
            epoch_loss += mean_val * chunk.len() as f64;
        }
        curve.push(epoch_loss / train.len() as f64);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate, DatasetSpec, GeneratorKind};

    fn small_dataset() -> Dataset {
        generate(&DatasetSpec {
            kind: GeneratorKind::DetBounce,
            count: 12,
            test_count: 2,
            m_context: 5,
            horizon: 10,
            d_obs: 2,
            nuisance_dims: 4,
            seed: 5,
            num_modes: 0,
            held_out_modes: Vec::new(),
        })
        .unwrap()
    }

    fn model_for(data: &Dataset) -> DisentangleModel {
        DisentangleModel::new(DisentangleConfig {
            d_in: data.spec.obs_dim(),
            c_b: 4,
            c_h: 2,
            seed: 17,
        })
        .unwrap()
    }

    #[test]
    fn encode_is_deterministic_and_finite() {
        let data = small_dataset();
        let model = model_for(&data);
        let seq = &data.sequences[0];
        let (b1, h1) = model.encode(seq.obs.row(0));
        let (b2, h2) = model.encode(seq.obs.row(0));
        assert_eq!(b1, b2);
        assert_eq!(h1, h2);
        assert_eq!(b1.len(), 4);
        assert_eq!(h1.len(), 2);
        assert!(b1.iter().chain(h1.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn swap_loss_rejects_identical_pair() {
        let data = small_dataset();
        let model = model_for(&data);
        let err = model.swap_loss(&data.sequences[0], 3, 3).unwrap_err();
        assert!(matches!(err, Error::DegenerateSwap { t: 3 }));
    }

    #[test]
    fn swap_loss_nonnegative() {
        let data = small_dataset();
        let model = model_for(&data);
        for (i, j) in [(0, 1), (2, 9), (14, 0)] {
            assert!(model.swap_loss(&data.sequences[1], i, j).unwrap() >= 0.0);
        }
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let data = small_dataset();
        let mut model = model_for(&data);
        let before: Vec<Vec<f64>> = model
            .params
            .iter()
            .map(|(_, p)| p.value.data().to_vec())
            .collect();
        let curve = train_disentangle(&mut model, &data, 0, 1e-3).unwrap();
        assert!(curve.is_empty());
        let after: Vec<Vec<f64>> = model
            .params
            .iter()
            .map(|(_, p)| p.value.data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn extract_features_single_frame() {
        let data = small_dataset();
        let model = model_for(&data);
        let seq = &data.sequences[0];
        let one = Sequence {
            id: seq.id,
            obs: Tensor::from_rows(&[seq.obs.row(0)]),
            mode_label: seq.mode_label,
            split: seq.split,
        };
        let f = model.extract_features(&one);
        assert_eq!(f.len(), 1);
        assert_eq!(f.width(), 2);
    }

    #[test]
    fn extract_matches_per_frame_encode() {
        let data = small_dataset();
        let model = model_for(&data);
        let seq = &data.sequences[2];
        let f = model.extract_features(seq);
        for t in 0..seq.obs.rows() {
            let (_, h) = model.encode(seq.obs.row(t));
            assert_eq!(f.frame(t), h.as_slice());
        }
    }

    #[test]
    fn ground_truth_extractor_returns_positions() {
        let data = small_dataset();
        let ex = FeatureExtractor::GroundTruth { d_obs: 2 };
        let seq = &data.sequences[0];
        let f = ex.extract(seq);
        assert_eq!(f.width(), 2);
        for t in 0..seq.obs.rows() {
            assert_eq!(f.frame(t), &seq.obs.row(t)[..2]);
        }
    }

    #[test]
    fn overcomplete_code_rejected() {
        let bad = DisentangleConfig {
            d_in: 4,
            c_b: 3,
            c_h: 2,
            seed: 0,
        };
        assert!(DisentangleModel::new(bad).is_err());
    }

    #[test]
    fn training_reduces_swap_loss() {
        let data = small_dataset();
        let mut model = model_for(&data);
        let curve = train_disentangle(&mut model, &data, 30, 3e-3).unwrap();
        assert!(curve.len() == 30);
        assert!(
            curve[29] < curve[0] * 0.5,
            "swap loss should drop: {:.4} -> {:.4}",
            curve[0],
            curve[29]
        );
    }
}

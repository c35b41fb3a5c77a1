//! Dense, perceptron, and gated-recurrent building blocks on the tape.
//!
//! Layers own parameter *names*; the arrays live in the model's ParamSet.
//! Forward passes take a `Bound` so the same layer code serves trainable
//! and frozen bindings alike.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Axis, NodeId, Tape};
use crate::params::{Bound, ParamSet};
use crate::rng::uniform;
use crate::tensor::Tensor;

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = libm::sqrt(6.0 / (rows + cols) as f64);
    let data: Vec<f64> = (0..rows * cols).map(|_| uniform(rng, -a, a)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Repeat a 1-row node `n` times so it can be added to a batch of rows.
pub fn tile_rows(tape: &mut Tape, node: NodeId, n: usize) -> Result<NodeId> {
    debug_assert_eq!(tape.value(node).rows(), 1);
    if n == 1 {
        return Ok(node);
    }
    let parts: Vec<NodeId> = (0..n).map(|_| node).collect();
    tape.concat(&parts, Axis::Rows)
}

#[derive(Debug, Clone)]
pub struct Dense {
    w: String,
    b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Dense {
        let w = format!("{prefix}/w");
        let b = format!("{prefix}/b");
        params.insert(&w, glorot(rng, in_dim, out_dim));
        params.insert(&b, Tensor::zeros(1, out_dim));
        Dense {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// x (batch x in_dim) -> x*W + b
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let batch = tape.value(x).rows();
        let xw = tape.matmul(x, bound.node(&self.w))?;
        let bias = tile_rows(tape, bound.node(&self.b), batch)?;
        tape.add(xw, bias)
    }
}

/// Multi-layer perceptron with tanh on hidden layers and a linear head.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// `dims` = [input, hidden..., output]
    pub fn init(params: &mut ParamSet, prefix: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Mlp {
        assert!(dims.len() >= 2);
        let layers = (0..dims.len() - 1)
            .map(|i| {
                Dense::init(
                    params,
                    &format!("{prefix}/l{i}"),
                    dims[i],
                    dims[i + 1],
                    rng,
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if i < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Convenience inference on raw values via a throwaway tape.
    pub fn eval(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = crate::params::bind(&mut tape, params, false);
        let xn = tape.constant(Tensor::row_vector(x));
        let out = self
            .forward(&mut tape, &bound, xn)
            .expect("mlp eval shapes fixed at init");
        tape.value(out).data().to_vec()
    }
}

/// Gated recurrent cell: reset gate r, update gate u, candidate c.
#[derive(Debug, Clone)]
pub struct GruCell {
    wr: Dense,
    wu: Dense,
    wc: Dense,
    ur: String,
    uu: String,
    uc: String,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> GruCell {
        let wr = Dense::init(params, &format!("{prefix}/xr"), in_dim, hidden, rng);
        let wu = Dense::init(params, &format!("{prefix}/xu"), in_dim, hidden, rng);
        let wc = Dense::init(params, &format!("{prefix}/xc"), in_dim, hidden, rng);
        let ur = format!("{prefix}/hr");
        let uu = format!("{prefix}/hu");
        let uc = format!("{prefix}/hc");
        params.insert(&ur, glorot(rng, hidden, hidden));
        params.insert(&uu, glorot(rng, hidden, hidden));
        params.insert(&uc, glorot(rng, hidden, hidden));
        GruCell {
            wr,
            wu,
            wc,
            ur,
            uu,
            uc,
            in_dim,
            hidden,
        }
    }

    /// One step: x (batch x in_dim), h (batch x hidden) -> h' (batch x hidden)
    pub fn step(&self, tape: &mut Tape, bound: &Bound, x: NodeId, h: NodeId) -> Result<NodeId> {
        let hr = tape.matmul(h, bound.node(&self.ur))?;
        let xr = self.wr.forward(tape, bound, x)?;
        let pre_r = tape.add(xr, hr)?;
        let r = tape.sigmoid(pre_r);

        let hu = tape.matmul(h, bound.node(&self.uu))?;
        let xu = self.wu.forward(tape, bound, x)?;
        let pre_u = tape.add(xu, hu)?;
        let u = tape.sigmoid(pre_u);

        let rh = tape.mul(r, h)?;
        let hc = tape.matmul(rh, bound.node(&self.uc))?;
        let xc = self.wc.forward(tape, bound, x)?;
        let pre_c = tape.add(xc, hc)?;
        let c = tape.tanh(pre_c);

        // h' = (1 - u) * h + u * c
        let one_minus_u = {
            let neg = tape.scale(u, -1.0);
            tape.add_scalar(neg, 1.0)
        };
        let keep = tape.mul(one_minus_u, h)?;
        let write = tape.mul(u, c)?;
        tape.add(keep, write)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind;
    use crate::rng::{stream, Domain};

    #[test]
    fn dense_batch_rows_share_bias() {
        let mut params = ParamSet::new();
        let mut rng = stream(1, Domain::ParamInit, 0);
        let layer = Dense::init(&mut params, "d", 3, 2, &mut rng);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, false);
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 0.0, -1.0], &[1.0, 0.0, -1.0]]));
        let y = layer.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).shape(), (2, 2));
        assert_eq!(tape.value(y).row(0), tape.value(y).row(1));
    }

    #[test]
    fn mlp_eval_matches_tape_forward() {
        let mut params = ParamSet::new();
        let mut rng = stream(2, Domain::ParamInit, 0);
        let mlp = Mlp::init(&mut params, "m", &[4, 8, 3], &mut rng);
        let x = [0.3, -0.2, 0.9, 0.0];
        let direct = mlp.eval(&params, &x);

        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, true);
        let xn = tape.constant(Tensor::row_vector(&x));
        let out = mlp.forward(&mut tape, &bound, xn).unwrap();
        assert_eq!(direct, tape.value(out).data());
    }

    #[test]
    fn gru_identical_rows_stay_identical() {
        let mut params = ParamSet::new();
        let mut rng = stream(3, Domain::ParamInit, 0);
        let gru = GruCell::init(&mut params, "g", 4, 6, &mut rng);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, false);
        let x = tape.constant(Tensor::from_rows(&[
            &[0.1, 0.2, -0.3, 0.4],
            &[0.1, 0.2, -0.3, 0.4],
        ]));
        let h = tape.constant(Tensor::zeros(2, 6));
        let h2 = gru.step(&mut tape, &bound, x, h).unwrap();
        assert_eq!(tape.value(h2).row(0), tape.value(h2).row(1));
        assert!(tape.value(h2).is_finite());
    }
}

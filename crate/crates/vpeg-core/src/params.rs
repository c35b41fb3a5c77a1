//! Named parameter collections, graph bindings, and optimizer steps.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::tensor::Tensor;

/// One learnable array plus its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Parameters of one model, keyed by name. BTreeMap keeps iteration order
/// deterministic, which the reproducibility contract depends on.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        debug_assert!(!self.entries.contains_key(name), "duplicate param {name}");
        let (r, c) = value.shape();
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad: Tensor::zeros(r, c),
                m: Tensor::zeros(r, c),
                v: Tensor::zeros(r, c),
            },
        );
    }

    pub fn get(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Number of scalar parameters across all arrays.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Replace stored values (used by checkpoint loading). Moments reset.
    pub fn load_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(p) => {
                if p.value.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "load_value",
                        left: p.value.shape(),
                        right: value.shape(),
                    });
                }
                let (r, c) = value.shape();
                p.value = value;
                p.grad = Tensor::zeros(r, c);
                p.m = Tensor::zeros(r, c);
                p.v = Tensor::zeros(r, c);
                Ok(())
            }
            None => Err(Error::InvalidConfig(alloc::format!(
                "checkpoint has no slot for parameter `{name}`"
            ))),
        }
    }
}

/// Tape bindings for one ParamSet. When `trainable` is false the leaves are
/// constants: gradients still flow through them to earlier inputs but are
/// not accumulated for the parameters themselves.
pub struct Bound {
    nodes: BTreeMap<String, NodeId>,
    trainable: bool,
}

impl Bound {
    pub fn node(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("unbound param {name}"))
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

pub fn bind(tape: &mut Tape, params: &ParamSet, trainable: bool) -> Bound {
    let mut nodes = BTreeMap::new();
    for (name, p) in params.iter() {
        let id = if trainable {
            tape.variable(p.value.clone())
        } else {
            tape.constant(p.value.clone())
        };
        nodes.insert(name.to_string(), id);
    }
    Bound { nodes, trainable }
}

/// Accumulate leaf gradients from the tape back into the ParamSet.
pub fn harvest(tape: &Tape, bound: &Bound, params: &mut ParamSet) {
    debug_assert!(bound.trainable);
    for (name, &node) in bound.nodes.iter() {
        let g = tape.grad(node);
        params.get_mut(name).grad.add_in_place(g);
    }
}

/// Apply one optimizer step and zero the gradients.
///
/// Adam uses beta = (0.9, 0.999) and eps = 1e-8 with bias correction.
pub fn optimizer_step(params: &mut ParamSet, lr: f64, kind: OptimKind) -> Result<()> {
    for (name, p) in params.entries.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }
    params.step += 1;
    let t = params.step as f64;
    for p in params.entries.values_mut() {
        match kind {
            OptimKind::Sgd => {
                let g = p.grad.data();
                let v = p.value.data_mut();
                for (x, gi) in v.iter_mut().zip(g) {
                    *x -= lr * gi;
                }
            }
            OptimKind::Adam => {
                let bias1 = 1.0 - libm::pow(ADAM_BETA1, t);
                let bias2 = 1.0 - libm::pow(ADAM_BETA2, t);
                let g = p.grad.data();
                let m = p.m.data_mut();
                let vmom = p.v.data_mut();
                let x = p.value.data_mut();
                for i in 0..g.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                    vmom[i] = ADAM_BETA2 * vmom[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    let mhat = m[i] / bias1;
                    let vhat = vmom[i] / bias2;
                    x[i] -= lr * mhat / (libm::sqrt(vhat) + ADAM_EPS);
                }
            }
        }
        p.grad.fill(0.0);
    }
    Ok(())
}

/// Collect (name, tensor) pairs for serialization, in deterministic order.
pub fn export(params: &ParamSet) -> Vec<(String, Tensor)> {
    params
        .iter()
        .map(|(n, p)| (n.to_string(), p.value.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tape;

    #[test]
    fn sgd_single_step() {
        let mut params = ParamSet::new();
        params.insert("p", Tensor::scalar(1.0));
        params.get_mut("p").grad = Tensor::scalar(2.0);
        optimizer_step(&mut params, 0.1, OptimKind::Sgd).unwrap();
        assert!((params.get("p").value.item() - 0.8).abs() < 1e-15);
        assert_eq!(params.get("p").grad.item(), 0.0);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::filled(2, 3, 0.0));
        params.get_mut("w").grad = Tensor::filled(2, 3, 1.0);
        optimizer_step(&mut params, 0.01, OptimKind::Adam).unwrap();
        for &x in params.get("w").value.data() {
            assert!((x.abs() - 0.01).abs() < 1e-9, "update magnitude {x}");
        }
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // minimize (p - 3)^2 from p = 0 with lr 0.1: residual decays by 0.8 per step
        let mut params = ParamSet::new();
        params.insert("p", Tensor::scalar(0.0));
        for _ in 0..200 {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params, true);
            let p = bound.node("p");
            let target = tape.constant(Tensor::scalar(3.0));
            let diff = tape.sub(p, target).unwrap();
            let loss = tape.sq_norm(diff);
            tape.backward(loss).unwrap();
            harvest(&tape, &bound, &mut params);
            optimizer_step(&mut params, 0.1, OptimKind::Sgd).unwrap();
        }
        assert!((params.get("p").value.item() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_param() {
        let mut params = ParamSet::new();
        params.insert("net/w0", Tensor::scalar(1.0));
        params.get_mut("net/w0").grad = Tensor::scalar(f64::NAN);
        match optimizer_step(&mut params, 0.1, OptimKind::Sgd) {
            Err(Error::NonFiniteGradient { name }) => assert_eq!(name, "net/w0"),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
    }

    #[test]
    fn fixed_seed_trajectories_identical()
    {
        let run = || {
            let mut params = ParamSet::new();
            let mut rng = crate::rng::stream(9, crate::rng::Domain::ParamInit, 0);
            let init: alloc::vec::Vec<f64> =
                (0..6).map(|_| crate::rng::uniform(&mut rng, -1.0, 1.0)).collect();
            params.insert("w", Tensor::from_vec(2, 3, init));
            for step in 0..50 {
                let mut tape = Tape::new();
                let bound = bind(&mut tape, &params, true);
                let w = bound.node("w");
                let t = tape.tanh(w);
                let loss = tape.sq_norm(t);
                let loss = tape.add_scalar(loss, (step % 3) as f64 * 0.0);
                tape.backward(loss).unwrap();
                harvest(&tape, &bound, &mut params);
                optimizer_step(&mut params, 0.05, OptimKind::Adam).unwrap();
            }
            params.get("w").value.data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "bit-identical trajectories expected");
    }
}

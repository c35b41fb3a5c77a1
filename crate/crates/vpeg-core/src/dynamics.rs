//! Synthetic sequence datasets with controlled motion structure: a
//! deterministic bouncing point, a stochastic bouncing point that redraws
//! direction and speed at every wall hit, and parametric action templates
//! whose futures are multi-modal given the context window.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream, uniform, unit_vector, Domain};
use crate::tensor::Tensor;

pub const SPEED_LO: f64 = 0.05;
pub const SPEED_HI: f64 = 0.15;
/// Per-element observation noise on action-mode trajectories.
pub const ACTION_NOISE_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    DetBounce,
    StochBounce,
    ActionModes,
}

impl GeneratorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            GeneratorKind::DetBounce => "det_bounce",
            GeneratorKind::StochBounce => "stoch_bounce",
            GeneratorKind::ActionModes => "action_modes",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "det_bounce" => Some(GeneratorKind::DetBounce),
            "stoch_bounce" => Some(GeneratorKind::StochBounce),
            "action_modes" => Some(GeneratorKind::ActionModes),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One trajectory: `obs` holds one observation per row, T = M + H rows of
/// width d_obs + nuisance_dims. Positions (the first d_obs coordinates)
/// stay inside the unit box; nuisance coordinates are constant over time.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub id: u64,
    pub obs: Tensor,
    pub mode_label: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: GeneratorKind,
    /// Total sequences, train + test.
    pub count: usize,
    /// How many of `count` land in the test split.
    pub test_count: usize,
    /// Context length M.
    pub m_context: usize,
    /// Prediction horizon H.
    pub horizon: usize,
    /// Position dimensionality (before nuisance).
    pub d_obs: usize,
    pub nuisance_dims: usize,
    pub seed: u64,
    /// Action-mode datasets only: how many trajectory families exist.
    pub num_modes: u32,
    /// Modes placed exclusively in the test split.
    pub held_out_modes: Vec<u32>,
}

impl DatasetSpec {
    pub fn seq_len(&self) -> usize {
        self.m_context + self.horizon
    }

    pub fn obs_dim(&self) -> usize {
        self.d_obs + self.nuisance_dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::InvalidSpec(String::from("count must be >= 2")));
        }
        if self.test_count >= self.count {
            return Err(Error::InvalidSpec(format!(
                "test_count {} must be below count {}",
                self.test_count, self.count
            )));
        }
        if self.m_context < 1 {
            return Err(Error::InvalidSpec(String::from("context length must be >= 1")));
        }
        if self.d_obs < 1 {
            return Err(Error::InvalidSpec(String::from("d_obs must be >= 1")));
        }
        if self.kind == GeneratorKind::ActionModes {
            if self.num_modes < 2 {
                return Err(Error::InvalidSpec(format!(
                    "action_modes needs at least 2 modes, got {}",
                    self.num_modes
                )));
            }
            if self.num_modes as usize > 2 * self.d_obs {
                return Err(Error::InvalidSpec(format!(
                    "at most {} modes fit {} position dims",
                    2 * self.d_obs,
                    self.d_obs
                )));
            }
            for &m in &self.held_out_modes {
                if m >= self.num_modes {
                    return Err(Error::InvalidSpec(format!("held-out mode {m} out of range")));
                }
            }
            let active = self.num_modes as usize - self.held_out_modes.len();
            if active == 0 {
                return Err(Error::InvalidSpec(String::from(
                    "holding out every mode leaves nothing to train on",
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &Sequence> {
        self.sequences.iter().filter(|s| s.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Sequence> {
        self.sequences.iter().filter(|s| s.split == Split::Test)
    }

    pub fn by_id(&self, id: u64) -> Option<&Sequence> {
        self.sequences.iter().find(|s| s.id == id)
    }
}

/// Advance one coordinate by one step with specular reflection at 0 and 1.
/// Returns true when a wall was involved.
fn reflect_coord(p: &mut f64, v: &mut f64) -> bool {
    *p += *v;
    let mut bounced = false;
    while *p < 0.0 || *p > 1.0 {
        if *p < 0.0 {
            *p = -*p;
        } else {
            *p = 2.0 - *p;
        }
        *v = -*v;
        bounced = true;
    }
    bounced
}

/// One step of box dynamics. Flips velocity components on reflection and
/// reports which coordinates hit a wall this step.
pub(crate) fn reflect_advance(pos: &mut [f64], vel: &mut [f64]) -> Vec<usize> {
    let mut hits = Vec::new();
    for i in 0..pos.len() {
        if reflect_coord(&mut pos[i], &mut vel[i]) {
            hits.push(i);
        }
    }
    hits
}

/// Positions and per-step velocities for one deterministic bounce sequence.
/// `velocities[t]` is the velocity used to advance from step t to t+1.
pub fn simulate_det_bounce(spec: &DatasetSpec, id: u64) -> (Tensor, Tensor) {
    let t_len = spec.seq_len();
    let d = spec.d_obs;
    let mut rng = stream(spec.seed, Domain::SequenceGen, id);
    let mut pos: Vec<f64> = (0..d).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
    let dir = unit_vector(&mut rng, d);
    let speed = uniform(&mut rng, SPEED_LO, SPEED_HI);
    let mut vel: Vec<f64> = dir.iter().map(|x| x * speed).collect();

    let mut obs = Tensor::zeros(t_len, d);
    let mut vels = Tensor::zeros(t_len, d);
    for t in 0..t_len {
        obs.row_mut(t).copy_from_slice(&pos);
        vels.row_mut(t).copy_from_slice(&vel);
        reflect_advance(&mut pos, &mut vel);
    }
    (obs, vels)
}

/// Positions and velocities for one stochastic bounce sequence: every wall
/// hit redraws the direction (uniform over the hemisphere pointing back
/// into the box) and the speed (uniform in [SPEED_LO, SPEED_HI]).
pub fn simulate_stoch_bounce(spec: &DatasetSpec, id: u64) -> (Tensor, Tensor) {
    let t_len = spec.seq_len();
    let d = spec.d_obs;
    let mut rng = stream(spec.seed, Domain::SequenceGen, id);
    let mut pos: Vec<f64> = (0..d).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
    let dir = unit_vector(&mut rng, d);
    let speed = uniform(&mut rng, SPEED_LO, SPEED_HI);
    let mut vel: Vec<f64> = dir.iter().map(|x| x * speed).collect();

    let mut obs = Tensor::zeros(t_len, d);
    let mut vels = Tensor::zeros(t_len, d);
    for t in 0..t_len {
        obs.row_mut(t).copy_from_slice(&pos);
        vels.row_mut(t).copy_from_slice(&vel);
        let prev = pos.clone();
        let hits = reflect_advance(&mut pos, &mut vel);
        if !hits.is_empty() {
            let dir = unit_vector(&mut rng, d);
            let speed = uniform(&mut rng, SPEED_LO, SPEED_HI);
            vel = dir.iter().map(|x| x * speed).collect();
            // Point back into the box from each wall that was hit. The wall
            // side is read off the pre-step position plus the old heading.
            for &i in &hits {
                let outward_high = prev[i] > 0.5;
                if outward_high {
                    vel[i] = -vel[i].abs();
                } else {
                    vel[i] = vel[i].abs();
                }
            }
        }
    }
    (obs, vels)
}

/// Linear ramp that is zero throughout the context window and reaches one
/// at the final step, so trajectory families share context statistics and
/// only diverge over the prediction horizon.
pub fn mode_ramp(t: usize, m_context: usize, horizon: usize) -> f64 {
    if t + 1 <= m_context || horizon == 0 {
        0.0
    } else {
        (t + 1 - m_context) as f64 / horizon as f64
    }
}

/// Direction of a mode's divergence: axis m/2, sign alternating.
pub fn mode_direction(mode: u32, d_obs: usize) -> Vec<f64> {
    let mut dir = alloc::vec![0.0; d_obs];
    let axis = (mode / 2) as usize % d_obs;
    dir[axis] = if mode % 2 == 0 { 1.0 } else { -1.0 };
    dir
}

/// Per-sequence template parameters for an action-mode trajectory.
#[derive(Debug, Clone)]
pub struct ActionParams {
    pub center: Vec<f64>,
    pub amplitude: f64,
    /// Per-coordinate oscillation coefficients (sin, cos).
    pub wiggle: Vec<(f64, f64)>,
}

pub const ACTION_AMP_LO: f64 = 0.2;
pub const ACTION_AMP_HI: f64 = 0.3;
const ACTION_JITTER: f64 = 0.05;
const ACTION_WIGGLE: f64 = 0.03;

impl ActionParams {
    pub fn draw(rng: &mut ChaCha8Rng, d_obs: usize) -> ActionParams {
        let center = (0..d_obs)
            .map(|_| 0.5 + uniform(rng, -ACTION_JITTER, ACTION_JITTER))
            .collect();
        let amplitude = uniform(rng, ACTION_AMP_LO, ACTION_AMP_HI);
        let wiggle = (0..d_obs)
            .map(|_| {
                (
                    uniform(rng, -ACTION_WIGGLE, ACTION_WIGGLE),
                    uniform(rng, -ACTION_WIGGLE, ACTION_WIGGLE),
                )
            })
            .collect();
        ActionParams {
            center,
            amplitude,
            wiggle,
        }
    }

    /// Canonical parameters (no jitter, mid amplitude, no oscillation).
    pub fn canonical(d_obs: usize) -> ActionParams {
        ActionParams {
            center: alloc::vec![0.5; d_obs],
            amplitude: 0.5 * (ACTION_AMP_LO + ACTION_AMP_HI),
            wiggle: alloc::vec![(0.0, 0.0); d_obs],
        }
    }
}

/// Noise-free template value at step t for one mode.
pub fn action_template(
    mode: u32,
    params: &ActionParams,
    t: usize,
    m_context: usize,
    horizon: usize,
) -> Vec<f64> {
    let d = params.center.len();
    let t_len = m_context + horizon;
    let s = if t_len > 1 {
        t as f64 / (t_len - 1) as f64
    } else {
        0.0
    };
    let ramp = mode_ramp(t, m_context, horizon);
    let dir = mode_direction(mode, d);
    (0..d)
        .map(|k| {
            let (ws, wc) = params.wiggle[k];
            params.center[k]
                + params.amplitude * dir[k] * ramp
                + ws * libm::sin(core::f64::consts::TAU * s)
                + wc * (libm::cos(core::f64::consts::TAU * s) - 1.0)
        })
        .collect()
}

fn simulate_action(spec: &DatasetSpec, id: u64, mode: u32) -> Tensor {
    let t_len = spec.seq_len();
    let d = spec.d_obs;
    let mut rng = stream(spec.seed, Domain::SequenceGen, id);
    let params = ActionParams::draw(&mut rng, d);
    let mut obs = Tensor::zeros(t_len, d);
    for t in 0..t_len {
        let base = action_template(mode, &params, t, spec.m_context, spec.horizon);
        for k in 0..d {
            let noisy = base[k] + ACTION_NOISE_SIGMA * standard_normal(&mut rng);
            obs.set(t, k, noisy.clamp(0.0, 1.0));
        }
    }
    obs
}

/// Append `dims` coordinates that are constant over time within the
/// sequence, each drawn uniform in [-1, 1] from the (seed, id) stream.
pub fn attach_nuisance(seq: &Sequence, dims: usize, seed: u64) -> Sequence {
    if dims == 0 {
        return seq.clone();
    }
    let mut rng = stream(seed, Domain::Nuisance, seq.id);
    let values: Vec<f64> = (0..dims).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    let t_len = seq.obs.rows();
    let old_d = seq.obs.cols();
    let mut obs = Tensor::zeros(t_len, old_d + dims);
    for t in 0..t_len {
        obs.row_mut(t)[..old_d].copy_from_slice(seq.obs.row(t));
        obs.row_mut(t)[old_d..].copy_from_slice(&values);
    }
    Sequence {
        id: seq.id,
        obs,
        mode_label: seq.mode_label,
        split: seq.split,
    }
}

fn split_of(spec: &DatasetSpec, id: u64) -> Split {
    if (id as usize) < spec.count - spec.test_count {
        Split::Train
    } else {
        Split::Test
    }
}

/// Mode assignment: train ids cycle over the modes not held out, test ids
/// cycle over every mode, so held-out modes appear only in the test split.
fn mode_of(spec: &DatasetSpec, id: u64, split: Split) -> u32 {
    match split {
        Split::Train => {
            let active: Vec<u32> = (0..spec.num_modes)
                .filter(|m| !spec.held_out_modes.contains(m))
                .collect();
            active[id as usize % active.len()]
        }
        Split::Test => (id % spec.num_modes as u64) as u32,
    }
}

/// Generate the full dataset for a spec. Each sequence derives its stream
/// from (seed, id), so generation order never affects content.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut sequences = Vec::with_capacity(spec.count);
    for id in 0..spec.count as u64 {
        let split = split_of(spec, id);
        let (obs, mode_label) = match spec.kind {
            GeneratorKind::DetBounce => (simulate_det_bounce(spec, id).0, 0),
            GeneratorKind::StochBounce => (simulate_stoch_bounce(spec, id).0, 0),
            GeneratorKind::ActionModes => {
                let mode = mode_of(spec, id, split);
                (simulate_action(spec, id, mode), mode)
            }
        };
        let base = Sequence {
            id,
            obs,
            mode_label,
            split,
        };
        let seq = attach_nuisance(&base, spec.nuisance_dims, spec.seed);
        debug_assert!(seq.obs.is_finite());
        sequences.push(seq);
    }
    Ok(Dataset {
        spec: spec.clone(),
        sequences,
    })
}

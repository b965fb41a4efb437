//! Synthetic environments with a known transition-causality graph.
//!
//! States evolve as `s_t ~ N(h(s_{t-1}, a_{t-1}), diag(noise_var))` with
//! `s_1 ~ N(0, I)`. The mean map `h` only reads the parents of each output
//! coordinate, either through a single linear layer or through a per-output
//! three-layer sigmoid network whose first layer is masked by the graph.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CausalAdjacencyMatrix;
use crate::nn::sigmoid;
use crate::rng::{derive_seed, rng_from, stream, SimRng};

/// Number of discrete actions in the catalog.
pub const DEFAULT_CATALOG_SIZE: usize = 8;
/// Upper end of the noise variance range.
pub const MAX_NOISE_VAR: f64 = 0.1;
/// Raw linear weights are drawn from `[-8, 8]`.
pub const WEIGHT_RANGE: f64 = 8.0;
/// Raw weights below this magnitude are redrawn so every edge is detectable.
pub const MIN_WEIGHT_MAGNITUDE: f64 = 1.0;
/// Linear columns are rescaled so each state coordinate has this stationary
/// variance under uniformly random actions. Keeping it a small multiple of the
/// noise ceiling keeps every edge's signal well above the conditional-test noise
/// floor while the chain still forgets its `N(0, I)` start within a few steps.
pub const STATIONARY_VARIANCE: f64 = 0.25;
/// Largest admissible self-transition weight after rescaling.
pub const MAX_SELF_GAIN: f64 = 0.5;
/// Hidden width of the ground-truth nonlinear mean map.
pub const NONLINEAR_HIDDEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionKind {
    Linear,
    Nonlinear,
}

impl std::str::FromStr for TransitionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(TransitionKind::Linear),
            "nonlinear" => Ok(TransitionKind::Nonlinear),
            other => Err(Error::InvalidArgument(format!(
                "transition must be `linear` or `nonlinear`, got `{other}`"
            ))),
        }
    }
}

/// One output coordinate of the nonlinear mean map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedNet {
    /// `NONLINEAR_HIDDEN x (n + c)`; columns of non-parents are exactly zero.
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

impl MaskedNet {
    fn eval(&self, parents: &[usize], x: &[f64]) -> f64 {
        let h1: Vec<f64> = self
            .w1
            .iter()
            .zip(&self.b1)
            .map(|(row, b)| sigmoid(parents.iter().map(|&j| row[j] * x[j]).sum::<f64>() + b))
            .collect();
        let h2: Vec<f64> = self
            .w2
            .iter()
            .zip(&self.b2)
            .map(|(row, b)| sigmoid(row.iter().zip(&h1).map(|(w, h)| w * h).sum::<f64>() + b))
            .collect();
        self.w3.iter().zip(&h2).map(|(w, h)| w * h).sum::<f64>() + self.b3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Transition {
    /// `(n + c) x n` weights, zero wherever the graph has no edge.
    Linear { weights: Vec<Vec<f64>> },
    Nonlinear { nets: Vec<MaskedNet> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralChange {
    /// Transitions with `step_index >= at_step` use `spec`.
    pub at_step: u64,
    pub spec: EnvSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub n: usize,
    pub c: usize,
    pub edge_keep_prob: f64,
    pub transition_kind: TransitionKind,
    pub graph: CausalAdjacencyMatrix,
    pub transition: Transition,
    /// Diagonal of the noise covariance.
    pub noise_var: Vec<f64>,
    pub action_catalog: Vec<Vec<f64>>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub change: Option<Box<StructuralChange>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionSample {
    pub prev_state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub step_index: u64,
}

impl TransitionSample {
    /// Concatenated `(s_{t-1}, a_{t-1})`.
    pub fn input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.prev_state.len() + self.action.len());
        x.extend_from_slice(&self.prev_state);
        x.extend_from_slice(&self.action);
        x
    }
}

fn draw_graph(n: usize, c: usize, p: f64, rng: &mut SimRng) -> CausalAdjacencyMatrix {
    let mut g = CausalAdjacencyMatrix::empty(n, c);
    for i in 0..n {
        // Candidate causes of effect i are the rows at or below the diagonal;
        // redraw the column until it has at least one parent.
        loop {
            let mut any = false;
            for j in i..n + c {
                let keep = rng.random::<f64>() < p;
                g.set(j, i, keep);
                any |= keep;
            }
            if any {
                break;
            }
        }
    }
    g
}

fn draw_weight(rng: &mut SimRng, range: f64, min_magnitude: f64) -> f64 {
    loop {
        let w = rng.random_range(-range..=range);
        if w.abs() >= min_magnitude {
            return w;
        }
    }
}

fn linear_weights(
    graph: &CausalAdjacencyMatrix,
    noise_var: &[f64],
    catalog: &[Vec<f64>],
    rng: &mut SimRng,
) -> Vec<Vec<f64>> {
    let (n, causes) = (graph.n(), graph.causes());
    let mut w = vec![vec![0.0; n]; causes];
    for i in 0..n {
        for j in graph.parents(i) {
            w[j][i] = draw_weight(rng, WEIGHT_RANGE, MIN_WEIGHT_MAGNITUDE);
        }
    }
    // Coordinate i only depends on coordinates >= i, so columns can be fixed
    // from the last one backwards with everything they read already final.
    let action_cov = catalog_covariance(catalog);
    for i in (0..n).rev() {
        let raw: Vec<f64> = (0..causes).map(|j| w[j][i]).collect();
        let variance_at = |scale: f64, w: &mut Vec<Vec<f64>>| {
            for j in 0..causes {
                w[j][i] = raw[j] * scale;
            }
            stationary_variance(w, i, noise_var, &action_cov)
        };
        let cap = if raw[i] != 0.0 {
            MAX_SELF_GAIN / raw[i].abs()
        } else {
            f64::INFINITY
        };
        let mut hi = 1.0f64.min(cap);
        while hi < cap && variance_at(hi, &mut w) < STATIONARY_VARIANCE {
            hi = (2.0 * hi).min(cap);
        }
        let scale = if variance_at(hi, &mut w) <= STATIONARY_VARIANCE {
            hi
        } else {
            let mut lo = 0.0;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if variance_at(mid, &mut w) < STATIONARY_VARIANCE {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        variance_at(scale, &mut w);
    }
    w
}

/// Population covariance of the action catalog (actions are drawn uniformly).
fn catalog_covariance(catalog: &[Vec<f64>]) -> DMatrix<f64> {
    let k = catalog.len() as f64;
    let c = catalog[0].len();
    let mean: Vec<f64> = (0..c)
        .map(|d| catalog.iter().map(|a| a[d]).sum::<f64>() / k)
        .collect();
    DMatrix::from_fn(c, c, |p, q| {
        catalog
            .iter()
            .map(|a| (a[p] - mean[p]) * (a[q] - mean[q]))
            .sum::<f64>()
            / k
    })
}

/// Stationary variance of state coordinate `from` under the linear recursion.
///
/// Only coordinates `from..n` feed coordinate `from`, so the covariance is
/// solved on that block with Smith's doubling iteration. Unstable blocks
/// report infinity.
fn stationary_variance(
    w: &[Vec<f64>],
    from: usize,
    noise_var: &[f64],
    action_cov: &DMatrix<f64>,
) -> f64 {
    let n = noise_var.len();
    let c = action_cov.nrows();
    let d = n - from;
    let a = DMatrix::from_fn(d, d, |r, k| w[from + k][from + r]);
    let b = DMatrix::from_fn(d, c, |r, k| w[n + k][from + r]);
    let mut q = &b * action_cov * b.transpose();
    for r in 0..d {
        q[(r, r)] += noise_var[from + r];
    }
    if (0..d).any(|r| a[(r, r)].abs() >= 1.0) {
        return f64::INFINITY;
    }
    let mut p = q;
    let mut ak = a;
    for _ in 0..64 {
        p = &p + &ak * &p * ak.transpose();
        ak = &ak * &ak;
        if !p[(0, 0)].is_finite() || p[(0, 0)] > 1e12 {
            return f64::INFINITY;
        }
        if ak.amax() < 1e-18 {
            break;
        }
    }
    p[(0, 0)]
}

fn nonlinear_nets(graph: &CausalAdjacencyMatrix, rng: &mut SimRng) -> Vec<MaskedNet> {
    let (n, causes, hidden) = (graph.n(), graph.causes(), NONLINEAR_HIDDEN);
    (0..n)
        .map(|i| {
            let mask = graph.column_mask(i);
            let w1 = (0..hidden)
                .map(|_| {
                    (0..causes)
                        .map(|j| if mask[j] { draw_weight(rng, 2.0, 0.5) } else { 0.0 })
                        .collect()
                })
                .collect();
            let b1 = (0..hidden).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let scale = 2.0 / (hidden as f64).sqrt();
            let w2 = (0..hidden)
                .map(|_| {
                    (0..hidden)
                        .map(|_| rng.random_range(-scale..=scale))
                        .collect()
                })
                .collect();
            let b2 = (0..hidden).map(|_| rng.random_range(-0.5..=0.5)).collect();
            let raw: Vec<f64> = (0..hidden).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let total: f64 = raw.iter().map(|v| v.abs()).sum();
            // Output range is bounded by the total absolute output weight (= 2).
            let w3: Vec<f64> = raw.iter().map(|v| 2.0 * v / total).collect();
            let b3 = -0.5 * w3.iter().sum::<f64>();
            MaskedNet {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
            }
        })
        .collect()
}

/// Build a seeded synthetic environment.
pub fn generate_env(
    n: usize,
    c: usize,
    edge_keep_prob: f64,
    kind: TransitionKind,
    seed: u64,
) -> Result<EnvSpec> {
    generate_env_with_catalog(n, c, edge_keep_prob, kind, seed, DEFAULT_CATALOG_SIZE)
}

pub fn generate_env_with_catalog(
    n: usize,
    c: usize,
    edge_keep_prob: f64,
    kind: TransitionKind,
    seed: u64,
    catalog_size: usize,
) -> Result<EnvSpec> {
    if n == 0 || c == 0 {
        return Err(Error::InvalidArgument(format!(
            "environment needs n >= 1 and c >= 1, got n={n} c={c}"
        )));
    }
    if !(edge_keep_prob > 0.0 && edge_keep_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "edge_keep_prob must lie in (0, 1], got {edge_keep_prob}"
        )));
    }
    if catalog_size == 0 {
        return Err(Error::InvalidArgument("action catalog must be nonempty".into()));
    }
    let mut rng = rng_from(derive_seed(seed, stream::ENV_GEN));
    let graph = draw_graph(n, c, edge_keep_prob, &mut rng);
    let noise_var: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=MAX_NOISE_VAR)).collect();
    let action_catalog: Vec<Vec<f64>> = (0..catalog_size)
        .map(|_| (0..c).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let transition = match kind {
        TransitionKind::Linear => Transition::Linear {
            weights: linear_weights(&graph, &noise_var, &action_catalog, &mut rng),
        },
        TransitionKind::Nonlinear => Transition::Nonlinear {
            nets: nonlinear_nets(&graph, &mut rng),
        },
    };
    Ok(EnvSpec {
        n,
        c,
        edge_keep_prob,
        transition_kind: kind,
        graph,
        transition,
        noise_var,
        action_catalog,
        seed,
        change: None,
    })
}

/// `s_1 ~ N(0, I)`.
pub fn reset(spec: &EnvSpec, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(derive_seed(seed, stream::RESET));
    standard_normal_vec(spec.n, &mut rng)
}

fn standard_normal_vec<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Flip each entry of `graph` with probability `flip_prob`.
pub fn perturb_graph(
    graph: &CausalAdjacencyMatrix,
    flip_prob: f64,
    seed: u64,
) -> Result<CausalAdjacencyMatrix> {
    let mut rng = rng_from(derive_seed(seed, stream::PERTURB));
    graph.perturb(flip_prob, &mut rng)
}

impl EnvSpec {
    pub fn catalog_size(&self) -> usize {
        self.action_catalog.len()
    }

    /// The spec governing the transition recorded with `step_index`.
    pub fn active_at(&self, step_index: u64) -> &EnvSpec {
        match &self.change {
            Some(change) if step_index >= change.at_step => change.spec.active_at(step_index),
            _ => self,
        }
    }

    /// Noise-free mean `h(state, action)`.
    pub fn mean(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.n + self.c);
        x.extend_from_slice(state);
        x.extend_from_slice(action);
        match &self.transition {
            Transition::Linear { weights } => (0..self.n)
                .map(|i| {
                    self.graph
                        .parents(i)
                        .into_iter()
                        .map(|j| weights[j][i] * x[j])
                        .sum()
                })
                .collect(),
            Transition::Nonlinear { nets } => nets
                .iter()
                .enumerate()
                .map(|(i, net)| net.eval(&self.graph.parents(i), &x))
                .collect(),
        }
    }

    /// Sample one transition. `step_index` selects the active structure.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        action_index: usize,
        step_index: u64,
        rng: &mut R,
    ) -> Result<TransitionSample> {
        if state.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "state has length {}, environment expects {}",
                state.len(),
                self.n
            )));
        }
        let action = self
            .action_catalog
            .get(action_index)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "action index {action_index} outside catalog of size {}",
                    self.action_catalog.len()
                ))
            })?
            .clone();
        let active = self.active_at(step_index);
        let mean = active.mean(state, &action);
        let next_state = mean
            .iter()
            .zip(&active.noise_var)
            .map(|(m, v)| {
                let z: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * z
            })
            .collect();
        Ok(TransitionSample {
            prev_state: state.to_vec(),
            action,
            next_state,
            step_index,
        })
    }

    /// Attach a one-off structural change that swaps in a freshly drawn graph
    /// and mean map (same dimensions and action catalog) at `at_step`.
    pub fn with_structure_change(mut self, at_step: u64, seed: u64) -> Result<EnvSpec> {
        let mut attempt = 0u64;
        let replacement = loop {
            let candidate = generate_env_with_catalog(
                self.n,
                self.c,
                self.edge_keep_prob,
                self.transition_kind,
                derive_seed(seed, stream::STRUCTURE_CHANGE + attempt),
                self.action_catalog.len(),
            )?;
            if candidate.graph != self.graph {
                break candidate;
            }
            attempt += 1;
        };
        let replacement = EnvSpec {
            action_catalog: self.action_catalog.clone(),
            ..replacement
        };
        self.change = Some(Box::new(StructuralChange {
            at_step,
            spec: replacement,
        }));
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("cannot serialise env: {e}")))
    }

    pub fn from_json(s: &str) -> Result<EnvSpec> {
        serde_json::from_str(s).map_err(|e| Error::InvalidArgument(format!("bad env json: {e}")))
    }
}

/// A running environment instance with its own noise stream.
pub struct Env {
    spec: EnvSpec,
    rng: SimRng,
    state: Vec<f64>,
    steps: u64,
}

impl Env {
    pub fn new(spec: EnvSpec, seed: u64) -> Self {
        let state = vec![0.0; spec.n];
        Self {
            spec,
            rng: rng_from(derive_seed(seed, stream::ENV_NOISE)),
            state,
            steps: 0,
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// Global transition counter; continues across episodes.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn reset(&mut self, episode_seed: u64) -> &[f64] {
        self.state = reset(&self.spec, episode_seed);
        &self.state
    }

    pub fn step(&mut self, action_index: usize) -> Result<TransitionSample> {
        self.steps += 1;
        let sample = self
            .spec
            .step(&self.state, action_index, self.steps, &mut self.rng)?;
        self.state.clone_from(&sample.next_state);
        Ok(sample)
    }

    pub fn active_graph(&self) -> &CausalAdjacencyMatrix {
        &self.spec.active_at(self.steps).graph
    }
}

/// Roll out a uniformly random policy for `steps` transitions.
pub fn random_rollout(spec: &EnvSpec, steps: usize, seed: u64) -> Result<Vec<TransitionSample>> {
    let mut env = Env::new(spec.clone(), seed);
    env.reset(seed);
    let mut rng = rng_from(derive_seed(seed, stream::POLICY_ACT));
    (0..steps)
        .map(|_| {
            let a = rng.random_range(0..spec.catalog_size());
            env.step(a)
        })
        .collect()
}

//! Causally masked forward model with a sharing-decomposition layout.
//!
//! Every state coordinate `i` has its own head `theta_i`, while all heads share
//! the trunk `sigma`. Head `i` only sees the parents of `s_{i,t}`: the trunk is
//! evaluated once per head on `D_i * (s_{t-1}, a_{t-1})`. The training loss is
//! `0.5 * ||s_hat - s||^2` per sample.

use serde::{Deserialize, Serialize};

use crate::env::TransitionSample;
use crate::error::{Error, Result};
use crate::graph::CausalAdjacencyMatrix;
use crate::nn::{Activation, Adam, Dense, Mlp, MlpCache};
use crate::rng::rng_from;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub n: usize,
    pub c: usize,
    /// Trunk widths; empty means the trunk is the identity map.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Arch {
    /// One linear layer per head on the masked input.
    pub fn linear(n: usize, c: usize) -> Self {
        Self {
            n,
            c,
            hidden: Vec::new(),
            activation: Activation::Identity,
        }
    }

    pub fn mlp(n: usize, c: usize, hidden: Vec<usize>, activation: Activation) -> Self {
        Self {
            n,
            c,
            hidden,
            activation,
        }
    }

    /// Trunk of widths 32 and 8.
    pub fn default_mlp(n: usize, c: usize, activation: Activation) -> Self {
        Self::mlp(n, c, vec![32, 8], activation)
    }

    pub fn input_width(&self) -> usize {
        self.n + self.c
    }

    pub fn head_input_width(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.n + self.c)
    }

    /// Closed-form parameter count `|sigma| + n * |theta_i|`.
    pub fn param_count(&self) -> usize {
        let mut sizes = vec![self.input_width()];
        sizes.extend(&self.hidden);
        let trunk: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        trunk + self.n * (self.head_input_width() + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModelParams {
    pub arch: Arch,
    /// `sigma`: every layer except the last.
    pub shared: Mlp,
    /// `theta_1 .. theta_n`: one scalar-output layer per state coordinate.
    pub heads: Vec<Dense>,
}

impl WorldModelParams {
    pub fn init(arch: &Arch, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let shared = if arch.hidden.is_empty() {
            Mlp::identity()
        } else {
            let mut sizes = vec![arch.input_width()];
            sizes.extend(&arch.hidden);
            Mlp::new(&sizes, arch.activation, false, &mut rng)
        };
        let heads = (0..arch.n)
            .map(|_| Dense::init(arch.head_input_width(), 1, &mut rng))
            .collect();
        Self {
            arch: arch.clone(),
            shared,
            heads,
        }
    }

    pub fn shared_len(&self) -> usize {
        self.shared.num_params()
    }

    pub fn head_len(&self) -> usize {
        self.arch.head_input_width() + 1
    }

    pub fn num_params(&self) -> usize {
        self.shared_len() + self.heads.len() * self.head_len()
    }

    /// Canonical flattening: trunk layers in order, then heads in order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.shared.write_params(&mut out);
        for head in &self.heads {
            head.write_params(&mut out);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut rest = self.shared.read_params(flat);
        for head in &mut self.heads {
            rest = head.read_params(rest);
        }
        Ok(())
    }

    /// Offset of head `i` inside the flat vector.
    pub fn head_offset(&self, i: usize) -> usize {
        self.shared_len() + i * self.head_len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerMode {
    #[default]
    Adam,
    Sgd,
}

/// Which parameters a per-sample gradient covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GradientSource {
    #[default]
    Full,
    /// Heads only (`theta_i`), a cheaper proxy for large trunks.
    Heads,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub predicted: Vec<f64>,
    pub target: Vec<f64>,
    pub per_dim_error: Vec<f64>,
    pub total_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    params: WorldModelParams,
    /// `None` is the unmasked dense ablation: the trunk runs once per sample.
    mask: Option<CausalAdjacencyMatrix>,
    optimizer: OptimizerMode,
    adam: Adam,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    arch: Arch,
    shared: Mlp,
    heads: Vec<Dense>,
    mask: Option<CausalAdjacencyMatrix>,
}

/// Seeded causal world model.
pub fn init_model(mask: &CausalAdjacencyMatrix, arch: &Arch, seed: u64) -> Result<WorldModel> {
    WorldModel::new(WorldModelParams::init(arch, seed), Some(mask.clone()))
}

impl WorldModel {
    pub fn new(params: WorldModelParams, mask: Option<CausalAdjacencyMatrix>) -> Result<Self> {
        if let Some(m) = &mask {
            check_mask(&params.arch, m)?;
        }
        let adam = Adam::new(params.num_params());
        Ok(Self {
            params,
            mask,
            optimizer: OptimizerMode::Adam,
            adam,
        })
    }

    /// The non-causal ablation built from the same parameters.
    pub fn dense(params: WorldModelParams) -> Self {
        let adam = Adam::new(params.num_params());
        Self {
            params,
            mask: None,
            optimizer: OptimizerMode::Adam,
            adam,
        }
    }

    pub fn with_optimizer(mut self, mode: OptimizerMode) -> Self {
        self.optimizer = mode;
        self
    }

    pub fn params(&self) -> &WorldModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut WorldModelParams {
        &mut self.params
    }

    pub fn arch(&self) -> &Arch {
        &self.params.arch
    }

    /// The graph in force; the dense ablation reports the complete graph.
    pub fn mask(&self) -> CausalAdjacencyMatrix {
        self.mask
            .clone()
            .unwrap_or_else(|| CausalAdjacencyMatrix::full(self.arch().n, self.arch().c))
    }

    pub fn is_dense(&self) -> bool {
        self.mask.is_none()
    }

    /// Swap the input masks; every parameter and optimiser moment is kept.
    pub fn remask(&mut self, mask: &CausalAdjacencyMatrix) -> Result<()> {
        check_mask(&self.params.arch, mask)?;
        self.mask = Some(mask.clone());
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch().input_width() {
            return Err(Error::DimensionMismatch(format!(
                "model input has width {}, got {}",
                self.arch().input_width(),
                x.len()
            )));
        }
        Ok(())
    }

    fn masked_input(&self, x: &[f64], head: usize) -> Vec<f64> {
        match &self.mask {
            Some(m) => x
                .iter()
                .enumerate()
                .map(|(j, &v)| if m.get(j, head) { v } else { 0.0 })
                .collect(),
            None => x.to_vec(),
        }
    }

    /// Trunk caches, one per head (a single shared one for the dense ablation).
    fn trunk_passes(&self, x: &[f64]) -> Vec<MlpCache> {
        match &self.mask {
            Some(_) => (0..self.arch().n)
                .map(|i| self.params.shared.forward_cached(&self.masked_input(x, i)))
                .collect(),
            None => vec![self.params.shared.forward_cached(x)],
        }
    }

    fn cache_for<'a>(&self, caches: &'a [MlpCache], head: usize) -> &'a MlpCache {
        if caches.len() == 1 {
            &caches[0]
        } else {
            &caches[head]
        }
    }

    pub fn predict_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let caches = self.trunk_passes(x);
        Ok(self
            .params
            .heads
            .iter()
            .enumerate()
            .map(|(i, head)| {
                let mut out = [0.0];
                head.forward(self.cache_for(&caches, i).output(), &mut out);
                out[0]
            })
            .collect())
    }

    pub fn predict(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let mut x = state.to_vec();
        x.extend_from_slice(action);
        self.predict_input(&x)
    }

    pub fn record(&self, sample: &TransitionSample) -> Result<PredictionRecord> {
        let predicted = self.predict(&sample.prev_state, &sample.action)?;
        if sample.next_state.len() != predicted.len() {
            return Err(Error::DimensionMismatch("target length differs from n".into()));
        }
        let per_dim_error: Vec<f64> = predicted
            .iter()
            .zip(&sample.next_state)
            .map(|(p, t)| p - t)
            .collect();
        let total_loss = 0.5 * per_dim_error.iter().map(|e| e * e).sum::<f64>();
        Ok(PredictionRecord {
            predicted,
            target: sample.next_state.clone(),
            per_dim_error,
            total_loss,
        })
    }

    /// Loss of one sample; its gradient is added into `grad` (full layout).
    pub fn accumulate_gradient(
        &self,
        sample: &TransitionSample,
        grad: &mut [f64],
        source: GradientSource,
    ) -> Result<f64> {
        let x = sample.input();
        self.check_input(&x)?;
        if sample.next_state.len() != self.arch().n {
            return Err(Error::DimensionMismatch("target length differs from n".into()));
        }
        let caches = self.trunk_passes(&x);
        let shared_len = self.params.shared_len();
        let head_len = self.params.head_len();
        let mut loss = 0.0;
        for (i, head) in self.params.heads.iter().enumerate() {
            let cache = self.cache_for(&caches, i);
            let h = cache.output();
            let mut out = [0.0];
            head.forward(h, &mut out);
            let err = out[0] - sample.next_state[i];
            loss += 0.5 * err * err;
            let off = shared_len + i * head_len;
            head.backward(h, &[err], &mut grad[off..off + head_len], None);
            if source == GradientSource::Full && !self.params.shared.layers.is_empty() {
                let upstream: Vec<f64> = head.weights.iter().map(|w| err * w).collect();
                self.params
                    .shared
                    .backward(cache, &upstream, &mut grad[..shared_len]);
            }
        }
        Ok(loss)
    }

    /// Gradient of the single-sample loss, flattened in canonical order.
    pub fn sample_gradient(&self, sample: &TransitionSample) -> Result<Vec<f64>> {
        self.sample_gradient_from(sample, GradientSource::Full)
    }

    /// `Heads` restricts the vector to the head block of the canonical layout.
    pub fn sample_gradient_from(
        &self,
        sample: &TransitionSample,
        source: GradientSource,
    ) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.num_params()];
        self.accumulate_gradient(sample, &mut grad, source)?;
        if source == GradientSource::Heads {
            grad.drain(..self.params.shared_len());
        }
        Ok(grad)
    }

    /// Mean loss and mean gradient over `batch`.
    pub fn batch_gradient(&self, batch: &[TransitionSample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut grad = vec![0.0; self.params.num_params()];
        let mut loss = 0.0;
        for sample in batch {
            loss += self.accumulate_gradient(sample, &mut grad, GradientSource::Full)?;
        }
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((loss * scale, grad))
    }

    /// One optimiser step on the batch-mean loss; returns the pre-step loss.
    pub fn train_step(&mut self, batch: &[TransitionSample], lr: f64) -> Result<f64> {
        let (loss, grad) = self.batch_gradient(batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite world-model loss {loss}"
            )));
        }
        let mut flat = self.params.flat();
        match self.optimizer {
            OptimizerMode::Adam => self.adam.step(&mut flat, &grad, lr),
            OptimizerMode::Sgd => flat.iter_mut().zip(&grad).for_each(|(p, g)| *p -= lr * g),
        }
        self.params.set_flat(&flat)?;
        Ok(loss)
    }

    /// Mean loss over `dataset` without touching the parameters.
    pub fn evaluate(&self, dataset: &[TransitionSample]) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("empty evaluation set".into()));
        }
        let mut total = 0.0;
        for sample in dataset {
            total += self.record(sample)?.total_loss;
        }
        Ok(total / dataset.len() as f64)
    }

    /// Analytic input Jacobian `d s_hat_i / d x_j` (rows: outputs).
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let caches = self.trunk_passes(x);
        let mut scratch = vec![0.0; self.params.num_params()];
        let mask = self.mask();
        Ok(self
            .params
            .heads
            .iter()
            .enumerate()
            .map(|(i, head)| {
                let cache = self.cache_for(&caches, i);
                let through_trunk = self
                    .params
                    .shared
                    .backward(cache, &head.weights, &mut scratch);
                through_trunk
                    .iter()
                    .enumerate()
                    .map(|(j, &g)| if mask.get(j, i) { g } else { 0.0 })
                    .collect()
            })
            .collect())
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        let cp = Checkpoint {
            version: CHECKPOINT_VERSION,
            arch: self.params.arch.clone(),
            shared: self.params.shared.clone(),
            heads: self.params.heads.clone(),
            mask: self.mask.clone(),
        };
        serde_json::to_string(&cp)
            .map_err(|e| Error::InvalidArgument(format!("cannot serialise checkpoint: {e}")))
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(s)
            .map_err(|e| Error::InvalidArgument(format!("bad checkpoint: {e}")))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint version {}",
                cp.version
            )));
        }
        let params = WorldModelParams {
            arch: cp.arch,
            shared: cp.shared,
            heads: cp.heads,
        };
        if params.heads.len() != params.arch.n {
            return Err(Error::DimensionMismatch("head count differs from n".into()));
        }
        WorldModel::new(params, cp.mask)
    }
}

fn check_mask(arch: &Arch, mask: &CausalAdjacencyMatrix) -> Result<()> {
    if mask.n() != arch.n || mask.c() != arch.c {
        return Err(Error::DimensionMismatch(format!(
            "mask is ({}+{})x{}, model expects ({}+{})x{}",
            mask.n(),
            mask.c(),
            mask.n(),
            arch.n,
            arch.c,
            arch.n
        )));
    }
    Ok(())
}

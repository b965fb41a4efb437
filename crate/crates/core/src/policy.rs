//! Epsilon-greedy Double DQN over the discrete action catalog.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp};

/// Online Q-network: three fully connected layers with rectified-linear hidden units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    pub net: Mlp,
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, actions: usize, rng: &mut R) -> Self {
        Self {
            net: Mlp::new(&[inputs, hidden, hidden, actions], Activation::Relu, true, rng),
        }
    }

    pub fn q_values(&self, state: &[f64]) -> Vec<f64> {
        self.net.forward(state)
    }

    pub fn actions(&self) -> usize {
        self.net.layers.last().map_or(0, |l| l.outputs)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Uniform catalog index with probability `epsilon`, greedy otherwise.
pub fn policy_act<R: Rng + ?Sized>(
    qnet: &QNetwork,
    state: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in [0, 1], got {epsilon}"
        )));
    }
    let k = qnet.actions();
    if k == 0 {
        return Err(Error::InvalidArgument("Q-network has no actions".into()));
    }
    // Always draw the coin so the stream advances identically for any epsilon.
    let explore = rng.random::<f64>() < epsilon;
    if explore {
        Ok(rng.random_range(0..k))
    } else {
        Ok(argmax(&qnet.q_values(state)))
    }
}

/// Linear annealing from `start` to `end` over the first `span` steps.
pub fn epsilon_schedule(step: u64, span: u64, start: f64, end: f64) -> f64 {
    if span == 0 || step >= span {
        return end;
    }
    start + (end - start) * step as f64 / span as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Episode ended; no bootstrap from `next_state`.
    pub terminal: bool,
}

/// Fixed-capacity ring of experiences; the oldest entry is overwritten first.
#[derive(Clone, Debug, Default)]
pub struct ReplayMemory {
    capacity: usize,
    items: Vec<Experience>,
    next: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.next] = e;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn items(&self) -> &[Experience] {
        &self.items
    }

    /// `batch` entries drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Experience> {
        (0..batch)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DqnSettings {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Online updates between target-network copies.
    pub target_sync: u64,
}

/// Online and target networks with their optimiser.
#[derive(Clone, Debug)]
pub struct DoubleDqn {
    pub online: QNetwork,
    pub target: QNetwork,
    pub settings: DqnSettings,
    adam: Adam,
    updates: u64,
}

impl DoubleDqn {
    pub fn new(online: QNetwork, settings: DqnSettings) -> Self {
        let adam = Adam::new(online.net.num_params());
        Self {
            target: online.clone(),
            online,
            settings,
            adam,
            updates: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Double-Q target: the online net picks the next action, the target net scores it.
    pub fn td_target(&self, e: &Experience) -> f64 {
        if e.terminal || self.settings.gamma == 0.0 {
            return e.reward;
        }
        let a_star = argmax(&self.online.q_values(&e.next_state));
        e.reward + self.settings.gamma * self.target.q_values(&e.next_state)[a_star]
    }

    /// One gradient step on the mean squared TD error of `batch`; returns that
    /// error before the step.
    pub fn update_on(&mut self, batch: &[&Experience]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty replay batch".into()));
        }
        let mut grad = vec![0.0; self.online.net.num_params()];
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for e in batch {
            let y = self.td_target(e);
            let cache = self.online.net.forward_cached(&e.state);
            let q = cache.output();
            if e.action >= q.len() {
                return Err(Error::InvalidArgument(format!(
                    "action {} outside catalog of {}",
                    e.action,
                    q.len()
                )));
            }
            let diff = q[e.action] - y;
            loss += 0.5 * diff * diff * scale;
            let mut grad_out = vec![0.0; q.len()];
            grad_out[e.action] = diff * scale;
            self.online.net.backward(&cache, &grad_out, &mut grad);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!("non-finite TD loss {loss}")));
        }
        let mut flat = self.online.net.params();
        self.adam.step(&mut flat, &grad, self.settings.lr);
        self.online.net.read_params(&flat);
        self.updates += 1;
        if self.updates % self.settings.target_sync.max(1) == 0 {
            self.target = self.online.clone();
        }
        Ok(loss)
    }

    /// Sample a batch from `memory` and update; `None` until a full batch is stored.
    pub fn policy_update<R: Rng + ?Sized>(
        &mut self,
        memory: &ReplayMemory,
        rng: &mut R,
    ) -> Result<Option<f64>> {
        if memory.len() < self.settings.batch_size {
            return Ok(None);
        }
        let batch = memory.sample(self.settings.batch_size, rng);
        self.update_on(&batch).map(Some)
    }
}

//! Intrinsic rewards and the exploration loop.
//!
//! Each step the agent acts, the world model's prediction error on the new
//! transition becomes the prediction reward, the model trains on a minibatch
//! of everything gathered so far, and the change of its held-out loss becomes
//! the active reward. Every `period` steps the structure is re-estimated from a
//! coreset of the buffer and the model is remasked.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GraphMode, RewardVariant};
use crate::coreset::{select_topk_with, CoresetOptions};
use crate::discovery::{graph_metrics, timelagged_pc_with, DiscoveryReport, GraphMetrics, PcOptions};
use crate::env::{generate_env_with_catalog, perturb_graph, random_rollout, Env, EnvSpec, TransitionSample};
use crate::error::{Error, Result};
use crate::graph::CausalAdjacencyMatrix;
use crate::kci::KciOptions;
use crate::policy::{epsilon_schedule, policy_act, DoubleDqn, DqnSettings, Experience, QNetwork, ReplayMemory};
use crate::rng::{derive_seed, rng_from, stream, SimRng};
use crate::trace::{CsvTraceWriter, ExperimentTrace, TraceMetadata, TraceRecord};
use crate::world_model::{WorldModel, WorldModelParams};

/// Floor on held-out residual variances used by the likelihood reward.
pub const MIN_VARIANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub prediction_reward: f64,
    pub active_reward: f64,
    pub combined: f64,
    pub eta: f64,
    pub beta: f64,
}

impl RewardBreakdown {
    pub fn new(prediction_reward: f64, active_reward: f64, eta: f64, beta: f64) -> Self {
        Self {
            prediction_reward,
            active_reward,
            combined: combined_reward(prediction_reward, active_reward, beta),
            eta,
            beta,
        }
    }
}

/// `eta / 2` times the squared prediction error.
pub fn prediction_reward(predicted: &[f64], actual: &[f64], eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be > 0, got {eta}")));
    }
    if predicted.len() != actual.len() {
        return Err(Error::DimensionMismatch(
            "prediction and observation differ in length".into(),
        ));
    }
    let sq: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok(0.5 * eta * sq)
}

/// Improvement of the held-out loss across one model update.
pub fn active_reward(prev_eval: f64, curr_eval: f64) -> f64 {
    prev_eval - curr_eval
}

pub fn combined_reward(r_i: f64, r_a: f64, beta: f64) -> f64 {
    r_i + beta * r_a
}

/// Diagonal Gaussian negative log-likelihood (without the constant) and its reward.
pub fn nll_loss_and_reward(
    mean: &[f64],
    variance: &[f64],
    actual: &[f64],
    eta: f64,
) -> Result<(f64, f64)> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be > 0, got {eta}")));
    }
    if mean.len() != actual.len() || variance.len() != actual.len() {
        return Err(Error::DimensionMismatch(
            "mean, variance and observation differ in length".into(),
        ));
    }
    let mut loss = 0.0;
    for ((m, v), a) in mean.iter().zip(variance).zip(actual) {
        if !(*v > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "variance must be positive, got {v}"
            )));
        }
        loss += (a - m) * (a - m) / (2.0 * v) + 0.5 * v.ln();
    }
    Ok((loss, 0.5 * eta * loss))
}

/// Mean held-out loss plus the per-dimension residual variance.
#[derive(Clone, Debug, PartialEq)]
pub struct HoldoutEval {
    pub loss: f64,
    pub residual_variance: Vec<f64>,
}

pub fn evaluate_holdout(model: &WorldModel, holdout: &[TransitionSample]) -> Result<HoldoutEval> {
    if holdout.is_empty() {
        return Err(Error::InvalidArgument("empty held-out set".into()));
    }
    let n = model.arch().n;
    let mut loss = 0.0;
    let mut var = vec![0.0; n];
    for s in holdout {
        let rec = model.record(s)?;
        loss += rec.total_loss;
        var.iter_mut()
            .zip(&rec.per_dim_error)
            .for_each(|(v, e)| *v += e * e);
    }
    let scale = 1.0 / holdout.len() as f64;
    var.iter_mut().for_each(|v| *v = (*v * scale).max(MIN_VARIANCE));
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite held-out loss {loss}")));
    }
    Ok(HoldoutEval {
        loss,
        residual_variance: var,
    })
}

/// One online structure estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryEvent {
    pub step: u64,
    pub estimate: CausalAdjacencyMatrix,
    pub metrics: GraphMetrics,
    pub time_ms: f64,
    pub selected: usize,
    pub buffer_len: usize,
}

/// A stretch of steps evaluated against one held-out set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub first_step: u64,
    pub last_step: u64,
    /// Held-out loss before the segment's first update.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub active_reward_sum: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub steps: u64,
    pub segments: Vec<Segment>,
    pub discoveries: Vec<DiscoveryEvent>,
    pub final_holdout_loss: f64,
    pub final_mask: CausalAdjacencyMatrix,
    pub final_graph_metrics: GraphMetrics,
    pub true_graph: CausalAdjacencyMatrix,
    pub wall_time_secs: f64,
}

pub struct ExplorationOutcome {
    pub trace: ExperimentTrace,
    pub summary: RunSummary,
    pub model: WorldModel,
    pub env: EnvSpec,
    /// Transition store gathered by the agent.
    pub buffer: Vec<TransitionSample>,
}

/// The environment a config describes, structural change included.
pub fn build_env(cfg: &ExperimentConfig) -> Result<EnvSpec> {
    let e = &cfg.env;
    let spec = generate_env_with_catalog(e.n, e.c, e.edge_keep_prob, e.transition, e.seed, e.catalog_size)?;
    match e.change_at {
        Some(at) => spec.with_structure_change(at, e.seed),
        None => Ok(spec),
    }
}

/// Trace label of a graph mode.
pub fn label_for(mode: GraphMode) -> &'static str {
    match mode {
        GraphMode::Discover => "causal",
        GraphMode::Truth => "truth",
        GraphMode::Dense => "dense",
    }
}

/// Runs the full loop in memory.
pub fn run_exploration(cfg: &ExperimentConfig) -> Result<ExplorationOutcome> {
    run_exploration_with_sink(cfg, None)
}

/// Runs the loop, streaming every record to `sink` as it is produced.
pub fn run_exploration_with_sink(
    cfg: &ExperimentConfig,
    mut sink: Option<&mut CsvTraceWriter>,
) -> Result<ExplorationOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let seed = cfg.env.seed;
    let spec = build_env(cfg)?;
    let truth_at = |step: u64| spec.active_at(step).graph.clone();
    let n = cfg.env.n;
    let beta = cfg.beta();
    let eta = cfg.explorer.eta;
    let mode = cfg.discovery.graph;

    let params = WorldModelParams::init(&cfg.arch(), derive_seed(seed, stream::MODEL_INIT));
    let initial_mask = match mode {
        GraphMode::Dense => None,
        GraphMode::Truth => Some(truth_at(0)),
        GraphMode::Discover if cfg.env.underestimation => {
            Some(perturb_graph(&truth_at(0), cfg.env.flip_prob, seed)?)
        }
        GraphMode::Discover => Some(CausalAdjacencyMatrix::full(n, cfg.env.c)),
    };
    let mut model = match initial_mask {
        Some(mask) => WorldModel::new(params, Some(mask))?,
        None => WorldModel::dense(params),
    }
    .with_optimizer(cfg.model.optimizer);

    let mut policy_rng = rng_from(derive_seed(seed, stream::POLICY_INIT));
    let qnet = QNetwork::new(n, cfg.explorer.policy.hidden, spec.catalog_size(), &mut policy_rng);
    let p = &cfg.explorer.policy;
    let mut dqn = DoubleDqn::new(
        qnet,
        DqnSettings {
            gamma: cfg.explorer.gamma,
            lr: p.lr,
            batch_size: p.batch_size,
            target_sync: p.target_sync,
        },
    );
    let mut memory = ReplayMemory::new(p.replay_capacity);
    let mut act_rng = rng_from(derive_seed(seed, stream::POLICY_ACT));
    let mut batch_rng = rng_from(derive_seed(seed, stream::MINIBATCH));
    let mut replay_rng = rng_from(derive_seed(seed, stream::REPLAY));

    let pc_opts = pc_options(cfg);

    let mut env = Env::new(spec.clone(), seed);
    let metadata = TraceMetadata::for_config(cfg, label_for(mode));
    let mut trace = ExperimentTrace::new(metadata);
    let mut buffer: Vec<TransitionSample> = Vec::new();
    let mut discoveries = Vec::new();
    let mut segments: Vec<Segment> = Vec::new();
    let total = cfg.total_steps();
    let eps_span = (cfg.explorer.policy.epsilon_fraction * total as f64).round() as u64;

    let mut holdout: Vec<TransitionSample> = Vec::new();
    let mut eval = HoldoutEval {
        loss: f64::NAN,
        residual_variance: Vec::new(),
    };
    let mut holdout_round = 0u64;

    for episode in 0..cfg.explorer.episodes {
        env.reset(derive_seed(derive_seed(seed, stream::RESET), episode));
        for t in 0..cfg.explorer.horizon {
            let step = episode * cfg.explorer.horizon + t + 1;
            let active = spec.active_at(step);

            // A fresh held-out set at every episode start and when the dynamics change.
            let changed = cfg.env.change_at == Some(step);
            if t == 0 || changed {
                let source = EnvSpec {
                    change: None,
                    ..active.clone()
                };
                holdout = random_rollout(
                    &source,
                    cfg.explorer.holdout_size,
                    derive_seed(derive_seed(seed, stream::HOLDOUT), holdout_round),
                )?;
                holdout_round += 1;
                eval = evaluate_holdout(&model, &holdout)?;
                segments.push(Segment {
                    first_step: step,
                    last_step: step,
                    initial_loss: eval.loss,
                    final_loss: eval.loss,
                    active_reward_sum: 0.0,
                });
            }
            if changed && mode == GraphMode::Truth {
                model.remask(&active.graph)?;
            }

            let state = env.state().to_vec();
            let epsilon = epsilon_schedule(
                step - 1,
                eps_span,
                p.epsilon_start,
                p.epsilon_end,
            );
            let action_index = policy_act(&dqn.online, &state, epsilon, &mut act_rng)?;
            let sample = env.step(action_index)?;
            let predicted = model.predict(&sample.prev_state, &sample.action)?;
            let r_i = match cfg.explorer.reward {
                RewardVariant::Mse => prediction_reward(&predicted, &sample.next_state, eta)?,
                RewardVariant::Nll => {
                    nll_loss_and_reward(&predicted, &eval.residual_variance, &sample.next_state, eta)?.1
                }
            };
            buffer.push(sample.clone());

            let mut discovery_time_ms = None;
            let mut selected_count = None;
            if mode == GraphMode::Discover && step % cfg.discovery.period == 0 {
                let began = Instant::now();
                let kappa = match cfg.discovery.kappa_fraction {
                    Some(f) => ((f * buffer.len() as f64).ceil() as usize).max(1),
                    None => cfg.discovery.kappa,
                };
                let data = discovery_input(cfg, &buffer, &model, kappa)?;
                let report = timelagged_pc_with(&data, &pc_opts)?;
                model.remask(&report.estimate)?;
                let ms = began.elapsed().as_secs_f64() * 1e3;
                let metrics = graph_metrics(&report.estimate, &truth_at(step), Some(&report.edge_scores))?;
                if cfg.output.timings {
                    discovery_time_ms = Some(ms);
                }
                selected_count = Some(data.len());
                discoveries.push(DiscoveryEvent {
                    step,
                    estimate: report.estimate,
                    metrics,
                    time_ms: ms,
                    selected: data.len(),
                    buffer_len: buffer.len(),
                });
            }

            let batch = draw_minibatch(&buffer, cfg.model.batch_size, &mut batch_rng);
            let train_loss = model.train_step(&batch, cfg.model.lr)?;
            let prev_loss = eval.loss;
            eval = evaluate_holdout(&model, &holdout)?;
            let r_a = active_reward(prev_loss, eval.loss);
            let reward = RewardBreakdown::new(r_i, r_a, eta, beta);
            let segment = segments.last_mut().expect("segment opened");
            segment.last_step = step;
            segment.final_loss = eval.loss;
            segment.active_reward_sum += r_a;

            memory.push(Experience {
                state,
                action: action_index,
                reward: reward.combined,
                next_state: sample.next_state.clone(),
                terminal: t + 1 == cfg.explorer.horizon,
            });
            dqn.policy_update(&memory, &mut replay_rng)?;

            let f1 = graph_metrics(&model.mask(), &truth_at(step), None)?.f1;
            let record = TraceRecord {
                step,
                episode,
                action_index,
                r_i,
                r_a,
                r: reward.combined,
                train_loss,
                holdout_loss: eval.loss,
                graph_f1: Some(f1),
                discovery_time_ms,
                selected_count,
            };
            if let Some(s) = sink.as_deref_mut() {
                s.write(&record)?;
            }
            trace.push(record)?;
        }
    }

    let last = total;
    let true_graph = truth_at(last);
    let final_mask = model.mask();
    let summary = RunSummary {
        label: trace.metadata.label.clone(),
        seed,
        config_hash: trace.metadata.config_hash.clone(),
        steps: total,
        segments,
        discoveries,
        final_holdout_loss: eval.loss,
        final_graph_metrics: graph_metrics(&final_mask, &true_graph, None)?,
        final_mask,
        true_graph,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(ExplorationOutcome {
        trace,
        summary,
        model,
        env: spec,
        buffer,
    })
}

/// Discovery settings a config describes.
pub fn pc_options(cfg: &ExperimentConfig) -> PcOptions {
    PcOptions {
        alpha: cfg.discovery.alpha,
        max_cond_size: cfg.discovery.max_cond_size,
        kci: KciOptions {
            epsilon: cfg.discovery.epsilon,
            null: cfg.discovery.null,
            permutations: cfg.discovery.permutations,
            seed: derive_seed(cfg.env.seed, stream::PERMUTATION),
            ..KciOptions::default()
        },
    }
}

/// The samples handed to the skeleton search: a coreset of `kappa` when
/// enabled, the whole buffer otherwise.
fn discovery_input(
    cfg: &ExperimentConfig,
    buffer: &[TransitionSample],
    model: &WorldModel,
    kappa: usize,
) -> Result<Vec<TransitionSample>> {
    if !cfg.discovery.coreset {
        return Ok(buffer.to_vec());
    }
    let sel = select_topk_with(
        buffer,
        model,
        &CoresetOptions {
            kappa,
            lambda: cfg.discovery.lambda,
            source: cfg.discovery.gradient_source,
        },
    )?;
    Ok(sel.indices.iter().map(|&i| buffer[i].clone()).collect())
}

/// `steps` minibatch updates on `buffer`; returns the last pre-step loss.
pub fn pretrain(
    model: &mut WorldModel,
    buffer: &[TransitionSample],
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty buffer".into()));
    }
    let mut rng = rng_from(derive_seed(seed, stream::MINIBATCH));
    let mut loss = f64::NAN;
    for _ in 0..steps {
        let batch = draw_minibatch(buffer, batch_size, &mut rng);
        loss = model.train_step(&batch, lr)?;
    }
    Ok(loss)
}

/// Result of one standalone structure estimate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OfflineDiscovery {
    pub report: DiscoveryReport,
    pub metrics: Option<GraphMetrics>,
    pub selected: usize,
    pub buffer_len: usize,
    /// Selection plus skeleton search.
    pub time_ms: f64,
}

/// Coreset selection (when enabled) and the skeleton search on a fixed buffer.
pub fn discover_offline(
    cfg: &ExperimentConfig,
    buffer: &[TransitionSample],
    model: &WorldModel,
    truth: Option<&CausalAdjacencyMatrix>,
) -> Result<OfflineDiscovery> {
    let began = Instant::now();
    let kappa = match cfg.discovery.kappa_fraction {
        Some(f) => ((f * buffer.len() as f64).ceil() as usize).max(1),
        None => cfg.discovery.kappa,
    };
    let data = discovery_input(cfg, buffer, model, kappa)?;
    let report = timelagged_pc_with(&data, &pc_options(cfg))?;
    let time_ms = began.elapsed().as_secs_f64() * 1e3;
    let metrics = truth
        .map(|t| graph_metrics(&report.estimate, t, Some(&report.edge_scores)))
        .transpose()?;
    Ok(OfflineDiscovery {
        report,
        metrics,
        selected: data.len(),
        buffer_len: buffer.len(),
        time_ms,
    })
}

/// `size` distinct samples, or the whole buffer when it is smaller.
fn draw_minibatch(buffer: &[TransitionSample], size: usize, rng: &mut SimRng) -> Vec<TransitionSample> {
    if buffer.len() <= size {
        return buffer.to_vec();
    }
    let mut idx = sample_indices(rng, buffer.len(), size).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| buffer[i].clone()).collect()
}

/// Uniform-random exploration data in the same layout the agent would gather.
pub fn random_buffer(spec: &EnvSpec, steps: usize, seed: u64) -> Result<Vec<TransitionSample>> {
    let mut env = Env::new(spec.clone(), seed);
    env.reset(derive_seed(derive_seed(seed, stream::RESET), 0));
    let mut rng = rng_from(derive_seed(seed, stream::POLICY_ACT));
    (0..steps)
        .map(|_| env.step(rng.random_range(0..spec.catalog_size())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        assert_eq!(prediction_reward(&[1.0, 2.0], &[1.0, 2.0], 0.1).unwrap(), 0.0);
        let r = prediction_reward(&[1.0, 1.0], &[0.0, 0.0], 0.1).unwrap();
        assert!((r - 0.1).abs() < 1e-15);
        let r3 = prediction_reward(&[1.0, 1.0], &[0.0, 0.0], 0.3).unwrap();
        assert!((r3 - 3.0 * r).abs() < 1e-15);
        assert!(prediction_reward(&[0.0], &[0.0], 0.0).is_err());
        assert!((active_reward(0.5, 0.3) - 0.2).abs() < 1e-15);
        assert_eq!(active_reward(0.4, 0.4), 0.0);
        assert_eq!(combined_reward(0.1, 0.2, 0.0), 0.1);
        assert!((combined_reward(0.1, 0.2, 0.5) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn nll_examples() {
        let (loss, _) = nll_loss_and_reward(&[1.0, 2.0], &[1.0, 1.0], &[1.0, 2.0], 0.1).unwrap();
        assert_eq!(loss, 0.0);
        let (loss, reward) = nll_loss_and_reward(&[0.0, 0.0], &[1.0, 1.0], &[1.0, -2.0], 0.1).unwrap();
        assert!((loss - 2.5).abs() < 1e-15);
        assert!((reward - 0.125).abs() < 1e-15);
        // (0.5^2 / (2*0.25) + 0.5 ln 0.25) + (1 / (2*4) + 0.5 ln 4) = 0.5 + 0.125
        let (loss, _) = nll_loss_and_reward(&[0.5, 1.0], &[0.25, 4.0], &[1.0, 2.0], 0.1).unwrap();
        assert!((loss - 0.625).abs() < 1e-12);
        assert!(nll_loss_and_reward(&[0.0], &[0.0], &[0.0], 0.1).is_err());
    }
}

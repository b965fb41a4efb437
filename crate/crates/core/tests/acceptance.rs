//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion numbers as
//! arguments to run a subset. A failing criterion prints `FAIL` but does not
//! fail the process unless `CAUSEX_ACCEPTANCE_STRICT=1` is set; an error while
//! running a criterion always exits nonzero.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use causex::config::{ExperimentConfig, GraphMode};
use causex::env::{random_rollout, TransitionSample};
use causex::explorer::{build_env, discover_offline, pretrain, random_buffer, run_exploration, ExplorationOutcome, Segment};
use causex::graph::CausalAdjacencyMatrix;
use causex::kci::kci_unconditional;
use causex::metrics::{moving_average, sample_efficiency, SMOOTHING_WINDOW};
use causex::nn::{Activation, Mlp};
use causex::rng::rng_from;
use causex::theory::{ensemble, summarize, CausalMode, DEFAULT_SAMPLES, DEFAULT_STEPS};
use causex::world_model::{Arch, WorldModel, WorldModelParams};
use causex::Result;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn default_run(seed: u64, mode: GraphMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.env.seed = seed;
    cfg.discovery.graph = mode;
    cfg
}

/// Every segment's active rewards against its loss drop; returns the worst gap.
fn telescoping_gap(segments: &[Segment]) -> f64 {
    segments
        .iter()
        .map(|s| (s.active_reward_sum - (s.initial_loss - s.final_loss)).abs())
        .fold(0.0, f64::max)
}

#[derive(Default)]
struct Runs {
    gaps: Vec<f64>,
}

impl Runs {
    fn record(&mut self, out: &ExplorationOutcome) {
        self.gaps.push(telescoping_gap(&out.summary.segments));
    }
}

fn online_discovery(runs: &mut Runs) -> Result<Verdict> {
    let (mut f1, mut precision, mut auc) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..10 {
        let out = run_exploration(&default_run(seed, GraphMode::Discover))?;
        runs.record(&out);
        let event = &out.summary.discoveries[0];
        f1.push(event.metrics.f1);
        precision.push(event.metrics.precision);
        auc.push(event.metrics.auc.unwrap_or(f64::NAN));
        eprintln!("  [1] seed {seed}: {:?}", event.metrics);
    }
    let (f, p, a) = (mean(&f1), mean(&precision), mean(&auc));
    Ok(verdict(
        f >= 0.83 && p >= 0.90 && a >= 0.95,
        format!("mean F1 {f:.3} (>= 0.83), precision {p:.3} (>= 0.90), AUC {a:.3} (>= 0.95) over 10 seeds"),
    ))
}

fn coreset_speedup() -> Result<Verdict> {
    let seeds = 0..3u64;
    let (mut f_core, mut f_all, mut speedups) = (Vec::new(), Vec::new(), Vec::new());
    for seed in seeds {
        let mut cfg = default_run(seed, GraphMode::Discover);
        let spec = build_env(&cfg)?;
        let buffer = random_buffer(&spec, 3000, seed)?;
        let params = WorldModelParams::init(&cfg.arch(), seed);
        let mut model = WorldModel::new(params, Some(CausalAdjacencyMatrix::full(spec.n, spec.c)))?;
        pretrain(&mut model, &buffer, 1000, cfg.model.batch_size, cfg.model.lr, seed)?;
        let core = discover_offline(&cfg, &buffer, &model, Some(&spec.graph))?;
        cfg.discovery.coreset = false;
        let all = discover_offline(&cfg, &buffer, &model, Some(&spec.graph))?;
        let (cm, am) = (core.metrics.unwrap(), all.metrics.unwrap());
        eprintln!(
            "  [2] seed {seed}: coreset {:.0} ms F1 {:.3}, all {:.0} ms F1 {:.3}",
            core.time_ms, cm.f1, all.time_ms, am.f1
        );
        f_core.push(cm.f1);
        f_all.push(am.f1);
        speedups.push(all.time_ms / core.time_ms);
    }
    let min_speedup = speedups.iter().copied().fold(f64::INFINITY, f64::min);
    let (fc, fa) = (mean(&f_core), mean(&f_all));
    Ok(verdict(
        min_speedup >= 5.0 && fc >= fa - 0.05,
        format!(
            "3000-sample buffer, 3 seeds: speedup min {min_speedup:.1}x (>= 5x), \
             coreset F1 {fc:.3} vs all-samples F1 {fa:.3} (>= {:.3})",
            fa - 0.05
        ),
    ))
}

fn theorem() -> Result<Verdict> {
    let start = Instant::now();
    let reports = ensemble(100, DEFAULT_SAMPLES, DEFAULT_STEPS, CausalMode::MaskedTrajectory, 2024)?;
    let s = summarize(&reports);
    let secs = start.elapsed().as_secs_f64();
    let a = s.contraction_all == s.instances;
    let b = s.pythagoras_max_rel_error <= 1e-10;
    let c = s.loss_bound_measured_all == s.instances && s.envelope_all == s.instances;
    let d = s.xi_le_one_all == s.instances;
    let xi_max = reports.iter().map(|r| r.xi_max).fold(f64::NEG_INFINITY, f64::max);
    Ok(verdict(
        a && b && c && d && secs < 120.0,
        format!(
            "100 instances: (a) contraction {}/100, (b) max Pythagorean error {:.1e}, \
             (c) measured-delta bound {}/100 and envelope {}/100, (d) xi <= 1 in {}/100 (max xi {xi_max:.3}); \
             density bound held in {}/100; {secs:.1} s",
            s.contraction_all,
            s.pythagoras_max_rel_error,
            s.loss_bound_measured_all,
            s.envelope_all,
            s.xi_le_one_all,
            s.loss_bound_density_all
        ),
    ))
}

/// Levels between the shared starting error and the worse of the two floors.
fn common_levels(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let lo = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let start = a[0].min(b[0]);
    let floor = lo(a).max(lo(b));
    (floor < start).then(|| {
        [0.75, 0.5, 0.25, 0.1]
            .iter()
            .map(|f| floor + f * (start - floor))
            .collect()
    })
}

fn causal_vs_dense(runs: &mut Runs) -> Result<Verdict> {
    let mut wins = 0;
    for seed in 0..10 {
        let truth = run_exploration(&default_run(seed, GraphMode::Truth))?;
        let dense = run_exploration(&default_run(seed, GraphMode::Dense))?;
        runs.record(&truth);
        runs.record(&dense);
        let a = truth.trace.column("holdout_loss")?;
        let b = dense.trace.column("holdout_loss")?;
        let levels = common_levels(
            &moving_average(&a, SMOOTHING_WINDOW),
            &moving_average(&b, SMOOTHING_WINDOW),
        );
        let mut steps = Vec::new();
        let won = match &levels {
            Some(levels) => levels.iter().all(|&thr| {
                let r = sample_efficiency(&a, &b, thr, SMOOTHING_WINDOW);
                steps.push((r.steps_a, r.steps_b));
                matches!((r.steps_a, r.steps_b), (Some(x), Some(y)) if x < y)
            }),
            None => false,
        };
        eprintln!("  [4] seed {seed}: crossings (causal, dense) {steps:?} -> {won}");
        wins += usize::from(won);
    }
    Ok(verdict(
        wins >= 8,
        format!("causal mask reached every common held-out level first in {wins}/10 seeds (>= 8)"),
    ))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn full_mask_degeneracy() -> Result<Verdict> {
    let mut all_equal = true;
    for seed in 0..5u64 {
        let mut cfg = default_run(seed, GraphMode::Discover);
        cfg.env.n = 5;
        cfg.env.c = 2;
        let spec = build_env(&cfg)?;
        let data = random_rollout(&spec, 400, seed)?;
        let params = WorldModelParams::init(&cfg.arch(), seed);
        let mut causal = WorldModel::new(params.clone(), Some(CausalAdjacencyMatrix::full(5, 2)))?;
        let mut dense = WorldModel::dense(params);
        for step in 0..200 {
            let batch = &data[(step * 7) % 300..(step * 7) % 300 + 64];
            let la = causal.train_step(batch, 1e-3)?;
            let lb = dense.train_step(batch, 1e-3)?;
            all_equal &= la.to_bits() == lb.to_bits();
        }
        all_equal &= bits(&causal.params().flat()) == bits(&dense.params().flat());
        for s in &data[300..] {
            all_equal &= bits(&causal.predict(&s.prev_state, &s.action)?)
                == bits(&dense.predict(&s.prev_state, &s.action)?);
        }

        // The whole loop: an all-ones mask that is never re-estimated against the dense ablation.
        let mut small = ExperimentConfig::default();
        small.env.seed = seed;
        small.explorer.horizon = 300;
        small.discovery.period = 10_000;
        let causal_run = run_exploration(&small)?;
        small.discovery.graph = GraphMode::Dense;
        let dense_run = run_exploration(&small)?;
        let strip = |o: &ExplorationOutcome| {
            o.trace
                .records
                .iter()
                .map(|r| (r.action_index, r.r.to_bits(), r.train_loss.to_bits(), r.holdout_loss.to_bits()))
                .collect::<Vec<_>>()
        };
        all_equal &= strip(&causal_run) == strip(&dense_run);
    }
    Ok(verdict(
        all_equal,
        "all-ones mask vs dense: 200 training steps, predictions and 300-step exploration traces compared bitwise over 5 seeds",
    ))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn gradient_checks() -> Result<Verdict> {
    let mut worst = 0.0f64;
    let mut masked_leak = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..20u64 {
        let mut rng = rng_from(1000 + seed);
        let n = rng.random_range(2..5);
        let c = rng.random_range(1..3);
        let mut mask = CausalAdjacencyMatrix::empty(n, c);
        for j in 0..n + c {
            for i in 0..n {
                mask.set(j, i, rng.random_bool(0.5));
            }
        }
        let arch = if seed % 4 == 0 {
            Arch::linear(n, c)
        } else {
            let act = [Activation::Tanh, Activation::Relu, Activation::Sigmoid][seed as usize % 3];
            Arch::mlp(n, c, vec![6, 4], act)
        };
        let model = WorldModel::new(WorldModelParams::init(&arch, seed), Some(mask.clone()))?;
        let batch: Vec<TransitionSample> = (0..4)
            .map(|k| TransitionSample {
                prev_state: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
                action: (0..c).map(|_| rng.sample(StandardNormal)).collect(),
                next_state: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
                step_index: k,
            })
            .collect();
        let (_, grad) = model.batch_gradient(&batch)?;
        let flat = model.params().flat();
        let h = 1e-6;
        for k in 0..flat.len() {
            let mut probe = model.clone();
            let mut p = flat.clone();
            p[k] += h;
            probe.params_mut().set_flat(&p)?;
            let up = probe.batch_gradient(&batch)?.0;
            p[k] -= 2.0 * h;
            probe.params_mut().set_flat(&p)?;
            let down = probe.batch_gradient(&batch)?.0;
            worst = worst.max(rel_err(grad[k], (up - down) / (2.0 * h)));
            checked += 1;
        }
        let x = batch[0].input();
        let jac = model.input_jacobian(&x)?;
        let base = model.predict_input(&x)?;
        for j in 0..n + c {
            let mut xp = x.clone();
            xp[j] += h;
            let up = model.predict_input(&xp)?;
            xp[j] -= 2.0 * h;
            let down = model.predict_input(&xp)?;
            for i in 0..n {
                if mask.get(j, i) {
                    worst = worst.max(rel_err(jac[i][j], (up[i] - down[i]) / (2.0 * h)));
                } else {
                    masked_leak = masked_leak
                        .max(jac[i][j].abs())
                        .max((up[i] - base[i]).abs())
                        .max((down[i] - base[i]).abs());
                }
                checked += 1;
            }
        }
    }
    // Policy network weights through its own backward pass.
    for seed in 0..5u64 {
        let mut rng = rng_from(2000 + seed);
        let net = Mlp::new(&[4, 8, 8, 3], Activation::Relu, true, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let w: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let loss = |m: &Mlp| m.forward(&x).iter().zip(&w).map(|(o, w)| o * w).sum::<f64>();
        let mut grad = vec![0.0; net.num_params()];
        net.backward(&net.forward_cached(&x), &w, &mut grad);
        let flat = net.params();
        let h = 1e-6;
        for k in 0..flat.len() {
            let mut probe = net.clone();
            let mut p = flat.clone();
            p[k] += h;
            probe.read_params(&p);
            let up = loss(&probe);
            p[k] -= 2.0 * h;
            probe.read_params(&p);
            let down = loss(&probe);
            worst = worst.max(rel_err(grad[k], (up - down) / (2.0 * h)));
            checked += 1;
        }
    }
    Ok(verdict(
        worst <= 1e-4 && masked_leak == 0.0,
        format!(
            "{checked} derivatives: worst relative error {worst:.1e} (<= 1e-4); \
             largest masked-input response {masked_leak:e} (must be 0)"
        ),
    ))
}

fn kci_calibration() -> Result<Verdict> {
    let m = 300;
    let trials = 500;
    let mut rng = rng_from(77);
    let mut rejections = 0;
    for _ in 0..trials {
        let x: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        rejections += usize::from(!kci_unconditional(&x, &y, 0.05)?.independent);
    }
    let type1 = rejections as f64 / trials as f64;
    let power_of = |f: fn(f64) -> f64, rng: &mut causex::rng::SimRng| -> Result<f64> {
        let mut hits = 0;
        for _ in 0..200 {
            let x: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
            let y: Vec<f64> = x
                .iter()
                .map(|&v| f(v) + rng.sample::<f64, _>(StandardNormal))
                .collect();
            hits += usize::from(!kci_unconditional(&x, &y, 0.05)?.independent);
        }
        Ok(hits as f64 / 200.0)
    };
    let cubic = power_of(|v| v * v * v, &mut rng)?;
    let square = power_of(|v| v * v, &mut rng)?;
    Ok(verdict(
        (type1 - 0.05).abs() <= 0.02 && cubic > 0.9 && square > 0.9,
        format!(
            "type-I {type1:.3} over 500 trials (0.05 +- 0.02); power {cubic:.3} on y = x^3 + noise, \
             {square:.3} on y = x^2 + noise (> 0.9)"
        ),
    ))
}

fn telescoping(runs: &mut Runs) -> Result<Verdict> {
    if runs.gaps.is_empty() {
        let mut cfg = default_run(0, GraphMode::Discover);
        cfg.explorer.episodes = 2;
        runs.record(&run_exploration(&cfg)?);
    }
    let worst = runs.gaps.iter().copied().fold(0.0, f64::max);
    Ok(verdict(
        worst <= 1e-8,
        format!(
            "{} completed runs: worst |sum r_a - (initial - final held-out loss)| = {worst:.1e} (<= 1e-8)",
            runs.gaps.len()
        ),
    ))
}

fn final_error(out: &ExplorationOutcome) -> Result<f64> {
    let h = out.trace.column("holdout_loss")?;
    Ok(mean(&h[h.len() - SMOOTHING_WINDOW..]))
}

fn underestimation(runs: &mut Runs) -> Result<Verdict> {
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let mut under = default_run(seed, GraphMode::Discover);
        under.env.underestimation = true;
        under.explorer.episodes = 3;
        let mut truth = default_run(seed, GraphMode::Truth);
        truth.explorer.episodes = 3;
        let u = run_exploration(&under)?;
        let t = run_exploration(&truth)?;
        runs.record(&u);
        runs.record(&t);
        let ratio = final_error(&u)? / final_error(&t)?;
        eprintln!(
            "  [9] seed {seed}: initial F1 {:.3}, discovered F1 {:?}, final error ratio {ratio:.3}",
            u.trace.records[0].graph_f1.unwrap_or(f64::NAN),
            u.summary.discoveries.iter().map(|d| (d.metrics.f1 * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
        ratios.push(ratio);
    }
    let worst = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    Ok(verdict(
        worst <= 0.10,
        format!(
            "final smoothed held-out error, perturbed start / true graph over 5 seeds x 3 episodes: {:?} (all within 10%)",
            ratios.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    ))
}

fn determinism() -> Result<Verdict> {
    let dir = tempfile::tempdir().map_err(|e| causex::Error::io("creating temp dir", e))?;
    let mut identical = true;
    for (i, mode) in [GraphMode::Discover, GraphMode::Dense].into_iter().enumerate() {
        let mut cfg = default_run(5, mode);
        cfg.env.underestimation = i == 0;
        let mut files = Vec::new();
        for k in 0..2 {
            let out = run_exploration(&cfg)?;
            let csv = dir.path().join(format!("{i}-{k}.csv"));
            let json = dir.path().join(format!("{i}-{k}.json"));
            out.trace.write_csv(&csv)?;
            out.trace.write_json(&json)?;
            let read = |p: &std::path::Path| std::fs::read(p).map_err(|e| causex::Error::io("reading trace", e));
            files.push((read(&csv)?, read(&json)?));
        }
        identical &= files[0] == files[1];
    }
    Ok(verdict(
        identical,
        "two invocations per config (discovery with perturbed start, dense ablation) wrote byte-identical CSV and JSON traces",
    ))
}

fn main() {
    let wanted: BTreeSet<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("CAUSEX_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let run = |k: u8| wanted.is_empty() || wanted.contains(&k);
    let mut runs = Runs::default();
    let mut lines: Vec<(u8, &str, Result<Verdict>, f64)> = Vec::new();
    let mut go = |k: u8, name: &'static str, f: &mut dyn FnMut(&mut Runs) -> Result<Verdict>| {
        if run(k) {
            let t = Instant::now();
            eprintln!("criterion {k}: {name} ...");
            let v = f(&mut runs);
            lines.push((k, name, v, t.elapsed().as_secs_f64()));
        }
    };
    go(1, "online discovery quality", &mut online_discovery);
    go(2, "coreset speedup", &mut |_| coreset_speedup());
    go(3, "theorem verification", &mut |_| theorem());
    go(4, "causal vs dense sample efficiency", &mut causal_vs_dense);
    go(5, "all-ones mask degeneracy", &mut |_| full_mask_degeneracy());
    go(6, "mask and gradient correctness", &mut |_| gradient_checks());
    go(7, "KCI calibration", &mut |_| kci_calibration());
    go(9, "underestimation recovery", &mut underestimation);
    go(8, "active-reward telescoping", &mut telescoping);
    go(10, "determinism", &mut |_| determinism());
    lines.sort_by_key(|l| l.0);

    let mut failed = 0;
    let mut errored = 0;
    for (k, name, v, secs) in &lines {
        match v {
            Ok(v) => {
                failed += usize::from(!v.pass);
                println!(
                    "criterion {k:>2} {}: {name}: {} [{secs:.0} s]",
                    if v.pass { "PASS" } else { "FAIL" },
                    v.detail
                );
            }
            Err(e) => {
                errored += 1;
                println!("criterion {k:>2} ERROR: {name}: {e}");
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria pass",
        lines.len() - failed - errored,
        lines.len()
    );
    if errored > 0 || (strict && failed > 0) {
        std::process::exit(1);
    }
}

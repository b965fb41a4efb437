use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use causex::config::{ExperimentConfig, OutputFormat};
use causex::env::{EnvSpec, TransitionSample};
use causex::explorer::{
    build_env, discover_offline, label_for, pretrain, random_buffer, run_exploration_with_sink,
};
use causex::graph::CausalAdjacencyMatrix;
use causex::metrics::{aggregate, first_crossing, sample_efficiency, AggregateSeries, EfficiencyReport};
use causex::theory::{ensemble, summarize, verify_instance, write_steps_csv, CausalMode};
use causex::trace::{CsvTraceWriter, ExperimentTrace, TraceMetadata};
use causex::world_model::{WorldModel, WorldModelParams};
use causex::{Error, Result};

use crate::{ConfigArgs, DiscoverArgs, MetricsArgs, TheoremArgs};

fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut overrides = args
        .overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::config(kv.clone(), "expected KEY=VALUE"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut flag = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            overrides.push((key.to_string(), v));
        }
    };
    flag("env.n", args.n.map(|v| v.to_string()));
    flag("env.c", args.c.map(|v| v.to_string()));
    flag("env.edge_keep_prob", args.edge_keep_prob.map(|v| format!("{v:?}")));
    flag("env.transition", args.transition.as_ref().map(|v| format!("\"{v}\"")));
    flag("env.seed", args.seed.map(|v| v.to_string()));
    ExperimentConfig::load(args.config.as_deref(), &overrides)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_text(path, &(text + "\n"))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn gen_env(args: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(args)?;
    let spec = build_env(&cfg)?;
    let path = out.unwrap_or_else(|| cfg.output_dir().join(format!("env-seed{}.json", cfg.env.seed)));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(&path, &(spec.to_json()? + "\n"))?;
    println!(
        "wrote {} ({} edges, density {:.3})",
        path.display(),
        spec.graph.edge_count(),
        spec.graph.density()
    );
    Ok(())
}

pub fn explore(args: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(args)?;
    let label = label_for(cfg.discovery.graph);
    let dir = out.unwrap_or_else(|| cfg.output_dir().join(format!("{label}-seed{}", cfg.env.seed)));
    create_dir(&dir)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;

    let wants = |f: OutputFormat| cfg.output.formats.contains(&f);
    let mut sink = if wants(OutputFormat::Csv) {
        Some(CsvTraceWriter::create(
            &dir.join("trace.csv"),
            &TraceMetadata::for_config(&cfg, label),
        )?)
    } else {
        None
    };
    let outcome = run_exploration_with_sink(&cfg, sink.as_mut())?;
    if let Some(s) = sink {
        s.finish()?;
    }
    if wants(OutputFormat::Json) {
        outcome.trace.write_json(&dir.join("trace.json"))?;
    }
    write_json(&dir.join("summary.json"), &outcome.summary)?;
    let s = &outcome.summary;
    println!(
        "{}: {} steps, final held-out loss {:.6}, graph F1 {:.3}, {} discoveries -> {}",
        s.label,
        s.steps,
        s.final_holdout_loss,
        s.final_graph_metrics.f1,
        s.discoveries.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DiscoverSummary<'a> {
    seed: u64,
    buffer_len: usize,
    selected: usize,
    coreset: bool,
    time_ms: f64,
    tests_run: usize,
    estimate: &'a CausalAdjacencyMatrix,
    truth: Option<&'a CausalAdjacencyMatrix>,
    edge_scores: &'a [Vec<f64>],
    metrics: Option<&'a causex::discovery::GraphMetrics>,
    low_confidence: &'a [(usize, usize)],
}

pub fn discover(args: &DiscoverArgs) -> Result<()> {
    let cfg = resolve(&args.config)?;
    let spec = match &args.env {
        Some(p) => EnvSpec::from_json(&read_text(p)?)?,
        None => build_env(&cfg)?,
    };
    let (buffer, truth) = match &args.buffer {
        Some(p) => {
            let text = read_text(p)?;
            let buf: Vec<TransitionSample> = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: p.clone(),
                message: e.to_string(),
            })?;
            // Without an environment file the source of the buffer is unknown.
            let truth = args.env.as_ref().map(|_| spec.graph.clone());
            (buf, truth)
        }
        None => (random_buffer(&spec, args.samples, cfg.env.seed)?, Some(spec.graph.clone())),
    };
    let params = WorldModelParams::init(&cfg.arch(), cfg.env.seed);
    let mut model = WorldModel::new(params, Some(CausalAdjacencyMatrix::full(spec.n, spec.c)))?
        .with_optimizer(cfg.model.optimizer);
    if cfg.discovery.coreset {
        pretrain(
            &mut model,
            &buffer,
            args.train_steps,
            cfg.model.batch_size,
            cfg.model.lr,
            cfg.env.seed,
        )?;
    }
    let found = discover_offline(&cfg, &buffer, &model, truth.as_ref())?;

    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir().join(format!("discover-seed{}", cfg.env.seed)));
    create_dir(&dir)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
    write_json(
        &dir.join("discovery.json"),
        &DiscoverSummary {
            seed: cfg.env.seed,
            buffer_len: found.buffer_len,
            selected: found.selected,
            coreset: cfg.discovery.coreset,
            time_ms: found.time_ms,
            tests_run: found.report.tests_run,
            estimate: &found.report.estimate,
            truth: truth.as_ref(),
            edge_scores: &found.report.edge_scores,
            metrics: found.metrics.as_ref(),
            low_confidence: &found.report.low_confidence,
        },
    )?;
    match &found.metrics {
        Some(m) => println!(
            "{} of {} samples, {:.1} ms: precision {:.3} recall {:.3} F1 {:.3} AUC {}",
            found.selected,
            found.buffer_len,
            found.time_ms,
            m.precision,
            m.recall,
            m.f1,
            m.auc.map_or("n/a".into(), |a| format!("{a:.3}"))
        ),
        None => println!(
            "{} of {} samples, {:.1} ms: {} edges",
            found.selected,
            found.buffer_len,
            found.time_ms,
            found.report.estimate.edge_count()
        ),
    }
    Ok(())
}

pub fn verify_theorem(args: &TheoremArgs) -> Result<()> {
    let mode: CausalMode = args.mode.parse()?;
    let dir = args.out.clone().unwrap_or_else(|| {
        ExperimentConfig::default()
            .output_dir()
            .join(format!("theorem-seed{}", args.seed))
    });
    let reports = match args.ensemble {
        Some(count) => {
            if args.alpha.is_some() {
                return Err(Error::InvalidArgument(
                    "--alpha applies to single instances only".into(),
                ));
            }
            ensemble(count, args.samples, args.steps, mode, args.seed)?
        }
        None => vec![verify_instance(
            args.n,
            args.c,
            args.samples,
            args.density,
            args.steps,
            mode,
            args.alpha,
            args.seed,
        )?],
    };
    create_dir(&dir)?;
    if args.ensemble.is_some() {
        write_json(&dir.join("reports.json"), &reports)?;
    } else {
        write_json(&dir.join("report.json"), &reports[0])?;
    }
    write_steps_csv(&reports, &dir.join("steps.csv"))?;
    let summary = summarize(&reports);
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "{} instances: contraction {}/{}, max Pythagorean error {:.2e}, \
         measured-delta bound {}/{}, envelope {}/{}, xi <= 1 {}/{}, density bound {}/{}",
        summary.instances,
        summary.contraction_all,
        summary.instances,
        summary.pythagoras_max_rel_error,
        summary.loss_bound_measured_all,
        summary.instances,
        summary.envelope_all,
        summary.instances,
        summary.xi_le_one_all,
        summary.instances,
        summary.loss_bound_density_all,
        summary.instances
    );
    Ok(())
}

fn find_traces(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut paths = entries
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_traces(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "trace.csv") {
            found.push(p);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Crossing {
    label: String,
    seed: u64,
    path: PathBuf,
    steps: Option<usize>,
}

#[derive(Serialize)]
struct PairedEfficiency {
    seed: u64,
    label_a: String,
    label_b: String,
    #[serde(flatten)]
    report: EfficiencyReport,
}

#[derive(Serialize)]
struct MetricsOutput {
    metric: String,
    window: usize,
    aggregates: BTreeMap<String, AggregateSeries>,
    crossings: Vec<Crossing>,
    efficiency: Vec<PairedEfficiency>,
}

pub fn metrics(args: &MetricsArgs) -> Result<()> {
    let mut paths = Vec::new();
    find_traces(&args.input_dir, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no trace.csv files under {}",
            args.input_dir.display()
        )));
    }
    let mut groups: BTreeMap<String, Vec<(PathBuf, ExperimentTrace)>> = BTreeMap::new();
    for p in paths {
        let t = ExperimentTrace::read_csv(&p)?;
        groups.entry(t.metadata.label.clone()).or_default().push((p, t));
    }
    let mut aggregates = BTreeMap::new();
    for (label, traces) in &groups {
        let only: Vec<ExperimentTrace> = traces.iter().map(|(_, t)| t.clone()).collect();
        aggregates.insert(label.clone(), aggregate(&only, &args.metric)?);
    }

    let mut crossings = Vec::new();
    let mut efficiency = Vec::new();
    if let Some(threshold) = args.threshold {
        for (label, traces) in &groups {
            for (p, t) in traces {
                crossings.push(Crossing {
                    label: label.clone(),
                    seed: t.metadata.seed,
                    path: p.clone(),
                    steps: first_crossing(&t.column(&args.metric)?, threshold, args.window),
                });
            }
        }
        let labels: Vec<&String> = groups.keys().collect();
        for (i, a) in labels.iter().enumerate() {
            for b in &labels[i + 1..] {
                for (_, ta) in &groups[*a] {
                    let Some((_, tb)) = groups[*b].iter().find(|(_, t)| t.metadata.seed == ta.metadata.seed) else {
                        continue;
                    };
                    efficiency.push(PairedEfficiency {
                        seed: ta.metadata.seed,
                        label_a: (*a).clone(),
                        label_b: (*b).clone(),
                        report: sample_efficiency(
                            &ta.column(&args.metric)?,
                            &tb.column(&args.metric)?,
                            threshold,
                            args.window,
                        ),
                    });
                }
            }
        }
    }

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.input_dir.join("metrics.json"));
    write_json(
        &out,
        &MetricsOutput {
            metric: args.metric.clone(),
            window: args.window,
            aggregates,
            crossings,
            efficiency,
        },
    )?;
    for (label, agg) in &groups {
        println!("{label}: {} traces", agg.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}

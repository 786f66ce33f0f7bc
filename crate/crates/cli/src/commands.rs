use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use moelab::losses::total_loss;
use moelab::moe::RoutingTrace;
use moelab::placement::{bucket_and_score, partition, CoActivationGraph, CostReport, Placement};
use moelab::theory::suites::{default_trials, run_suite, SUITES};
use moelab::theory::{cluster_agreement, coupling_coefficient, router_entropy};
use moelab::trainer::{conditional_activation_matrix, stability_fraction};
use moelab::{Graph, LossWeights, Tensor};
use serde::Serialize;
use serde_json::json;

use crate::{output_dir, prepare, run_training, CliError, Command, RunConfig};

type CmdResult = Result<i32, CliError>;

pub(crate) fn dispatch(cmd: Command, stdout: &mut dyn Write) -> CmdResult {
    match cmd {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out.as_deref(), stdout),
        Command::Check { suite, seed, trials, out } => cmd_check(&suite, seed, trials, out.as_deref(), stdout),
        Command::Analyze { traces, seed, out } => cmd_analyze(&traces, seed, out.as_deref(), stdout),
        Command::Place { trace, shards, penalty, out } => cmd_place(&trace, shards, penalty, out.as_deref(), stdout),
        Command::Bench { config, steps, out } => cmd_bench(&config, steps, out.as_deref(), stdout),
    }
}

fn json_line(stdout: &mut dyn Write, value: &impl Serialize) -> Result<(), CliError> {
    let line = serde_json::to_string(value).map_err(|e| CliError::Failure(e.to_string()))?;
    writeln!(stdout, "{line}")?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failure(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg.resolved())
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>, stdout: &mut dyn Write) -> CmdResult {
    let cfg = load_config(config, seed)?;
    let dir = output_dir(out, cfg.out.as_deref()).unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.emit())?;
    let started = Instant::now();
    let (_, corpus) = prepare(&cfg)?;
    corpus.save(dir.join("corpus.bin"))?;
    let result = run_training(&cfg, Some(&dir))?;
    write_json(&dir.join("timing.json"), &json!({ "train_seconds": started.elapsed().as_secs_f64() }))?;
    let last = result.metrics.last().expect("at least one evaluation");
    json_line(stdout, &json!({ "out": dir, "final": last }))?;
    Ok(0)
}

fn cmd_check(suite: &str, seed: u64, trials: Option<usize>, out: Option<&Path>, stdout: &mut dyn Write) -> CmdResult {
    let names: Vec<&str> = if suite == "all" {
        SUITES.to_vec()
    } else if SUITES.contains(&suite) {
        vec![suite]
    } else {
        return Err(CliError::Usage(format!("unknown suite {suite:?}; expected one of all, {}", SUITES.join(", "))));
    };
    let dir = output_dir(out, None);
    let mut lines = Vec::new();
    let mut violations = 0;
    for name in names {
        let summary = run_suite(name, trials.unwrap_or_else(|| default_trials(name)), seed)?;
        let report = summary.report();
        violations += summary.violations;
        json_line(stdout, &report)?;
        lines.push(serde_json::to_string(&report).map_err(|e| CliError::Failure(e.to_string()))?);
    }
    if let Some(dir) = dir {
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("invocation.json"), &json!({ "command": "check", "suite": suite, "seed": seed, "trials": trials }))?;
        fs::write(dir.join("check.jsonl"), lines.join("\n") + "\n")?;
    }
    Ok(if violations == 0 { 0 } else { 1 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalyzeReport {
    pub layers: usize,
    pub experts: usize,
    pub tokens: usize,
    /// Mean router entropy per layer.
    pub entropy: Vec<f64>,
    /// Top-1 coupling coefficient per adjacent layer pair.
    pub kappa: Vec<f64>,
    /// Percent agreement of balanced k-means clusters of router scores.
    pub cluster_agreement: Vec<f64>,
    /// Top-1 stability between consecutive traces.
    pub stability: Vec<f64>,
    /// Conditional activation matrix per adjacent layer pair.
    #[serde(skip)]
    pub heatmaps: Vec<Tensor>,
}

fn score_matrix(trace: &RoutingTrace, layer: usize) -> moelab::Result<Tensor> {
    let e = trace.experts();
    let mut data = Vec::with_capacity(trace.num_tokens() * e);
    for (s, t) in trace.positions() {
        data.extend(trace.scores(s, layer, t).iter().map(|&v| f64::from(v)));
    }
    Tensor::new(vec![trace.num_tokens(), e], data)
}

pub fn analyze_traces(traces: &[RoutingTrace], seed: u64) -> moelab::Result<AnalyzeReport> {
    let first = traces.first().ok_or_else(|| moelab::Error::InvalidArgument("no traces".into()))?;
    let (layers, experts) = (first.layers(), first.experts());
    let scores = (0..layers).map(|l| score_matrix(first, l)).collect::<moelab::Result<Vec<_>>>()?;
    let entropy =
        scores.iter().map(|m| (0..m.rows()).map(|i| router_entropy(m.row(i))).sum::<f64>() / m.rows().max(1) as f64).collect();
    let top1: Vec<Vec<usize>> =
        (0..layers).map(|l| first.positions().map(|(s, t)| first.top1(s, l, t)).collect()).collect();
    let mut kappa = Vec::new();
    let mut agreement = Vec::new();
    let mut heatmaps = Vec::new();
    for l in 0..layers.saturating_sub(1) {
        kappa.push(coupling_coefficient(&top1[l], &top1[l + 1], experts)?.0);
        agreement.push(cluster_agreement(&scores[l], &scores[l + 1], experts, seed)?);
        heatmaps.push(conditional_activation_matrix(first, l)?);
    }
    let stability = traces.windows(2).map(|w| stability_fraction(&w[0], &w[1])).collect::<moelab::Result<Vec<_>>>()?;
    Ok(AnalyzeReport {
        layers,
        experts,
        tokens: first.num_tokens(),
        entropy,
        kappa,
        cluster_agreement: agreement,
        stability,
        heatmaps,
    })
}

fn matrix_csv(m: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let cells: Vec<String> = m.row(r).iter().map(f64::to_string).collect();
        s += &cells.join(",");
        s.push('\n');
    }
    s
}

fn load_trace(path: &Path) -> Result<RoutingTrace, CliError> {
    RoutingTrace::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn cmd_analyze(paths: &[PathBuf], seed: u64, out: Option<&Path>, stdout: &mut dyn Write) -> CmdResult {
    let traces = paths.iter().map(|p| load_trace(p)).collect::<Result<Vec<_>, _>>()?;
    let report = analyze_traces(&traces, seed)?;
    if let Some(dir) = output_dir(out, None) {
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("invocation.json"), &json!({ "command": "analyze", "traces": paths, "seed": seed }))?;
        for (l, m) in report.heatmaps.iter().enumerate() {
            fs::write(dir.join(format!("heatmap_{}_{}.csv", l, l + 1)), matrix_csv(m))?;
        }
        write_json(&dir.join("analyze.json"), &report)?;
    }
    json_line(stdout, &report)?;
    Ok(0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlaceReport {
    pub placement: Placement,
    pub path_aware: CostReport,
    pub round_robin: CostReport,
}

pub fn place_trace(trace: &RoutingTrace, shards: usize, penalty: f64) -> moelab::Result<PlaceReport> {
    let graph = CoActivationGraph::build(trace)?;
    let placement = partition(&graph, shards)?;
    let rr = Placement::round_robin(trace.layers(), trace.experts(), shards)?;
    Ok(PlaceReport {
        path_aware: bucket_and_score(trace, &placement, penalty)?,
        round_robin: bucket_and_score(trace, &rr, penalty)?,
        placement,
    })
}

fn cmd_place(path: &Path, shards: usize, penalty: Option<f64>, out: Option<&Path>, stdout: &mut dyn Write) -> CmdResult {
    let trace = load_trace(path)?;
    let penalty = penalty.unwrap_or(moelab::placement::REMOTE_PENALTY);
    let report = place_trace(&trace, shards, penalty)?;
    if let Some(dir) = output_dir(out, None) {
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("invocation.json"), &json!({ "command": "place", "trace": path, "shards": shards, "penalty": penalty }))?;
        write_json(&dir.join("placement.json"), &report.placement)?;
        write_json(&dir.join("cost.json"), &json!({ "path_aware": report.path_aware, "round_robin": report.round_robin }))?;
    }
    json_line(stdout, &json!({ "path_aware": report.path_aware, "round_robin": report.round_robin }))?;
    Ok(0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub objective: String,
    pub ms_per_step: f64,
    /// `(t − t_lb) / t`
    pub overhead: f64,
}

/// Forward, loss and backward time per step for `lb`, `lb+sp`, `lb+cp` and
/// `lb+sp+cp`, using the config's weights for the enabled terms.
pub fn bench_objectives(cfg: &RunConfig, steps: usize) -> moelab::Result<Vec<BenchRow>> {
    let (mut model, corpus) = prepare(cfg)?;
    let n = cfg.train.batch_tokens;
    let stream: Vec<u32> = corpus.sequences.iter().flatten().copied().collect();
    let tokens: Vec<u32> = stream.iter().copied().cycle().take(n).collect();
    let targets: Vec<usize> = stream.iter().skip(1).map(|&t| t as usize).cycle().take(n).collect();
    let w = cfg.weights;
    let variants = [
        ("lb", LossWeights { sp: 0.0, cp: 0.0, ..w }),
        ("lb+sp", LossWeights { cp: 0.0, ..w }),
        ("lb+cp", LossWeights { sp: 0.0, ..w }),
        ("lb+sp+cp", w),
    ];
    let top_k = model.config().top_k;
    let mut times = Vec::new();
    for (name, weights) in variants {
        let mut step = || -> moelab::Result<()> {
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &tokens)?;
            let obj = total_loss(&mut g, &fwd, &targets, &weights, top_k)?;
            model.params.zero_grads();
            g.backward_into(obj.total, &mut model.params)?;
            Ok(())
        };
        step()?;
        let start = Instant::now();
        for _ in 0..steps.max(1) {
            step()?;
        }
        times.push((name, start.elapsed().as_secs_f64() * 1e3 / steps.max(1) as f64));
    }
    let base = times[0].1;
    Ok(times.into_iter().map(|(name, t)| BenchRow { objective: name.into(), ms_per_step: t, overhead: (t - base) / t }).collect())
}

fn cmd_bench(config: &Path, steps: usize, out: Option<&Path>, stdout: &mut dyn Write) -> CmdResult {
    let cfg = load_config(config, None)?;
    let rows = bench_objectives(&cfg, steps)?;
    let mut table = String::from("objective,ms_per_step,overhead\n");
    for r in &rows {
        table += &format!("{},{:.4},{:.4}\n", r.objective, r.ms_per_step, r.overhead);
    }
    if let Some(dir) = output_dir(out, cfg.out.as_deref()) {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.toml"), cfg.emit())?;
        fs::write(dir.join("bench.csv"), &table)?;
    }
    write!(stdout, "{table}")?;
    Ok(0)
}

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use moelab::moe::RoutingTrace;
use moelab::{LossWeights, MoeConfig, SynthConfig, TrainConfig};
use moelab_cli::{analyze_traces, place_trace, run, PlacementOptions, RunConfig};
use proptest::prelude::*;

const MINIMAL: &str = "seed = 3\n\n[model]\nexperts = 4\ntop_k = 2\nlayers = 2\nhidden = 8\nffn = 8\nvocab = 64\n\n\
[train]\nsteps = 50\nbatch_tokens = 64\nlr = 0.003\neval_every = 10\ncheckpoint_every = 25\n";

fn moelab(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(std::iter::once("moelab").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let output = Command::new(env!("CARGO_BIN_EXE_moelab")).args(["train", "--config", "/nonexistent/run.toml"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("/nonexistent/run.toml"));
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "seed = 1\n[model]\nexperts = 4\ntop_k = \"two\"\n").unwrap();
    let (code, _, err) = moelab(&["train", "--config", path_str(&path)]);
    assert_eq!(code, 2);
    assert!(err.contains("line 4"), "{err}");

    fs::write(&path, MINIMAL.replace("top_k = 2", "top_k = 5")).unwrap();
    let (code, _, err) = moelab(&["train", "--config", path_str(&path)]);
    assert_eq!(code, 2);
    assert!(err.contains("[model]"), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(moelab(&["frobnicate"]).0, 2);
    assert_eq!(moelab(&["place"]).0, 2);
    let (code, _, err) = moelab(&["check", "--suite", "prop9"]);
    assert_eq!(code, 2);
    assert!(err.contains("prop9"));
}

fn train_into(dir: &Path, config: &Path) -> String {
    let (code, out, err) = moelab(&["train", "--config", path_str(config), "--out", path_str(dir)]);
    assert_eq!(code, 0, "{err}");
    out
}

fn artifact_files(dir: &Path) -> Vec<String> {
    let mut files = Vec::new();
    for sub in ["", "checkpoints", "traces"] {
        for entry in fs::read_dir(dir.join(sub)).unwrap() {
            let p = entry.unwrap().path();
            if p.is_file() && p.file_name().unwrap() != "timing.json" {
                files.push(p.strip_prefix(dir).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    files.sort();
    files
}

#[test]
fn minimal_training_is_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, MINIMAL).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let start = Instant::now();
    let first = train_into(&a, &config);
    assert!(start.elapsed().as_secs() < 60);
    let second = train_into(&b, &config);
    assert_eq!(first.replace(path_str(&a), ""), second.replace(path_str(&b), ""));

    let files = artifact_files(&a);
    assert_eq!(files, artifact_files(&b));
    for f in ["metrics.csv", "config.toml", "corpus.bin", "checkpoints/step_000050.bin", "traces/final.bin"] {
        assert!(files.iter().any(|x| x == f), "{f} missing from {files:?}");
    }
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let echoed = RunConfig::parse(&fs::read_to_string(a.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed, RunConfig::parse(MINIMAL).unwrap().resolved());

    let c = dir.path().join("c");
    let (code, _, _) = moelab(&["train", "--config", path_str(&config), "--out", path_str(&c), "--seed", "4"]);
    assert_eq!(code, 0);
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(c.join("metrics.csv")).unwrap());
}

#[test]
fn output_dir_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from_env");
    let output = Command::new(env!("CARGO_BIN_EXE_moelab"))
        .args(["check", "--suite", "construct", "--trials", "5"])
        .env("OUTPUT_DIR", &target)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert!(target.join("check.jsonl").exists());
}

#[test]
fn check_streams_reports_and_passes() {
    let (code, out, _) = moelab(&["check", "--suite", "all", "--trials", "20"]);
    assert_eq!(code, 0);
    let reports: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports.len(), 9);
    assert!(reports.iter().all(|r| r["holds"] == true && r["lhs"] == 0.0));

    let (code, out, _) = moelab(&["check", "--suite", "prop1"]);
    assert_eq!(code, 0);
    let r: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(r["context"]["applicable"], 50);
    assert!(r["context"]["min_slack"].as_f64().unwrap() > 0.0);
}

fn identity_coupled_trace() -> RoutingTrace {
    let tokens: Vec<Vec<u32>> = (0..12).map(|s| vec![s; 6]).collect();
    let assign: Vec<Vec<Vec<usize>>> = (0..12usize).map(|s| (0..3).map(|_| (0..6).map(|t| (s + t) % 4).collect()).collect()).collect();
    RoutingTrace::from_top1(4, &tokens, &assign).unwrap()
}

#[test]
fn analyze_identity_trace_gives_diagonal_heatmap() {
    let trace = identity_coupled_trace();
    let report = analyze_traces(&[trace.clone(), trace.clone()], 0).unwrap();
    assert_eq!(report.kappa, vec![1.0, 1.0]);
    assert_eq!(report.cluster_agreement, vec![100.0, 100.0]);
    assert_eq!(report.stability, vec![1.0]);
    assert!(report.entropy.iter().all(|&h| h == 0.0));
    for m in &report.heatmaps {
        assert_eq!(*m, moelab::Tensor::identity(4));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    trace.save(&path).unwrap();
    let out = dir.path().join("an");
    let (code, _, _) = moelab(&["analyze", path_str(&path), "--out", path_str(&out)]);
    assert_eq!(code, 0);
    assert_eq!(fs::read_to_string(out.join("heatmap_1_2.csv")).unwrap().lines().next().unwrap(), "1,0,0,0");
}

#[test]
fn place_planted_blocks_is_fully_local() {
    // Sequences use experts {0,1} or {2,3} at every layer, relabelled per layer.
    let relabel = [[0, 1, 2, 3], [2, 0, 3, 1], [3, 2, 1, 0]];
    let tokens: Vec<Vec<u32>> = (0..20).map(|_| vec![0; 8]).collect();
    let assign: Vec<Vec<Vec<usize>>> = (0..20usize)
        .map(|s| {
            relabel.iter().enumerate().map(|(l, r)| (0..8).map(|t| r[2 * (s % 2) + (((t >> l) ^ s) & 1)]).collect()).collect()
        })
        .collect();
    let trace = RoutingTrace::from_top1(4, &tokens, &assign).unwrap();
    let report = place_trace(&trace, 2, 0.1).unwrap();
    assert_eq!(report.path_aware.local_fraction, 1.0);
    assert!(report.round_robin.local_fraction < 1.0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    trace.save(&path).unwrap();
    let out = dir.path().join("pl");
    let (code, stdout, _) = moelab(&["place", path_str(&path), "--shards", "2", "--out", path_str(&out)]);
    assert_eq!(code, 0);
    let r: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(r["path_aware"]["local_fraction"], 1.0);
    assert!(out.join("placement.json").exists() && out.join("cost.json").exists());
    assert_eq!(moelab(&["place", path_str(&path), "--shards", "3"]).0, 2);
}

#[test]
fn bench_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, MINIMAL).unwrap();
    let (code, out, _) = moelab(&["bench", "--config", path_str(&config), "--steps", "2"]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "objective,ms_per_step,overhead");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("lb,"));
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    (any::<u64>(), 1usize..4, 0.0f64..1.0, 0.0f64..0.1, prop::option::of("[a-z]{1,8}"), 1usize..500).prop_map(
        |(seed, k, stay, sp, out, steps)| RunConfig {
            seed,
            out: out.map(Into::into),
            plant_embeddings: seed % 2 == 0,
            model: MoeConfig { top_k: k, shared_expert: seed % 3 == 0, ..MoeConfig::default() },
            synth: SynthConfig { markov_stay: stay, seed, ..SynthConfig::default() },
            train: TrainConfig { steps, seed, ..TrainConfig::default() },
            weights: LossWeights { sp, ..LossWeights::default() },
            placement: PlacementOptions { shards: 4, remote_penalty: stay },
        },
    )
}

proptest! {
    #[test]
    fn config_echo_round_trips(cfg in arb_config()) {
        prop_assert_eq!(RunConfig::parse(&cfg.emit()).unwrap(), cfg);
    }
}

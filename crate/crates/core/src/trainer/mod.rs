//! Deterministic AdamW training with routing diagnostics and checkpoints.

mod checkpoint;
mod metrics;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use metrics::{
    conditional_activation_matrix, evaluate_metrics, expert_overlap_metric, per_expert_losses, stability_fraction,
    write_metrics_csv, MetricsRow,
};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossWeights};
use crate::moe::{expert_loads, MoeModel, RoutingTrace};
use crate::numeric::{Graph, Rng};
use crate::synth::Corpus;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Tokens per optimizer step, drawn independently from the training split.
    pub batch_tokens: usize,
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Share of steps with linear warmup; the rate is constant afterwards.
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default)]
    pub weights: LossWeights,
    pub eval_every: usize,
    /// 0 disables checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Trailing corpus sequences held out for evaluation and traces.
    #[serde(default = "default_eval_seqs")]
    pub eval_seqs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_warmup() -> f64 {
    0.05
}
fn default_eval_seqs() -> usize {
    16
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_tokens: 64,
            lr: 3e-3,
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
            warmup_frac: default_warmup(),
            weights: LossWeights::default(),
            eval_every: 10,
            checkpoint_every: 0,
            eval_seqs: default_eval_seqs(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_tokens == 0 || self.eval_every == 0 {
            return bad("batch_tokens and eval_every must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be finite and >= 0", self.lr));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas ({b1}, {b2}) must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("need eps > 0, weight_decay >= 0, warmup_frac in [0, 1]".into());
        }
        if self.eval_seqs == 0 {
            return bad("eval_seqs must be positive".into());
        }
        self.weights.validate()
    }

    fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).ceil() as usize
    }

    /// Learning rate for update `t` (0-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        let w = self.warmup_steps();
        if w == 0 {
            self.lr
        } else {
            self.lr * ((t + 1) as f64 / w as f64).min(1.0)
        }
    }
}

/// Routing of the held-out split after `step` updates.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub step: usize,
    pub trace: RoutingTrace,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: MoeModel,
    pub metrics: Vec<MetricsRow>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Held-out routing after the last update.
    pub final_trace: RoutingTrace,
}

/// Held-out inputs and next-token targets, one row block per sequence.
pub struct EvalSplit {
    pub sequences: Vec<(Vec<u32>, Vec<usize>)>,
}

impl EvalSplit {
    pub fn new(sequences: &[Vec<u32>]) -> Self {
        Self {
            sequences: sequences
                .iter()
                .map(|s| (s[..s.len() - 1].to_vec(), s[1..].iter().map(|&t| t as usize).collect()))
                .collect(),
        }
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.sequences.iter().flat_map(|(x, _)| x.iter().copied()).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.sequences.iter().flat_map(|(_, y)| y.iter().copied()).collect()
    }

    /// One trace step per held-out sequence.
    pub fn trace(&self, model: &MoeModel) -> Result<RoutingTrace> {
        let cfg = model.config();
        let batch = self.sequences.first().map_or(0, |(x, _)| x.len());
        let mut trace = RoutingTrace::new(batch, cfg.layers, cfg.experts, cfg.top_k)?;
        for (x, _) in &self.sequences {
            trace.push(model.evaluate(x)?.1)?;
        }
        Ok(trace)
    }
}

struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    fn new(model: &MoeModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, model: &mut MoeModel, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for ((p, m), v) in model.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data().to_vec();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                *w -= lr * (update + cfg.weight_decay * *w);
            }
        }
    }
}

fn write_dump(out: Option<&Path>, step: usize, detail: &str) {
    if let Some(dir) = out {
        let dump = serde_json::json!({ "step": step, "detail": detail });
        let _ = fs::write(dir.join("nan_dump.json"), dump.to_string());
    }
}

/// Trains `model` on `corpus`. The last `eval_seqs` sequences are held out.
/// With `out`, writes `metrics.csv`, `checkpoints/step_NNNNNN.bin` and
/// `traces/step_NNNNNN.bin` plus `traces/final.bin`.
pub fn train(mut model: MoeModel, corpus: &Corpus, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    let vocab = model.config().vocab;
    if corpus.allocation.region.len() != vocab {
        return Err(Error::Config(format!("corpus vocab {} differs from model vocab {vocab}", corpus.allocation.region.len())));
    }
    let n = corpus.sequences.len();
    if n <= cfg.eval_seqs {
        return Err(Error::Config(format!("{n} sequences leave nothing to train on after holding out {}", cfg.eval_seqs)));
    }
    let (train_seqs, eval_seqs) = corpus.sequences.split_at(n - cfg.eval_seqs);
    let eval = EvalSplit::new(eval_seqs);
    let (eval_x, eval_y) = (eval.tokens(), eval.targets());
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("traces"))?;
        if cfg.checkpoint_every > 0 {
            fs::create_dir_all(dir.join("checkpoints"))?;
        }
    }

    let mut rng = Rng::new(cfg.seed).derive(1);
    let mut adam = AdamW::new(&model);
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let top_k = model.config().top_k;
    let seq_len = train_seqs[0].len();

    for step in 0..=cfg.steps {
        if step % cfg.eval_every == 0 || step == cfg.steps {
            metrics.push(evaluate_metrics(&model, &eval_x, &eval_y, step)?);
        }
        if cfg.checkpoint_every > 0 && step > 0 && (step % cfg.checkpoint_every == 0 || step == cfg.steps) {
            let trace = eval.trace(&model)?;
            let mut path = None;
            if let Some(dir) = out {
                let p = dir.join("checkpoints").join(format!("step_{step:06}.bin"));
                save_checkpoint(&model, step, &p)?;
                trace.save(dir.join("traces").join(format!("step_{step:06}.bin")))?;
                path = Some(p);
            }
            checkpoints.push(CheckpointRecord { step, trace, path });
        }
        if step == cfg.steps {
            break;
        }

        let mut tokens = Vec::with_capacity(cfg.batch_tokens);
        let mut targets = Vec::with_capacity(cfg.batch_tokens);
        for _ in 0..cfg.batch_tokens {
            let s = &train_seqs[rng.below(train_seqs.len())];
            let p = rng.below(seq_len - 1);
            tokens.push(s[p]);
            targets.push(s[p + 1] as usize);
        }
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &tokens)?;
        let obj = total_loss(&mut g, &fwd, &targets, &cfg.weights, top_k)?;
        if !obj.breakdown.total.is_finite() {
            let detail = format!("non-finite loss at step {step}: {:?}", obj.breakdown);
            write_dump(out, step, &detail);
            return Err(Error::NonFinite(detail));
        }
        model.params.zero_grads();
        g.backward_into(obj.total, &mut model.params)?;
        if let Some(p) = model.params.iter().find(|p| !p.grad.all_finite()) {
            let detail = format!("non-finite gradient for {} at step {step}", p.name);
            write_dump(out, step, &detail);
            return Err(Error::NonFinite(detail));
        }
        adam.step(&mut model, cfg, cfg.lr_at(step));
        if model.config().aux_loss_free {
            let experts = model.config().experts;
            for (l, lo) in fwd.layers.iter().enumerate() {
                model.update_balancing_bias(l, &expert_loads(&lo.active, experts))?;
            }
        }
    }

    let final_trace = eval.trace(&model)?;
    if let Some(dir) = out {
        write_metrics_csv(&metrics, fs::File::create(dir.join("metrics.csv"))?)?;
        final_trace.save(dir.join("traces").join("final.bin"))?;
    }
    Ok(TrainOutput { model, metrics, checkpoints, final_trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_flat() {
        let cfg = TrainConfig { steps: 100, lr: 1.0, ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(0), 0.2);
        assert_eq!(cfg.lr_at(4), 1.0);
        assert_eq!(cfg.lr_at(50), 1.0);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TrainConfig { betas: (1.0, 0.9), ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { eval_every: 0, ..TrainConfig::default() }.validate().is_err());
    }
}

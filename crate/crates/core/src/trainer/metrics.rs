//! Evaluation rows and routing diagnostics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossWeights};
use crate::moe::{expert_loads, LayerOutput, MoeModel, RoutingTrace};
use crate::numeric::{cosine, log_sum_exp, Graph, Tensor};
use crate::theory::{coupling_coefficient, router_entropy};

/// One evaluation on the held-out split. Loss components are unweighted.
///
/// CSV columns: `step, task, lb, z, sp, cp, entropy_0 .. entropy_{L-1},
/// overlap, kappa_0_1 .. kappa_{L-2}_{L-1}, load_ratio`. `overlap` is empty
/// when `k = 1`; `load_ratio` is `inf` when some expert receives nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub task: f64,
    pub lb: f64,
    pub z: f64,
    pub sp: f64,
    pub cp: f64,
    /// Mean router entropy (nats) per layer.
    pub entropy: Vec<f64>,
    /// Mean `|cos|` between co-activated expert activations.
    pub overlap: Option<f64>,
    /// Top-1 coupling coefficient per adjacent layer pair.
    pub kappa: Vec<f64>,
    /// Worst layer's max/min expert load.
    pub load_ratio: f64,
}

impl MetricsRow {
    pub fn mean_entropy(&self) -> f64 {
        self.entropy.iter().sum::<f64>() / self.entropy.len().max(1) as f64
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut w: W) -> Result<()> {
    let Some(first) = rows.first() else {
        return Ok(());
    };
    let mut header: Vec<String> = ["step", "task", "lb", "z", "sp", "cp"].iter().map(|s| s.to_string()).collect();
    header.extend((0..first.entropy.len()).map(|l| format!("entropy_{l}")));
    header.push("overlap".into());
    header.extend((0..first.kappa.len()).map(|l| format!("kappa_{}_{}", l, l + 1)));
    header.push("load_ratio".into());
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        let mut cells = vec![r.step.to_string()];
        cells.extend([r.task, r.lb, r.z, r.sp, r.cp].iter().map(f64::to_string));
        cells.extend(r.entropy.iter().map(f64::to_string));
        cells.push(r.overlap.map_or(String::new(), |v| v.to_string()));
        cells.extend(r.kappa.iter().map(f64::to_string));
        cells.push(r.load_ratio.to_string());
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Mean `|cos(z_e, z_ν)|` over co-activated pairs of every token and layer;
/// `None` when no token has two active experts.
pub fn expert_overlap_metric(g: &Graph, layers: &[LayerOutput]) -> Option<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for lo in layers {
        for i in 0..lo.batch() {
            let k = lo.active[i].len();
            for a in 0..k {
                for b in a + 1..k {
                    total += cosine(lo.activation(g, i, a), lo.activation(g, i, b)).abs();
                    pairs += 1;
                }
            }
        }
    }
    (pairs > 0).then(|| total / pairs as f64)
}

/// Losses, entropy, overlap, coupling and load statistics on a fixed batch.
pub fn evaluate_metrics(model: &MoeModel, tokens: &[u32], targets: &[usize], step: usize) -> Result<MetricsRow> {
    let cfg = model.config();
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, tokens)?;
    let obj = total_loss(&mut g, &fwd, targets, &LossWeights::ZERO, cfg.top_k)?;
    let b = obj.breakdown;
    let entropy = fwd
        .layers
        .iter()
        .map(|lo| {
            let s = g.value(lo.scores);
            (0..s.rows()).map(|i| router_entropy(s.row(i))).sum::<f64>() / s.rows() as f64
        })
        .collect();
    let top1: Vec<Vec<usize>> = fwd.layers.iter().map(|lo| lo.active.iter().map(|a| a[0]).collect()).collect();
    let kappa = top1
        .windows(2)
        .map(|w| coupling_coefficient(&w[0], &w[1], cfg.experts).map(|(k, _)| k))
        .collect::<Result<Vec<_>>>()?;
    let load_ratio = fwd
        .layers
        .iter()
        .map(|lo| {
            let loads = expert_loads(&lo.active, cfg.experts);
            let max = *loads.iter().max().unwrap_or(&0) as f64;
            let min = *loads.iter().min().unwrap_or(&0) as f64;
            if min == 0.0 {
                f64::INFINITY
            } else {
                max / min
            }
        })
        .fold(0.0, f64::max);
    Ok(MetricsRow {
        step,
        task: b.task,
        lb: b.lb,
        z: b.z,
        sp: b.sp,
        cp: b.cp,
        entropy,
        overlap: expert_overlap_metric(&g, &fwd.layers),
        kappa,
        load_ratio,
    })
}

fn same_shape(a: &RoutingTrace, b: &RoutingTrace) -> Result<()> {
    let dims = |t: &RoutingTrace| (t.batch(), t.layers(), t.experts(), t.num_steps());
    if dims(a) != dims(b) {
        return Err(Error::invalid(format!("trace shapes differ: {:?} vs {:?}", dims(a), dims(b))));
    }
    if a.steps().iter().zip(b.steps()).any(|(x, y)| x.tokens != y.tokens) {
        return Err(Error::invalid("traces cover different tokens"));
    }
    Ok(())
}

/// Share of `(token, layer)` pairs with the same top-1 expert in both traces.
pub fn stability_fraction(a: &RoutingTrace, b: &RoutingTrace) -> Result<f64> {
    same_shape(a, b)?;
    let mut same = 0usize;
    let mut total = 0usize;
    for (s, t) in a.positions() {
        for l in 0..a.layers() {
            same += usize::from(a.top1(s, l, t) == b.top1(s, l, t));
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid("empty trace"));
    }
    Ok(same as f64 / total as f64)
}

/// `P[top-1 at layer+1 = ν | top-1 at layer = e]`; rows without support are zero.
pub fn conditional_activation_matrix(trace: &RoutingTrace, layer: usize) -> Result<Tensor> {
    if trace.num_tokens() == 0 {
        return Err(Error::invalid("empty trace"));
    }
    if layer + 1 >= trace.layers() {
        return Err(Error::invalid(format!("layer {layer} has no successor in a {}-layer trace", trace.layers())));
    }
    let e = trace.experts();
    let mut m = Tensor::zeros(&[e, e]);
    for (s, t) in trace.positions() {
        m.row_mut(trace.top1(s, layer, t))[trace.top1(s, layer + 1, t)] += 1.0;
    }
    for r in 0..e {
        let total: f64 = m.row(r).iter().sum();
        if total > 0.0 {
            m.row_mut(r).iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(m)
}

/// `n × E` next-token cross-entropies with `layer` forced onto each expert.
pub fn per_expert_losses(model: &MoeModel, tokens: &[u32], targets: &[usize], layer: usize) -> Result<Tensor> {
    if tokens.len() != targets.len() {
        return Err(Error::shape("per_expert_losses", "targets differ in length"));
    }
    let experts = model.config().experts;
    let mut out = Tensor::zeros(&[tokens.len(), experts]);
    for e in 0..experts {
        let logits = model.forced_logits(tokens, layer, e)?;
        for (i, &y) in targets.iter().enumerate() {
            let row = logits.row(i);
            out.row_mut(i)[e] = log_sum_exp(row) - row[y];
        }
    }
    Ok(out)
}

//! Residual MoE tower: token embedding, `L` routed SwiGLU layers and a linear
//! language-model head.
//!
//! Routing per layer: logits `q = x · Rᵀ`, scores `s = softmax(q)`, active set
//! `A` = top-k of `q` (or of `q + b` with auxiliary-loss-free balancing), and
//! output `y = Σ_{e∈A} s_e · W_down^e (swish(W_gate^e x) ⊙ W_up^e x)`.
//! The balancing bias `b` only changes which experts are selected; the
//! combination weights always come from the unbiased softmax.

mod trace;

use serde::{Deserialize, Serialize};

pub use trace::{LayerRouting, RoutingTrace, TraceStep, TRACE_MAGIC, TRACE_VERSION};

use crate::error::{Error, Result};
use crate::numeric::{swish, top_k, Graph, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    /// Experts per layer (E).
    pub experts: usize,
    /// Experts activated per token (k).
    pub top_k: usize,
    /// Number of MoE layers (L).
    pub layers: usize,
    pub hidden: usize,
    /// Expert intermediate width.
    pub ffn: usize,
    pub vocab: usize,
    #[serde(default)]
    pub shared_expert: bool,
    #[serde(default)]
    pub aux_loss_free: bool,
    #[serde(default = "default_bias_step")]
    pub bias_step: f64,
}

fn default_bias_step() -> f64 {
    1e-3
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            experts: 8,
            top_k: 2,
            layers: 4,
            hidden: 32,
            ffn: 32,
            vocab: 64,
            shared_expert: false,
            aux_loss_free: false,
            bias_step: default_bias_step(),
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.experts == 0 || self.experts > u16::MAX as usize {
            return fail(format!("experts must be in 1..=65535, got {}", self.experts));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return fail(format!("top_k must be in 1..={}, got {}", self.experts, self.top_k));
        }
        if self.layers == 0 {
            return fail("layers must be >= 1".into());
        }
        if self.hidden == 0 || self.ffn == 0 || self.vocab == 0 {
            return fail("hidden, ffn and vocab must be >= 1".into());
        }
        if self.aux_loss_free && !(self.bias_step > 0.0 && self.bias_step.is_finite()) {
            return fail(format!("aux_loss_free needs bias_step > 0, got {}", self.bias_step));
        }
        Ok(())
    }
}

/// Parameter handles of one SwiGLU expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertWeights {
    /// `ffn × hidden`
    pub gate: ParamId,
    /// `ffn × hidden`
    pub up: ParamId,
    /// `hidden × ffn`
    pub down: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    /// Router vectors stacked as an `experts × hidden` matrix.
    pub router: ParamId,
    pub experts: Vec<ExpertWeights>,
    pub shared: Option<ExpertWeights>,
    /// Selection bias; never touched by the optimizer.
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel {
    cfg: MoeConfig,
    pub params: ParamStore,
    /// `vocab × hidden`
    pub embed: ParamId,
    pub layers: Vec<MoeLayer>,
    /// `vocab × hidden`
    pub head: ParamId,
}

/// Unrecorded routing decision for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub logits: Tensor,
    pub scores: Tensor,
    /// Per token, `k` expert indices ordered by descending selection key.
    pub active: Vec<Vec<usize>>,
}

/// The activations of one expert on the tokens routed to it.
#[derive(Clone, Debug)]
pub struct ExpertActivation {
    pub expert: usize,
    /// Batch rows routed to this expert, ascending.
    pub tokens: Vec<usize>,
    /// `tokens.len() × ffn` intermediate activations.
    pub z: Var,
    /// `tokens.len() × hidden` unweighted expert outputs.
    pub y: Var,
}

/// Recorded output of one layer.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    /// `B × E` router logits.
    pub logits: Var,
    /// `B × E` softmax scores.
    pub scores: Var,
    /// `B × hidden` combined expert output (before the residual add).
    pub y: Var,
    pub active: Vec<Vec<usize>>,
    /// Experts that received at least one token, ascending by expert index.
    pub experts: Vec<ExpertActivation>,
    /// `slots[i][r] = (position in experts, row)` for token `i`'s `r`-th active expert.
    pub slots: Vec<Vec<(usize, usize)>>,
}

impl LayerOutput {
    pub fn batch(&self) -> usize {
        self.active.len()
    }

    /// Intermediate activation of token `i` at its `r`-th active expert.
    pub fn activation<'g>(&self, g: &'g Graph, i: usize, r: usize) -> &'g [f64] {
        let (pos, row) = self.slots[i][r];
        g.value(self.experts[pos].z).row(row)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `B × vocab`
    pub logits: Var,
    pub layers: Vec<LayerOutput>,
}

impl ForwardOutput {
    pub fn trace_step(&self, g: &Graph, tokens: &[u32]) -> TraceStep {
        let layers = self
            .layers
            .iter()
            .map(|lo| LayerRouting {
                active: lo.active.iter().flatten().map(|&e| e as u16).collect(),
                scores: g.value(lo.scores).data().iter().map(|&s| s as f32).collect(),
            })
            .collect();
        TraceStep { tokens: tokens.to_vec(), layers }
    }
}

fn normal_tensor(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_parts(vec![rows, cols], rng.normals(rows * cols, std))
}

impl MoeModel {
    pub fn new(cfg: MoeConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (h, f, e, v) = (cfg.hidden, cfg.ffn, cfg.experts, cfg.vocab);
        let in_std = 1.0 / (h as f64).sqrt();
        let out_std = 1.0 / (f as f64).sqrt();
        let mut params = ParamStore::new();
        let embed = params.add("embed", normal_tensor(rng, v, h, 1.0));
        let make_expert = |params: &mut ParamStore, rng: &mut Rng, name: String| ExpertWeights {
            gate: params.add(format!("{name}.gate"), normal_tensor(rng, f, h, in_std)),
            up: params.add(format!("{name}.up"), normal_tensor(rng, f, h, in_std)),
            down: params.add(format!("{name}.down"), normal_tensor(rng, h, f, out_std)),
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let router = params.add(format!("layer{l}.router"), normal_tensor(rng, e, h, in_std));
            let experts = (0..e)
                .map(|x| make_expert(&mut params, rng, format!("layer{l}.expert{x}")))
                .collect();
            let shared = cfg
                .shared_expert
                .then(|| make_expert(&mut params, rng, format!("layer{l}.shared")));
            layers.push(MoeLayer { router, experts, shared, bias: vec![0.0; e] });
        }
        let head = params.add("head", normal_tensor(rng, v, h, in_std));
        Ok(Self { cfg, params, embed, layers, head })
    }

    pub fn config(&self) -> &MoeConfig {
        &self.cfg
    }

    /// Selection keys and top-k sets for a block of router logits.
    fn select(&self, layer: usize, logits: &Tensor) -> Vec<Vec<usize>> {
        let bias = &self.layers[layer].bias;
        (0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                if self.cfg.aux_loss_free {
                    let keys: Vec<f64> = row.iter().zip(bias).map(|(q, b)| q + b).collect();
                    top_k(&keys, self.cfg.top_k)
                } else {
                    top_k(row, self.cfg.top_k)
                }
            })
            .collect()
    }

    /// Router scores and active sets for `x: B × hidden`, without recording.
    pub fn route(&self, layer: usize, x: &Tensor) -> Result<Routing> {
        let router = self.params.value(self.layers[layer].router);
        if x.shape().len() != 2 || x.cols() != self.cfg.hidden {
            return Err(Error::shape("route", format!("input {:?}, hidden {}", x.shape(), self.cfg.hidden)));
        }
        let logits = x.matmul(&router.transpose()?)?;
        let mut scores = logits.clone();
        for i in 0..scores.rows() {
            let s = crate::numeric::softmax(logits.row(i));
            scores.row_mut(i).copy_from_slice(&s);
        }
        let active = self.select(layer, &logits);
        Ok(Routing { logits, scores, active })
    }

    /// One expert applied to one token: returns `(z, y)`.
    pub fn expert_forward(&self, expert: &ExpertWeights, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.cfg.hidden {
            return Err(Error::shape("expert_forward", format!("input width {}", x.len())));
        }
        let gate = self.params.value(expert.gate);
        let up = self.params.value(expert.up);
        let down = self.params.value(expert.down);
        let z: Vec<f64> = (0..self.cfg.ffn)
            .map(|j| swish(crate::numeric::dot(gate.row(j), x)) * crate::numeric::dot(up.row(j), x))
            .collect();
        let y = (0..self.cfg.hidden).map(|j| crate::numeric::dot(down.row(j), &z)).collect();
        Ok((z, y))
    }

    fn record_expert(&self, g: &mut Graph, w: &ExpertWeights, x: Var) -> Result<(Var, Var)> {
        let gate = g.param(&self.params, w.gate);
        let up = g.param(&self.params, w.up);
        let down = g.param(&self.params, w.down);
        let pre = g.matmul_bt(x, gate)?;
        let act = g.swish(pre);
        let lin = g.matmul_bt(x, up)?;
        let z = g.mul(act, lin)?;
        let y = g.matmul_bt(z, down)?;
        Ok((z, y))
    }

    /// Records one MoE layer on `x: B × hidden`.
    pub fn layer_forward(&self, g: &mut Graph, layer: usize, x: Var) -> Result<LayerOutput> {
        let batch = g.value(x).rows();
        if g.value(x).shape() != [batch, self.cfg.hidden] {
            return Err(Error::shape("layer_forward", format!("input {:?}", g.value(x).shape())));
        }
        let spec = &self.layers[layer];
        let router = g.param(&self.params, spec.router);
        let logits = g.matmul_bt(x, router)?;
        let scores = g.softmax_rows(logits);
        let active = self.select(layer, g.value(logits));

        let mut routed: Vec<Vec<usize>> = vec![Vec::new(); self.cfg.experts];
        for (i, set) in active.iter().enumerate() {
            for &e in set {
                routed[e].push(i);
            }
        }
        let mut experts = Vec::new();
        let mut row_of = vec![vec![0usize; batch]; self.cfg.experts];
        let mut position = vec![usize::MAX; self.cfg.experts];
        let mut weighted = Vec::new();
        let mut targets = Vec::new();
        for (e, tokens) in routed.into_iter().enumerate() {
            if tokens.is_empty() {
                continue;
            }
            for (row, &i) in tokens.iter().enumerate() {
                row_of[e][i] = row;
            }
            let xe = g.gather_rows(x, tokens.clone())?;
            let (z, y) = self.record_expert(g, &spec.experts[e], xe)?;
            let w = g.gather_elems(scores, tokens.iter().map(|&i| (i, e)).collect())?;
            weighted.push(g.scale_rows(y, w)?);
            targets.extend_from_slice(&tokens);
            position[e] = experts.len();
            experts.push(ExpertActivation { expert: e, tokens, z, y });
        }
        let stacked = g.concat_rows(weighted)?;
        let mut y = g.index_add_rows(stacked, targets, batch)?;
        if let Some(shared) = &spec.shared {
            let (_, ys) = self.record_expert(g, shared, x)?;
            y = g.add(y, ys)?;
        }
        let slots = active
            .iter()
            .enumerate()
            .map(|(i, set)| set.iter().map(|&e| (position[e], row_of[e][i])).collect())
            .collect();
        Ok(LayerOutput { logits, scores, y, active, experts, slots })
    }

    /// Records the full tower on a flat batch of token ids.
    pub fn forward(&self, g: &mut Graph, tokens: &[u32]) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        let embed = g.param(&self.params, self.embed);
        let mut x = g.gather_rows(embed, tokens.iter().map(|&t| t as usize).collect())?;
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let out = self.layer_forward(g, l, x)?;
            x = g.add(x, out.y)?;
            layers.push(out);
        }
        let head = g.param(&self.params, self.head);
        let logits = g.matmul_bt(x, head)?;
        Ok(ForwardOutput { logits, layers })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token batch"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            return Err(Error::invalid(format!("token id {bad} out of vocabulary {}", self.cfg.vocab)));
        }
        Ok(())
    }

    /// Output logits with every token at `layer` sent to `expert` alone with
    /// weight 1; other layers route normally.
    pub fn forced_logits(&self, tokens: &[u32], layer: usize, expert: usize) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        if layer >= self.cfg.layers || expert >= self.cfg.experts {
            return Err(Error::invalid(format!("no expert {expert} at layer {layer}")));
        }
        let mut g = Graph::new();
        let embed = g.param(&self.params, self.embed);
        let mut x = g.gather_rows(embed, tokens.iter().map(|&t| t as usize).collect())?;
        for l in 0..self.cfg.layers {
            let y = if l == layer {
                let spec = &self.layers[l];
                let (_, mut y) = self.record_expert(&mut g, &spec.experts[expert], x)?;
                if let Some(shared) = &spec.shared {
                    let (_, ys) = self.record_expert(&mut g, shared, x)?;
                    y = g.add(y, ys)?;
                }
                y
            } else {
                self.layer_forward(&mut g, l, x)?.y
            };
            x = g.add(x, y)?;
        }
        let head = g.param(&self.params, self.head);
        let logits = g.matmul_bt(x, head)?;
        Ok(g.value(logits).clone())
    }

    /// Forward pass returning only values: logits and a one-step trace.
    pub fn evaluate(&self, tokens: &[u32]) -> Result<(Tensor, TraceStep)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, tokens)?;
        let step = out.trace_step(&g, tokens);
        Ok((g.value(out.logits).clone(), step))
    }

    /// Hidden states entering each layer plus the final residual stream.
    pub fn hidden_states(&self, tokens: &[u32]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let embed = g.param(&self.params, self.embed);
        let mut x = g.gather_rows(embed, tokens.iter().map(|&t| t as usize).collect())?;
        let mut states = vec![g.value(x).clone()];
        for l in 0..self.cfg.layers {
            let out = self.layer_forward(&mut g, l, x)?;
            x = g.add(x, out.y)?;
            states.push(g.value(x).clone());
        }
        Ok(states)
    }

    /// Sign-of-violation bias update for auxiliary-loss-free balancing:
    /// `b_e += step · sign(mean_load − load_e)`, then re-centred to mean 0.
    pub fn update_balancing_bias(&mut self, layer: usize, loads: &[usize]) -> Result<()> {
        if !self.cfg.aux_loss_free {
            return Err(Error::Config("balancing bias update requires aux_loss_free".into()));
        }
        if loads.len() != self.cfg.experts {
            return Err(Error::shape("update_balancing_bias", format!("{} loads", loads.len())));
        }
        let mean = loads.iter().sum::<usize>() as f64 / loads.len() as f64;
        let step = self.cfg.bias_step;
        let bias = &mut self.layers[layer].bias;
        for (b, &load) in bias.iter_mut().zip(loads) {
            let diff = mean - load as f64;
            if diff > 0.0 {
                *b += step;
            } else if diff < 0.0 {
                *b -= step;
            }
        }
        let centre = bias.iter().sum::<f64>() / bias.len() as f64;
        for b in bias.iter_mut() {
            *b -= centre;
        }
        Ok(())
    }
}

/// Per-expert token counts over all active slots.
pub fn expert_loads(active: &[Vec<usize>], experts: usize) -> Vec<usize> {
    let mut loads = vec![0; experts];
    for set in active {
        for &e in set {
            loads[e] += 1;
        }
    }
    loads
}

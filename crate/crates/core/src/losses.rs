//! Training objective: task cross-entropy, load balance, router z-loss,
//! intra-layer specialization and cross-layer coupling.
//!
//! Every component is a per-token mean. The specialization term counts each
//! unordered pair of co-activated experts once, so its raw value is half of
//! the ordered-pair sum.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{ForwardOutput, LayerOutput};
use crate::numeric::{top_k, CustomOp, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "defaults::lb")]
    pub lb: f64,
    #[serde(default = "defaults::z")]
    pub z: f64,
    #[serde(default = "defaults::sp")]
    pub sp: f64,
    #[serde(default = "defaults::cp")]
    pub cp: f64,
}

mod defaults {
    pub fn lb() -> f64 {
        1e-2
    }
    pub fn z() -> f64 {
        1e-3
    }
    pub fn sp() -> f64 {
        2e-3
    }
    pub fn cp() -> f64 {
        1e-3
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lb: defaults::lb(), z: defaults::z(), sp: defaults::sp(), cp: defaults::cp() }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights { lb: 0.0, z: 0.0, sp: 0.0, cp: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lb", self.lb), ("z", self.z), ("sp", self.sp), ("cp", self.cp)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted components and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub lb: f64,
    pub z: f64,
    pub sp: f64,
    pub cp: f64,
    pub total: f64,
    /// Set when the tower has a single layer and coupling is defined as 0.
    pub cp_undefined: bool,
}

impl LossBreakdown {
    /// `task + λ_lb·lb + λ_z·z + λ_sp·sp + λ_cp·cp`, left to right.
    pub fn compose(&self, w: &LossWeights) -> f64 {
        self.task + w.lb * self.lb + w.z * self.z + w.sp * self.sp + w.cp * self.cp
    }
}

/// Graph handles of a recorded objective.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub task: Var,
    pub lb: Var,
    pub z: Var,
    pub sp: Var,
    pub cp: Var,
    pub breakdown: LossBreakdown,
}

/// Mean over tokens of the summed squared cosines between co-activated
/// expert activations.
pub fn specialization_loss(g: &mut Graph, layers: &[LayerOutput]) -> Result<Var> {
    let batch = layers.first().map_or(0, LayerOutput::batch);
    let mut terms = Vec::new();
    for lo in layers {
        let k = lo.slots.first().map_or(0, Vec::len);
        if k < 2 || lo.experts.is_empty() {
            continue;
        }
        let mut offsets = Vec::with_capacity(lo.experts.len());
        let mut acc = 0;
        for ex in &lo.experts {
            offsets.push(acc);
            acc += ex.tokens.len();
        }
        let all = g.concat_rows(lo.experts.iter().map(|ex| ex.z).collect())?;
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for slots in &lo.slots {
            for a in 0..k {
                for b in a + 1..k {
                    left.push(offsets[slots[a].0] + slots[a].1);
                    right.push(offsets[slots[b].0] + slots[b].1);
                }
            }
        }
        let za = g.gather_rows(all, left)?;
        let zb = g.gather_rows(all, right)?;
        let cos = g.row_cosine(za, zb)?;
        let sq = g.square(cos);
        terms.push(g.sum(sq));
    }
    sum_scaled(g, terms, 1.0 / batch.max(1) as f64)
}

fn sum_scaled(g: &mut Graph, terms: Vec<Var>, c: f64) -> Result<Var> {
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, c))
}

/// `T_i^(e)`: for each expert `e` of the lower layer, the `k` experts of the
/// upper layer with the largest joint probability `s_e · s'_ν`.
pub fn coupling_targets(lower: &[f64], upper: &[f64], k: usize) -> Vec<Vec<usize>> {
    let mut joint = vec![0.0; upper.len()];
    lower
        .iter()
        .map(|&se| {
            for (j, &sv) in joint.iter_mut().zip(upper) {
                *j = se * sv;
            }
            top_k(&joint, k)
        })
        .collect()
}

/// Coupling loss from plain score matrices (one `B × E` per layer).
pub fn coupling_value(scores: &[Tensor], k: usize) -> Result<f64> {
    if scores.len() < 2 {
        return Ok(0.0);
    }
    let batch = scores[0].rows();
    let mut total = 0.0;
    for pair in scores.windows(2) {
        if pair[1].shape() != pair[0].shape() {
            return Err(Error::shape("coupling", "layer score shapes differ"));
        }
        for i in 0..batch {
            let (lo, up) = (pair[0].row(i), pair[1].row(i));
            for (e, t) in coupling_targets(lo, up, k).iter().enumerate() {
                total += lo[e] * t.iter().map(|&v| up[v]).sum::<f64>();
            }
        }
    }
    Ok(-total / batch as f64)
}

struct CouplingOp {
    k: usize,
    /// `targets[pair][token][e]`
    targets: Vec<Vec<Vec<Vec<usize>>>>,
}

impl CustomOp for CouplingOp {
    fn name(&self) -> &'static str {
        "coupling"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let batch = inputs[0].rows();
        let c = -grad.item() / batch as f64;
        let mut out: Vec<Tensor> = inputs.iter().map(|t| Tensor::zeros(t.shape())).collect();
        for (p, per_token) in self.targets.iter().enumerate() {
            let (lo, up) = (inputs[p], inputs[p + 1]);
            let mut d_lo = vec![0.0; lo.len()];
            let mut d_up = vec![0.0; up.len()];
            let cols = lo.cols();
            for (i, per_e) in per_token.iter().enumerate() {
                for (e, t) in per_e.iter().enumerate() {
                    debug_assert_eq!(t.len(), self.k);
                    let mut mass = 0.0;
                    for &v in t {
                        mass += up.at(i, v);
                        d_up[i * cols + v] += c * lo.at(i, e);
                    }
                    d_lo[i * cols + e] += c * mass;
                }
            }
            for (o, d) in out[p].data_mut().iter_mut().zip(d_lo) {
                *o += d;
            }
            for (o, d) in out[p + 1].data_mut().iter_mut().zip(d_up) {
                *o += d;
            }
        }
        out
    }
}

/// Cross-layer coupling loss over consecutive layers. Returns the loss and
/// whether it was undefined (fewer than two layers, value 0).
pub fn coupling_loss(g: &mut Graph, layers: &[LayerOutput], k: usize) -> Result<(Var, bool)> {
    if layers.len() < 2 {
        return Ok((g.constant(Tensor::scalar(0.0)), true));
    }
    let scores: Vec<Tensor> = layers.iter().map(|lo| g.value(lo.scores).clone()).collect();
    let value = coupling_value(&scores, k)?;
    let targets = scores
        .windows(2)
        .map(|pair| (0..pair[0].rows()).map(|i| coupling_targets(pair[0].row(i), pair[1].row(i), k)).collect())
        .collect();
    let op = Arc::new(CouplingOp { k, targets });
    let inputs = layers.iter().map(|lo| lo.scores).collect();
    Ok((g.custom(op, inputs, Tensor::scalar(value)), false))
}

/// `E · Σ_e f_e · P_e` with `f_e` the share of (token, slot) assignments and
/// `P_e` the mean router score; only `P` carries gradient.
pub fn load_balance_loss(g: &mut Graph, scores: Var, active: &[Vec<usize>]) -> Result<Var> {
    let (batch, experts) = (g.value(scores).rows(), g.value(scores).cols());
    if active.len() != batch {
        return Err(Error::shape("load_balance", format!("{} active sets for {batch} rows", active.len())));
    }
    let coeffs = load_balance_coeffs(active, batch, experts);
    g.weighted_sum(scores, coeffs)
}

fn load_balance_coeffs(active: &[Vec<usize>], batch: usize, experts: usize) -> Vec<f64> {
    let slots: usize = active.iter().map(Vec::len).sum();
    let mut f = vec![0.0; experts];
    for &e in active.iter().flatten() {
        f[e] += 1.0;
    }
    let c = experts as f64 / (slots.max(1) as f64 * batch as f64);
    (0..batch).flat_map(|_| f.iter().map(move |&fe| fe * c)).collect()
}

/// Load-balance loss from plain scores and active sets.
pub fn load_balance_value(scores: &Tensor, active: &[Vec<usize>]) -> f64 {
    let coeffs = load_balance_coeffs(active, scores.rows(), scores.cols());
    scores.data().iter().zip(&coeffs).map(|(s, c)| s * c).sum()
}

/// Mean over tokens and layers of `(log Σ_j exp q_j)²`.
pub fn z_loss(g: &mut Graph, logits: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(logits.len());
    for &q in logits {
        let lse = g.log_sum_exp_rows(q);
        let sq = g.square(lse);
        terms.push(g.mean(sq));
    }
    let n = terms.len().max(1);
    sum_scaled(g, terms, 1.0 / n as f64)
}

/// Records the full objective for a forward pass.
pub fn total_loss(
    g: &mut Graph,
    forward: &ForwardOutput,
    targets: &[usize],
    weights: &LossWeights,
    top_k: usize,
) -> Result<Objective> {
    let task = g.cross_entropy(forward.logits, targets.to_vec())?;
    let mut lb_terms = Vec::with_capacity(forward.layers.len());
    for lo in &forward.layers {
        lb_terms.push(load_balance_loss(g, lo.scores, &lo.active)?);
    }
    let lb = sum_scaled(g, lb_terms, 1.0 / forward.layers.len().max(1) as f64)?;
    let logits: Vec<Var> = forward.layers.iter().map(|lo| lo.logits).collect();
    let z = z_loss(g, &logits)?;
    let sp = specialization_loss(g, &forward.layers)?;
    let (cp, cp_undefined) = coupling_loss(g, &forward.layers, top_k)?;

    let mut total = task;
    for (var, w) in [(lb, weights.lb), (z, weights.z), (sp, weights.sp), (cp, weights.cp)] {
        let scaled = g.scale(var, w);
        total = g.add(total, scaled)?;
    }
    let breakdown = LossBreakdown {
        task: g.scalar(task),
        lb: g.scalar(lb),
        z: g.scalar(z),
        sp: g.scalar(sp),
        cp: g.scalar(cp),
        total: g.scalar(total),
        cp_undefined,
    };
    Ok(Objective { total, task, lb, z, sp, cp, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(b: usize, e: usize) -> Tensor {
        Tensor::filled(&[b, e], 1.0 / e as f64)
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.lb, w.z, w.sp, w.cp), (1e-2, 1e-3, 2e-3, 1e-3));
        assert!(LossWeights { sp: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn coupling_uniform_two_layers() {
        let v = coupling_value(&[uniform(3, 4), uniform(3, 4)], 2).unwrap();
        assert!((v + 0.5).abs() < 1e-15);
        assert_eq!(coupling_value(&[uniform(3, 4)], 2).unwrap(), 0.0);
    }

    #[test]
    fn coupling_one_hot_reaches_minimum() {
        let one_hot = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let v = coupling_value(&[one_hot.clone(), one_hot.clone(), one_hot], 1).unwrap();
        assert!((v + 2.0).abs() < 1e-15);
    }

    #[test]
    fn coupling_targets_break_ties_low() {
        let t = coupling_targets(&[0.5, 0.5], &[0.25, 0.25, 0.5], 2);
        assert_eq!(t, vec![vec![2, 0], vec![2, 0]]);
    }

    #[test]
    fn load_balance_extremes() {
        let active: Vec<Vec<usize>> = (0..8).map(|i| vec![i % 4]).collect();
        assert!((load_balance_value(&uniform(8, 4), &active) - 1.0).abs() < 1e-15);
        let mut one = Tensor::zeros(&[5, 4]);
        for i in 0..5 {
            one.row_mut(i)[0] = 1.0;
        }
        let to_first = vec![vec![0]; 5];
        assert!((load_balance_value(&one, &to_first) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn z_loss_of_zero_logits() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[3, 8]));
        let z = z_loss(&mut g, &[q]).unwrap();
        assert!((g.scalar(z) - 8f64.ln().powi(2)).abs() < 1e-14);
        let shifted = g.constant(Tensor::filled(&[3, 8], 2.0));
        let zs = z_loss(&mut g, &[shifted]).unwrap();
        assert!((g.scalar(zs) - (2.0 + 8f64.ln()).powi(2)).abs() < 1e-13);
    }

    #[test]
    fn compose_order() {
        let b = LossBreakdown { task: 1.0, lb: 2.0, z: 3.0, sp: 4.0, cp: -5.0, ..Default::default() };
        assert_eq!(b.compose(&LossWeights::ZERO), 1.0);
        let w = LossWeights::default();
        assert_eq!(b.compose(&w), 1.0 + 1e-2 * 2.0 + 1e-3 * 3.0 + 2e-3 * 4.0 + 1e-3 * -5.0);
    }
}

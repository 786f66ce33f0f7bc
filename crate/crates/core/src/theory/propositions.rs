//! Gradient alignment of co-activated experts and specialization transfer
//! across coupled layers.

use crate::error::{Error, Result};
use crate::moe::MoeModel;
use crate::numeric::{cosine, Graph};

use super::{BoundReport, PREMISE_TOL};

/// Compares `cos(∇W_down^e, ∇W_down^ν)` with `cos(z^e, z^ν)` for every pair of
/// experts co-activated on a single token, under the cross-entropy loss
/// towards `target`. Holds when the largest gap is below `1e-8`.
pub fn check_prop1_gradient_alignment(model: &MoeModel, token: u32, target: usize) -> Result<BoundReport> {
    let name = "prop1.gradient_alignment";
    let mut g = Graph::new();
    let out = model.forward(&mut g, &[token])?;
    let loss = g.cross_entropy(out.logits, vec![target])?;
    let mut store = model.params.clone();
    store.zero_grads();
    g.backward_into(loss, &mut store)?;

    let mut gap: f64 = 0.0;
    let mut pairs = 0usize;
    for (l, lo) in out.layers.iter().enumerate() {
        let active = &lo.active[0];
        for a in 0..active.len() {
            for b in a + 1..active.len() {
                let da = store.grad(model.layers[l].experts[active[a]].down).data();
                let db = store.grad(model.layers[l].experts[active[b]].down).data();
                let grad_cos = cosine(da, db);
                let act_cos = cosine(lo.activation(&g, 0, a), lo.activation(&g, 0, b));
                gap = gap.max((grad_cos - act_cos).abs());
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Ok(BoundReport::not_applicable(name, "vacuous: no co-activated pairs").with("vacuous", true));
    }
    Ok(BoundReport::new(name, gap, 1e-8).with("pairs", pairs))
}

/// Two adjacent layers observed on a set of tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Prop2Instance {
    /// Token representations entering layer ℓ.
    pub x: Vec<Vec<f64>>,
    /// The same tokens entering layer ℓ+1.
    pub x_next: Vec<Vec<f64>>,
    pub routers: Vec<Vec<f64>>,
    pub routers_next: Vec<Vec<f64>>,
    pub active: Vec<Vec<usize>>,
    pub active_next: Vec<Vec<usize>>,
}

impl Prop2Instance {
    fn validate(&self) -> Result<()> {
        let n = self.x.len();
        if self.x_next.len() != n || self.active.len() != n || self.active_next.len() != n {
            return Err(Error::invalid("per-token inputs have different lengths"));
        }
        let bad = |sets: &[Vec<usize>], e: usize| sets.iter().flatten().any(|&v| v >= e);
        if bad(&self.active, self.routers.len()) || bad(&self.active_next, self.routers_next.len()) {
            return Err(Error::invalid("active expert without a router"));
        }
        Ok(())
    }

    /// The best partner expert at layer ℓ+1 for token `i` and its confidence gap `1 − cos`.
    fn partner(&self, i: usize) -> Option<(usize, f64)> {
        self.active_next[i]
            .iter()
            .map(|&v| (v, 1.0 - cosine(&self.x_next[i], &self.routers_next[v])))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Pairs `(i, e1, j, e2)` with `i ≠ j`, `e1 ∈ A_i`, `e2 ∈ A_j`, `e1 ≠ e2`.
    fn cross_pairs(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.x.len() {
            for j in 0..self.x.len() {
                if i == j {
                    continue;
                }
                for &e1 in &self.active[i] {
                    for &e2 in &self.active[j] {
                        if e1 != e2 {
                            out.push((i, e1, j, e2));
                        }
                    }
                }
            }
        }
        out
    }

    /// The smallest `(δ, ε, ι)` for which the three conditions hold.
    pub fn tight_parameters(&self) -> Option<(f64, f64, f64)> {
        let mut d2: f64 = 0.0;
        let mut i2: f64 = 0.0;
        for i in 0..self.x.len() {
            d2 = d2.max(1.0 - cosine(&self.x[i], &self.x_next[i]));
            for &e in &self.active[i] {
                i2 = i2.max(1.0 - cosine(&self.x[i], &self.routers[e]));
            }
            i2 = i2.max(self.partner(i)?.1);
        }
        let eps = self
            .cross_pairs()
            .into_iter()
            .map(|(_, e1, _, e2)| cosine(&self.routers[e1], &self.routers[e2]).abs())
            .fold(0.0, f64::max);
        Some((d2.max(0.0).sqrt(), eps, i2.max(0.0).sqrt()))
    }
}

/// `ε + 2√2(δ+2ι) + 2(δ+2ι)²`
pub fn prop2_bound(delta: f64, eps: f64, iota: f64) -> f64 {
    let d = delta + 2.0 * iota;
    eps + 2.0 * std::f64::consts::SQRT_2 * d + 2.0 * d * d
}

/// Verifies representation continuity, source-layer specialization and
/// strong coupling, then bounds `|cos(r^(ℓ+1,ν1), r^(ℓ+1,ν2))|` over partner
/// experts of tokens routed to distinct source experts.
pub fn check_prop2_propagation(inst: &Prop2Instance, delta: f64, eps: f64, iota: f64) -> Result<BoundReport> {
    let name = "prop2.propagation";
    inst.validate()?;
    for (label, v) in [("delta", delta), ("eps", eps), ("iota", iota)] {
        if !(0.0..1.0).contains(&v) {
            return Ok(BoundReport::not_applicable(name, format!("{label} = {v} outside [0, 1)")));
        }
    }
    let n = inst.x.len();
    for i in 0..n {
        if cosine(&inst.x[i], &inst.x_next[i]) < 1.0 - delta * delta - PREMISE_TOL {
            return Ok(BoundReport::not_applicable(name, format!("continuity fails at token {i}")));
        }
    }
    let pairs = inst.cross_pairs();
    for &(i, e1, j, e2) in &pairs {
        if cosine(&inst.routers[e1], &inst.routers[e2]).abs() > eps + PREMISE_TOL {
            return Ok(BoundReport::not_applicable(
                name,
                format!("source specialization fails for experts {e1} (token {i}) and {e2} (token {j})"),
            ));
        }
    }
    let mut partners = Vec::with_capacity(n);
    for i in 0..n {
        for &e in &inst.active[i] {
            if cosine(&inst.x[i], &inst.routers[e]) < 1.0 - iota * iota - PREMISE_TOL {
                return Ok(BoundReport::not_applicable(name, format!("token {i} is not confident at expert {e}")));
            }
        }
        match inst.partner(i) {
            Some((v, gap)) if gap <= iota * iota + PREMISE_TOL => partners.push(v),
            _ => return Ok(BoundReport::not_applicable(name, format!("no confident partner for token {i}"))),
        }
    }
    if pairs.is_empty() {
        return Ok(BoundReport::not_applicable(name, "no pair of distinct tokens on distinct experts"));
    }
    let lhs = pairs
        .iter()
        .map(|&(i, _, j, _)| cosine(&inst.routers_next[partners[i]], &inst.routers_next[partners[j]]).abs())
        .fold(0.0, f64::max);
    Ok(BoundReport::new(name, lhs, prop2_bound(delta, eps, iota))
        .with("delta", delta)
        .with("eps", eps)
        .with("iota", iota)
        .with("pairs", pairs.len()))
}

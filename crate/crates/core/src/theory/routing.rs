//! Routing sharpness: entropy bound, weak specialization ⇒ decisive routing,
//! and decisive routing ⇒ region-conditional risk improvement.

use crate::error::{Error, Result};
use crate::numeric::{softmax, Graph, Tensor};

use super::{BoundReport, HOLDS_TOL, PREMISE_TOL};

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn router_entropy(g: &[f64]) -> f64 {
    -g.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// `h(δ) + δ ln(E − 1)` with `h` the binary entropy.
pub fn entropy_bound(delta: f64, experts: usize) -> Result<f64> {
    if !(delta > 0.0 && delta <= 0.5) {
        return Err(Error::invalid(format!("delta must lie in (0, 1/2], got {delta}")));
    }
    if experts < 2 {
        return Err(Error::invalid("entropy bound needs at least two experts"));
    }
    let h = -delta * delta.ln() - (1.0 - delta) * (1.0 - delta).ln();
    Ok(h + delta * ((experts - 1) as f64).ln())
}

/// `H(g) ≤ h(δ) + δ ln(E−1)` on the event `max g ≥ 1 − δ`.
pub fn check_entropy_corollary(g: &[f64], delta: f64) -> Result<BoundReport> {
    let bound = entropy_bound(delta, g.len())?;
    let report = BoundReport::new("entropy", router_entropy(g), bound).with("delta", delta);
    let top = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top < 1.0 - delta {
        return Ok(report.inapplicable("max score below 1 - delta"));
    }
    Ok(report)
}

/// A finite token population for the weak-specialization theorem.
#[derive(Clone, Copy, Debug)]
pub struct WeakSpecInput<'a> {
    /// `n × E` per-expert losses `ℓ_e(t)`.
    pub losses: &'a Tensor,
    /// `n × E` router logits `z(t)`.
    pub logits: &'a Tensor,
}

/// Best expert (lowest index among ties) and the margin to the runner-up.
fn best_and_margin(losses: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (e, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = e;
        }
    }
    let margin = losses
        .iter()
        .enumerate()
        .filter(|&(e, _)| e != best)
        .map(|(_, &l)| l - losses[best])
        .fold(f64::INFINITY, f64::min);
    (best, margin)
}

/// Three reports: the router gradient formula `∂L/∂z_e = g_e(ℓ_e − L)` against
/// autodiff, the sign of the best expert's logit gradient, and the
/// high-probability sharpness bound
/// `P[g_{e*} < 1 − δ] ≤ ε0 + E[L − ℓ_{e*}] / (γ0 δ)`.
pub fn check_thm_weak_spec(input: WeakSpecInput<'_>, gamma0: f64, eps0: f64, delta: f64) -> Result<Vec<BoundReport>> {
    let WeakSpecInput { losses, logits } = input;
    if !(gamma0 > 0.0 && gamma0.is_finite()) {
        return Err(Error::invalid(format!("gamma0 must be positive, got {gamma0}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if losses.shape() != logits.shape() || losses.shape().len() != 2 {
        return Err(Error::shape("thm_weak_spec", format!("{:?} vs {:?}", losses.shape(), logits.shape())));
    }
    let (n, experts) = (losses.rows(), losses.cols());
    if experts < 2 {
        return Err(Error::invalid("need at least two experts"));
    }

    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let s = g.softmax_rows(z);
    let mix = g.weighted_sum(s, losses.data().to_vec())?;
    let grads = g.backward(mix)?;
    let autodiff = grads.wrt(z).cloned().unwrap_or_else(|| Tensor::zeros(logits.shape()));

    let mut formula_err: f64 = 0.0;
    let mut sign_checked = 0usize;
    let mut sign_bad = 0usize;
    let mut misses = 0usize;
    let mut below_margin = 0usize;
    let mut gap_sum = 0.0;
    for t in 0..n {
        let gt = softmax(logits.row(t));
        let lt = losses.row(t);
        let mixture: f64 = gt.iter().zip(lt).map(|(a, b)| a * b).sum();
        for e in 0..experts {
            let f = gt[e] * (lt[e] - mixture);
            formula_err = formula_err.max((f - autodiff.at(t, e)).abs());
        }
        let (best, margin) = best_and_margin(lt);
        if margin > 0.0 && gt[best] < 1.0 {
            sign_checked += 1;
            if gt[best] * (lt[best] - mixture) >= 0.0 {
                sign_bad += 1;
            }
        }
        if margin < gamma0 {
            below_margin += 1;
        }
        if gt[best] < 1.0 - delta {
            misses += 1;
        }
        gap_sum += (mixture - lt[best]).max(0.0);
    }
    let nf = n as f64;
    let measured_eps0 = below_margin as f64 / nf;
    let mean_gap = gap_sum / nf;

    let gradient = BoundReport::new("thm_c1.gradient", formula_err, 1e-12).with("tokens", n);
    let sign = BoundReport::new("thm_c1.sign", sign_bad as f64, 0.0).with("checked", sign_checked);
    let mut sharp = BoundReport::new("thm_c1.sharpness", misses as f64 / nf, eps0 + mean_gap / (gamma0 * delta))
        .with("gamma0", gamma0)
        .with("eps0", eps0)
        .with("measured_eps0", measured_eps0)
        .with("delta", delta)
        .with("mean_oracle_gap", mean_gap);
    if measured_eps0 > eps0 + PREMISE_TOL {
        sharp = sharp.inapplicable("margin condition fails: P[margin < gamma0] exceeds eps0");
    }
    Ok(vec![gradient, sign, sharp])
}

/// A finite population seen by one expert.
#[derive(Clone, Copy, Debug)]
pub struct RegionRiskInput<'a> {
    /// Data distribution weights `D(t)`.
    pub data_weights: &'a [f64],
    /// Routing weights `g(e | t)` for the expert under study.
    pub routing: &'a [f64],
    /// Membership of `t` in the expert's advantage region.
    pub in_region: &'a [bool],
    pub losses_old: &'a [f64],
    pub losses_new: &'a [f64],
}

/// Purity, effective risk and region-conditional risk under `D_e`.
fn region_stats(w: &[f64], region: &[bool], losses: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut eff = 0.0;
    let mut inside = 0.0;
    for ((&wt, &r), &l) in w.iter().zip(region).zip(losses) {
        eff += wt * l;
        if r {
            alpha += wt;
            inside += wt * l;
        }
    }
    (alpha, eff, if alpha > 0.0 { inside / alpha } else { f64::NAN })
}

/// `R_S(new) − R_S(old) ≤ −(Δ_e − ηB)`, asserted only when `Δ_e > ηB`.
///
/// The context also carries the sharper `(−Δ_e + (1−α)B)/α`, which holds
/// for every instance meeting the premises.
pub fn check_thm_region_risk(input: RegionRiskInput<'_>, eta: f64, bound: f64) -> Result<BoundReport> {
    let name = "thm_c2.region_risk";
    let n = input.data_weights.len();
    if [input.routing.len(), input.in_region.len(), input.losses_old.len(), input.losses_new.len()]
        .iter()
        .any(|&m| m != n)
    {
        return Err(Error::shape("thm_region_risk", "population vectors differ in length"));
    }
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(Error::invalid(format!("loss bound must be positive, got {bound}")));
    }
    if input.data_weights.iter().chain(input.routing).any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::invalid("weights must be finite and non-negative"));
    }
    if !(0.0..1.0).contains(&eta) {
        return Ok(BoundReport::not_applicable(name, format!("eta = {eta} outside [0, 1)")));
    }
    let in_range = |l: &f64| (0.0..=bound).contains(l);
    if !input.losses_old.iter().chain(input.losses_new).all(in_range) {
        return Ok(BoundReport::not_applicable(name, "losses outside [0, B]"));
    }
    let mass: Vec<f64> = input.data_weights.iter().zip(input.routing).map(|(d, g)| d * g).collect();
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Ok(BoundReport::not_applicable(name, "expert receives no routing mass"));
    }
    let w: Vec<f64> = mass.iter().map(|m| m / total).collect();
    let (alpha, eff_old, rs_old) = region_stats(&w, input.in_region, input.losses_old);
    let (_, eff_new, rs_new) = region_stats(&w, input.in_region, input.losses_new);
    if alpha < 1.0 - eta - PREMISE_TOL || alpha <= 0.0 {
        return Ok(BoundReport::not_applicable(name, format!("purity {alpha} below 1 - eta")));
    }
    let delta_e = eff_old - eff_new;
    if delta_e <= 0.0 {
        return Ok(BoundReport::not_applicable(name, "effective risk did not decrease"));
    }
    let lhs = rs_new - rs_old;
    let tight = (-delta_e + (1.0 - alpha) * bound) / alpha;
    let report = BoundReport::new(name, lhs, -(delta_e - eta * bound))
        .with("alpha", alpha)
        .with("delta_e", delta_e)
        .with("eta", eta)
        .with("bound", bound)
        .with("r_eff_old", eff_old)
        .with("r_eff_new", eff_new)
        .with("tight_rhs", tight)
        .with("tight_holds", lhs <= tight + HOLDS_TOL);
    if delta_e <= eta * bound {
        return Ok(report.with("vacuous", true).inapplicable("vacuous: delta_e <= eta * B"));
    }
    Ok(report.with("vacuous", false))
}

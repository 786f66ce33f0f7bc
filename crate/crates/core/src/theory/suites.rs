//! Randomized falsification suites over condition-satisfying instances.

use rand_distr::Gamma;
use serde_json::Value;

use super::*;
use crate::error::{Error, Result};
use crate::losses::coupling_value;
use crate::moe::{expert_loads, MoeConfig, MoeModel};
use crate::numeric::{Rng, Tensor};

pub const SUITES: &[&str] =
    &["prop1", "prop2", "thm_c1", "thm_c2", "entropy", "kappa", "backward", "partition", "construct"];

/// Default number of randomized instances per suite.
pub fn default_trials(suite: &str) -> usize {
    match suite {
        "prop1" => 50,
        "kappa" => 200,
        "partition" | "construct" => 100,
        "backward" => 10_000,
        "entropy" => 100_000,
        _ => 1000,
    }
}

/// Aggregate of one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteSummary {
    pub name: String,
    pub trials: usize,
    pub applicable: usize,
    pub violations: usize,
    pub min_slack: f64,
    pub first_violation: Option<BoundReport>,
}

impl SuiteSummary {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            trials: 0,
            applicable: 0,
            violations: 0,
            min_slack: f64::INFINITY,
            first_violation: None,
        }
    }

    fn add(&mut self, report: BoundReport) {
        self.trials += 1;
        if !report.applicable {
            return;
        }
        self.applicable += 1;
        self.min_slack = self.min_slack.min(report.slack);
        if report.violated() {
            self.violations += 1;
            self.first_violation.get_or_insert(report);
        }
    }

    /// `lhs` = violations, `rhs` = 0.
    pub fn report(&self) -> BoundReport {
        let mut r = BoundReport::new(format!("suite.{}", self.name), self.violations as f64, 0.0)
            .with("trials", self.trials)
            .with("applicable", self.applicable);
        if self.min_slack.is_finite() {
            r = r.with("min_slack", self.min_slack);
        }
        if let Some(v) = &self.first_violation {
            r = r.with("first_violation", serde_json::to_value(v).unwrap_or(Value::Null));
        }
        r
    }
}

pub fn run_suite(name: &str, trials: usize, seed: u64) -> Result<SuiteSummary> {
    let mut rng = Rng::new(seed).derive(SUITES.iter().position(|s| *s == name).unwrap_or(99) as u64);
    let mut summary = SuiteSummary::new(name);
    for _ in 0..trials {
        match name {
            "prop1" => summary.add(prop1_trial(&mut rng)?),
            "prop2" => summary.add(prop2_trial(&mut rng)?),
            "thm_c1" => {
                for r in thm_c1_trial(&mut rng)? {
                    summary.add(r);
                }
            }
            "thm_c2" => summary.add(thm_c2_trial(&mut rng)?),
            "entropy" => summary.add(entropy_trial(&mut rng)?),
            "kappa" => summary.add(kappa_trial(&mut rng)?),
            "backward" => summary.add(backward_trial(&mut rng)?),
            "partition" => summary.add(partition_trial(&mut rng)?),
            "construct" => summary.add(construct_trial(&mut rng)?),
            other => return Err(Error::invalid(format!("unknown suite {other:?}"))),
        }
    }
    Ok(summary)
}

fn pick<T: Copy>(rng: &mut Rng, items: &[T]) -> T {
    items[rng.below(items.len())]
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn add_noise(rng: &mut Rng, v: &[f64], scale: f64) -> Vec<f64> {
    v.iter().map(|x| x + scale * rng.normal()).collect()
}

fn orthonormal(rng: &mut Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = rng.normals(dim, 1.0);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            basis.push(unit(v));
        }
    }
    basis
}

fn dirichlet(rng: &mut Rng, n: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(&gamma)).collect();
        let total: f64 = v.iter().sum();
        if total > 0.0 {
            return v.into_iter().map(|x| x / total).collect();
        }
    }
}

fn log_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.uniform() * (hi.ln() - lo.ln())).exp()
}

fn prop1_trial(rng: &mut Rng) -> Result<BoundReport> {
    let cfg = MoeConfig {
        experts: pick(rng, &[4, 8]),
        top_k: pick(rng, &[2, 3]),
        layers: pick(rng, &[1, 2]),
        hidden: pick(rng, &[8, 16]),
        ffn: pick(rng, &[16, 32]),
        vocab: 16,
        ..MoeConfig::default()
    };
    let model = MoeModel::new(cfg, rng)?;
    let token = rng.below(16) as u32;
    let target = rng.below(16);
    check_prop1_gradient_alignment(&model, token, target)
}

/// Layer-ℓ routers in near-orthogonal groups of `k`, partners at ℓ+1 under
/// a random relabeling, tokens near their group direction.
pub fn sample_prop2_instance(rng: &mut Rng) -> Prop2Instance {
    let h = 8 + rng.below(25);
    let k = 1 + rng.below(2);
    let groups = 2 + rng.below(5);
    let experts = groups * k;
    let basis = orthonormal(rng, groups, h);
    let (sr, sc, sx, sd) = (
        log_uniform(rng, 1e-4, 0.2),
        log_uniform(rng, 1e-4, 0.2),
        log_uniform(rng, 1e-4, 0.2),
        log_uniform(rng, 1e-4, 0.2),
    );
    let routers: Vec<Vec<f64>> = (0..experts).map(|e| add_noise(rng, &basis[e / k], sr)).collect();
    let relabel = rng.permutation(experts);
    let mut routers_next = vec![Vec::new(); experts];
    for e in 0..experts {
        routers_next[relabel[e]] = add_noise(rng, &routers[e], sc);
    }
    let n = 2 + rng.below(7);
    let (mut x, mut x_next, mut active, mut active_next) = (vec![], vec![], vec![], vec![]);
    for _ in 0..n {
        let g = rng.below(groups);
        let xi = add_noise(rng, &basis[g], sx);
        x_next.push(add_noise(rng, &xi, sd));
        x.push(xi);
        let set: Vec<usize> = (g * k..(g + 1) * k).collect();
        active_next.push(set.iter().map(|&e| relabel[e]).collect());
        active.push(set);
    }
    Prop2Instance { x, x_next, routers, routers_next, active, active_next }
}

fn prop2_trial(rng: &mut Rng) -> Result<BoundReport> {
    let inst = sample_prop2_instance(rng);
    match inst.tight_parameters() {
        Some((d, e, i)) if d < 1.0 && e < 1.0 && i < 1.0 => check_prop2_propagation(&inst, d, e, i),
        _ => Ok(BoundReport::not_applicable("prop2.propagation", "parameters outside (0, 1)")),
    }
}

/// Population with per-token losses and logits leaning towards the best expert.
pub fn sample_weak_spec_population(rng: &mut Rng, tokens: usize, gamma0: f64) -> (Tensor, Tensor) {
    let experts = 2 + rng.below(7);
    let lean = rng.uniform_in(0.0, 8.0);
    let temp = rng.uniform_in(0.1, 2.0);
    let miss = rng.uniform_in(0.0, 0.2);
    let mut losses = Tensor::zeros(&[tokens, experts]);
    let mut logits = Tensor::zeros(&[tokens, experts]);
    for t in 0..tokens {
        let best = rng.below(experts);
        let base = rng.uniform_in(0.0, 2.0);
        for e in 0..experts {
            let margin = if e == best {
                0.0
            } else if rng.bernoulli(miss) {
                rng.uniform_in(0.0, gamma0)
            } else {
                gamma0 + rng.uniform_in(0.0, 1.5)
            };
            losses.row_mut(t)[e] = base + margin;
            logits.row_mut(t)[e] = temp * rng.normal() + if e == best { lean } else { 0.0 };
        }
    }
    (losses, logits)
}

fn thm_c1_trial(rng: &mut Rng) -> Result<Vec<BoundReport>> {
    let gamma0 = rng.uniform_in(0.05, 0.5);
    let (losses, logits) = sample_weak_spec_population(rng, 400, gamma0);
    let delta = pick(rng, &[0.1, 0.25, 0.5]);
    let below = (0..losses.rows())
        .filter(|&t| {
            let row = losses.row(t);
            let best = row.iter().copied().fold(f64::INFINITY, f64::min);
            let mut sorted = row.to_vec();
            sorted.sort_by(f64::total_cmp);
            sorted[1] - best < gamma0
        })
        .count();
    let eps0 = below as f64 / losses.rows() as f64;
    check_thm_weak_spec(WeakSpecInput { losses: &losses, logits: &logits }, gamma0, eps0, delta)
}

fn thm_c2_trial(rng: &mut Rng) -> Result<BoundReport> {
    let n = 50 + rng.below(200);
    let bound = rng.uniform_in(0.5, 3.0);
    let leak = log_uniform(rng, 1e-3, 0.5);
    let region_share = rng.uniform_in(0.2, 0.8);
    let in_region: Vec<bool> = (0..n).map(|_| rng.bernoulli(region_share)).collect();
    let data_weights: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.5, 1.5)).collect();
    let routing: Vec<f64> =
        in_region.iter().map(|&r| if r { rng.uniform_in(0.5, 1.0) } else { leak * rng.uniform() }).collect();
    let improve = rng.uniform_in(0.0, 1.0);
    let losses_old: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.0, bound)).collect();
    let losses_new: Vec<f64> = losses_old
        .iter()
        .zip(&in_region)
        .map(|(&l, &r)| {
            let v = if r { l - improve * bound * rng.uniform() } else { rng.uniform_in(0.0, bound) };
            v.clamp(0.0, bound)
        })
        .collect();
    let input = RegionRiskInput {
        data_weights: &data_weights,
        routing: &routing,
        in_region: &in_region,
        losses_old: &losses_old,
        losses_new: &losses_new,
    };
    let mass: Vec<f64> = data_weights.iter().zip(&routing).map(|(d, g)| d * g).collect();
    let total: f64 = mass.iter().sum();
    let alpha: f64 = mass.iter().zip(&in_region).filter(|(_, &r)| r).map(|(m, _)| m / total).sum();
    let eta = ((1.0 - alpha) + rng.uniform_in(0.0, 0.02)).clamp(0.0, 0.999);
    check_thm_region_risk(input, eta, bound)
}

fn entropy_trial(rng: &mut Rng) -> Result<BoundReport> {
    let experts = pick(rng, &[4, 8, 16]);
    let delta = pick(rng, &[0.1, 0.25, 0.5]);
    let g = match rng.below(3) {
        0 => {
            let alpha = rng.uniform_in(0.02, 0.3);
            let mut g = dirichlet(rng, experts, alpha);
            let top = (0..experts).fold(0, |b, i| if g[i] > g[b] { i } else { b });
            if g[top] < 1.0 - delta {
                let p = rng.uniform_in(1.0 - delta, 1.0);
                let scale = (1.0 - p) / (1.0 - g[top]);
                for (i, v) in g.iter_mut().enumerate() {
                    *v = if i == top { p } else { *v * scale };
                }
            }
            g
        }
        1 => {
            let p = rng.uniform_in(1.0 - delta, 1.0);
            let alpha = rng.uniform_in(0.1, 5.0);
            let rest = dirichlet(rng, experts - 1, alpha);
            let mut g: Vec<f64> = rest.into_iter().map(|v| v * (1.0 - p)).collect();
            g.insert(rng.below(experts), p);
            g
        }
        _ => {
            let p = 1.0 - delta * rng.uniform().powi(4);
            let mut g = vec![(1.0 - p) / (experts - 1) as f64; experts - 1];
            g.insert(rng.below(experts), p);
            g
        }
    };
    check_entropy_corollary(&g, delta).map(|r| r.with("experts", experts))
}

fn random_assignment(rng: &mut Rng, n: usize, experts: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(experts)).collect()
}

fn coupled_pair(rng: &mut Rng, n: usize, experts: usize) -> (Vec<usize>, Vec<usize>) {
    let first = random_assignment(rng, n, experts);
    let sigma = rng.permutation(experts);
    let keep = rng.uniform();
    let second = first.iter().map(|&c| if rng.bernoulli(keep) { sigma[c] } else { rng.below(experts) }).collect();
    (first, second)
}

fn kappa_trial(rng: &mut Rng) -> Result<BoundReport> {
    let experts = 2 + rng.below(5);
    let n = 1 + rng.below(200);
    let (first, second) = coupled_pair(rng, n, experts);
    let (kappa, _) = coupling_coefficient(&first, &second, experts)?;
    let brute = brute_force_kappa(&first, &second, experts)?;
    Ok(BoundReport::new("kappa.hungarian_vs_brute_force", (kappa - brute).abs(), 0.0).with("kappa", kappa))
}

fn backward_trial(rng: &mut Rng) -> Result<BoundReport> {
    let experts = 2 + rng.below(5);
    let n = 20 + rng.below(400);
    let allocation = random_assignment(rng, n, experts);
    let err = rng.uniform();
    let second: Vec<usize> =
        allocation.iter().map(|&a| if rng.bernoulli(err) { rng.below(experts) } else { a }).collect();
    let sigma = rng.permutation(experts);
    let keep = rng.uniform();
    let first: Vec<usize> = second
        .iter()
        .map(|&c| {
            let pre = sigma.iter().position(|&s| s == c).expect("permutation");
            if rng.bernoulli(keep) {
                pre
            } else {
                rng.below(experts)
            }
        })
        .collect();
    check_backward_transfer(&first, &second, &allocation, experts)
}

/// Counts slabs that break the size or interval property.
pub fn partition_violations(p: &BalancedPartition, experts: usize) -> usize {
    let b = p.assignment.len();
    let m = b / experts;
    let mut bad = 0;
    let mut lo = vec![f64::INFINITY; experts];
    let mut hi = vec![f64::NEG_INFINITY; experts];
    let mut count = vec![0usize; experts];
    for (i, &s) in p.assignment.iter().enumerate() {
        count[s] += 1;
        lo[s] = lo[s].min(p.projections[i]);
        hi[s] = hi[s].max(p.projections[i]);
    }
    for s in 0..experts {
        if count[s] != m {
            bad += 1;
        }
        if s > 0 && (lo[s] < p.thresholds[s - 1] || hi[s - 1] > p.thresholds[s - 1]) {
            bad += 1;
        }
    }
    bad
}

fn partition_trial(rng: &mut Rng) -> Result<BoundReport> {
    let (b, e, h) = (64, 8, 16);
    let tokens = Tensor::new(vec![b, h], rng.normals(b * h, 1.0))?;
    let a = rng.normals(h, 1.0);
    let p = balanced_partition(&tokens, &a, e)?;
    Ok(BoundReport::new("partition.slabs", partition_violations(&p, e) as f64, 0.0))
}

/// Checks optimal coupling and exact balance of a constructed routing.
pub fn check_construction(batch: usize, experts: usize, k: usize, layers: usize, rng: &mut Rng) -> Result<BoundReport> {
    let mut offsets = rng.permutation(experts);
    offsets.truncate(k);
    let eta: Vec<Vec<Vec<f64>>> = (0..layers)
        .map(|_| (0..batch).map(|_| if k == 1 { vec![1.0] } else { dirichlet(rng, k, 1.0) }).collect())
        .collect();
    let routing = construct_coupled_balanced(batch, experts, k, layers, &offsets, &eta)?;
    let cp = coupling_value(&routing.scores, k)?;
    let cp_gap = (cp + (layers - 1) as f64).abs();
    let target = batch * k / experts;
    let unbalanced: usize = routing
        .active
        .iter()
        .map(|sets| expert_loads(sets, experts).iter().filter(|&&l| l != target).count())
        .sum();
    Ok(BoundReport::new("construct.coupled_balanced", cp_gap + unbalanced as f64, 1e-12)
        .with("cp", cp)
        .with("unbalanced_experts", unbalanced)
        .with("shape", vec![batch, experts, k, layers]))
}

fn construct_trial(rng: &mut Rng) -> Result<BoundReport> {
    let experts = 2 + rng.below(15);
    let batch = experts * (1 + rng.below(8));
    let k = 1 + rng.below(experts.min(4));
    let layers = 2 + rng.below(5);
    check_construction(batch, experts, k, layers, rng)
}

use itertools::Itertools;
use moelab::moe::expert_loads;
use moelab::numeric::{cosine, Rng, Tensor};
use moelab::theory::suites::{check_construction, sample_prop2_instance};
use moelab::theory::*;
use moelab::{MoeConfig, MoeModel};
use proptest::prelude::*;

fn config(experts: usize, top_k: usize, hidden: usize, ffn: usize) -> MoeConfig {
    MoeConfig { experts, top_k, layers: 2, hidden, ffn, vocab: 16, ..MoeConfig::default() }
}

#[test]
fn prop1_identical_experts_have_unit_cosines() {
    let mut model = MoeModel::new(config(4, 2, 8, 16), &mut Rng::new(3)).unwrap();
    for layer in model.layers.clone() {
        let first = layer.experts[0];
        for other in &layer.experts[1..] {
            for (src, dst) in [(first.gate, other.gate), (first.up, other.up), (first.down, other.down)] {
                let v = model.params.value(src).clone();
                model.params.get_mut(dst).value = v;
            }
        }
    }
    let r = check_prop1_gradient_alignment(&model, 5, 2).unwrap();
    assert!(r.applicable && r.holds);
    assert!(r.lhs < 1e-12, "{}", r.lhs);
}

#[test]
fn prop1_single_slot_is_vacuous() {
    let model = MoeModel::new(config(4, 1, 8, 16), &mut Rng::new(1)).unwrap();
    let r = check_prop1_gradient_alignment(&model, 0, 0).unwrap();
    assert!(!r.applicable && !r.violated());
    assert_eq!(r.context["vacuous"], serde_json::json!(true));
}

#[test]
fn prop1_holds_on_fifty_random_configs() {
    let mut rng = Rng::new(11);
    for trial in 0..50 {
        let cfg = config([4, 8][trial % 2], [2, 3][(trial / 2) % 2], [8, 16][(trial / 4) % 2], [16, 32][(trial / 8) % 2]);
        let model = MoeModel::new(cfg, &mut rng).unwrap();
        let r = check_prop1_gradient_alignment(&model, rng.below(16) as u32, rng.below(16)).unwrap();
        assert!(r.applicable && r.holds, "trial {trial}: gap {}", r.lhs);
    }
}

fn axis(h: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; h];
    v[i] = 1.0;
    v
}

fn tilt(v: &[f64], towards: &[f64], cos: f64) -> Vec<f64> {
    let sin = (1.0 - cos * cos).sqrt();
    v.iter().zip(towards).map(|(a, b)| cos * a + sin * b).collect()
}

#[test]
fn prop2_constructed_instance_has_positive_slack() {
    let (delta, eps, iota): (f64, f64, f64) = (0.05, 0.1, 0.05);
    let h = 6;
    let r0 = axis(h, 0);
    let r1 = tilt(&axis(h, 1), &axis(h, 0), (1.0 - eps * eps).sqrt());
    assert!((cosine(&r0, &r1) - eps).abs() < 1e-12);
    let x0 = tilt(&r0, &axis(h, 2), 1.0 - iota * iota);
    let x1 = tilt(&r1, &axis(h, 3), 1.0 - iota * iota);
    let x0n = tilt(&x0, &axis(h, 4), 1.0 - delta * delta);
    let x1n = tilt(&x1, &axis(h, 5), 1.0 - delta * delta);
    let inst = Prop2Instance {
        x: vec![x0, x1],
        x_next: vec![x0n.clone(), x1n.clone()],
        routers: vec![r0, r1],
        routers_next: vec![x1n, x0n],
        active: vec![vec![0], vec![1]],
        active_next: vec![vec![1], vec![0]],
    };
    let r = check_prop2_propagation(&inst, delta, eps, iota).unwrap();
    assert!(r.applicable && r.holds);
    assert!(r.slack > 0.3, "{r:?}");
    let bound = eps + 2.0 * 2f64.sqrt() * (delta + 2.0 * iota) + 2.0 * (delta + 2.0 * iota).powi(2);
    assert!((r.rhs - bound).abs() < 1e-15);
}

#[test]
fn entropy_bound_closed_forms() {
    let b = entropy_bound(0.5, 8).unwrap();
    assert!((b - (2f64.ln() + 0.5 * 7f64.ln())).abs() < 1e-15);
    assert!((b - 1.6662).abs() < 1e-3);
    assert!((router_entropy(&[0.125; 8]) - 8f64.ln()).abs() < 1e-15);
    assert_eq!(router_entropy(&[0.0, 1.0, 0.0]), 0.0);
    assert!(entropy_bound(0.0, 4).is_err());
    assert!(entropy_bound(0.6, 4).is_err());
}

#[test]
fn weak_spec_population_with_four_experts() {
    let gamma0 = 0.2;
    let n = 4000;
    for (seed, delta) in [0.1, 0.25, 0.5].into_iter().enumerate() {
        let mut rng = Rng::new(seed as u64);
        let mut losses = Tensor::zeros(&[n, 4]);
        let mut logits = Tensor::zeros(&[n, 4]);
        let mut small = 0;
        for t in 0..n {
            let best = rng.below(4);
            let wide = rng.bernoulli(0.95);
            small += usize::from(!wide);
            for e in 0..4 {
                let margin = match (e == best, wide) {
                    (true, _) => 0.0,
                    (false, true) => gamma0 + rng.uniform(),
                    (false, false) => gamma0 * rng.uniform(),
                };
                losses.row_mut(t)[e] = 1.0 + margin;
                logits.row_mut(t)[e] = rng.normal() + if e == best { 4.0 } else { 0.0 };
            }
        }
        let eps0 = small as f64 / n as f64;
        let reports = check_thm_weak_spec(WeakSpecInput { losses: &losses, logits: &logits }, gamma0, eps0, delta).unwrap();
        assert_eq!(reports.len(), 3);
        for r in &reports {
            assert!(!r.violated(), "{r:?}");
        }
        assert!(reports[2].applicable);
    }
}

fn brute_kappa(first: &[usize], second: &[usize], experts: usize) -> f64 {
    (0..experts)
        .permutations(experts)
        .map(|p| first.iter().zip(second).filter(|&(&a, &b)| p[a] == b).count())
        .max()
        .unwrap() as f64
        / first.len() as f64
}

fn assignments(seed: u64, n: usize, experts: usize, keep: f64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let sigma = rng.permutation(experts);
    let first: Vec<usize> = (0..n).map(|_| rng.below(experts)).collect();
    let second = first.iter().map(|&c| if rng.bernoulli(keep) { sigma[c] } else { rng.below(experts) }).collect();
    (first, second)
}

#[test]
fn kappa_matches_factorial_search_on_200_instances() {
    for seed in 0..200u64 {
        let experts = 2 + (seed as usize % 5);
        let (a, b) = assignments(seed, 1 + (seed as usize * 37) % 150, experts, (seed % 7) as f64 / 6.0);
        let (kappa, _) = coupling_coefficient(&a, &b, experts).unwrap();
        assert_eq!(kappa, brute_kappa(&a, &b, experts), "seed {seed}");
        assert_eq!(kappa, brute_force_kappa(&a, &b, experts).unwrap());
    }
}

#[test]
fn independent_assignments_give_quarter_kappa() {
    let mut rng = Rng::new(5);
    let a: Vec<usize> = (0..40_000).map(|_| rng.below(4)).collect();
    let b: Vec<usize> = (0..40_000).map(|_| rng.below(4)).collect();
    let (kappa, _) = coupling_coefficient(&a, &b, 4).unwrap();
    assert!((kappa - 0.25).abs() < 0.01, "{kappa}");
}

#[test]
fn backward_transfer_constructed_instance() {
    let experts = 5;
    let n = 100;
    let allocation: Vec<usize> = (0..n).map(|i| i % experts).collect();
    let sigma = [3, 0, 4, 1, 2];
    // Ten tokens disagree with the allocation at ℓ+1, ten others break the relabeling at ℓ.
    let second: Vec<usize> =
        allocation.iter().enumerate().map(|(i, &a)| if i < 10 { (a + 1) % experts } else { a }).collect();
    let first: Vec<usize> = second
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let pre = sigma.iter().position(|&s| s == c).unwrap();
            if (50..60).contains(&i) {
                (pre + 2) % experts
            } else {
                pre
            }
        })
        .collect();
    let r = check_backward_transfer(&first, &second, &allocation, experts).unwrap();
    assert_eq!(r.context["eps_next"], serde_json::json!(0.1));
    assert_eq!(r.context["kappa"], serde_json::json!(0.9));
    assert!(r.holds && r.lhs <= 0.2 + 1e-12, "{r:?}");

    let exact = check_backward_transfer(&allocation, &allocation, &allocation, experts).unwrap();
    assert_eq!((exact.lhs, exact.rhs), (0.0, 0.0));
}

#[test]
fn collinear_partition_is_sorted_chunks() {
    let values = [3.0, -1.0, 7.0, 0.5, 2.0, 9.0];
    let tokens = Tensor::from_rows(&values.iter().map(|&v| vec![v, 2.0 * v]).collect::<Vec<_>>()).unwrap();
    let p = balanced_partition(&tokens, &[1.0, 2.0], 3).unwrap();
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    for (rank, &i) in order.iter().enumerate() {
        assert_eq!(p.assignment[i], rank / 2);
    }
}

/// `−Σ_e s_e Σ_{ν ∈ top-k(s'·s_e)} s'_ν` summed over adjacent layers, averaged over tokens.
fn coupling_oracle(scores: &[Tensor], k: usize) -> f64 {
    let batch = scores[0].rows();
    let mut total = 0.0;
    for pair in scores.windows(2) {
        for i in 0..batch {
            let (lo, up) = (pair[0].row(i), pair[1].row(i));
            for &s in lo {
                let mut joint: Vec<f64> = up.iter().map(|&u| s * u).collect();
                joint.sort_by(|a, b| b.total_cmp(a));
                total -= joint[..k].iter().sum::<f64>();
            }
        }
    }
    total / batch as f64
}

#[test]
fn coupled_balanced_construction_is_optimal_and_balanced() {
    let mut rng = Rng::new(17);
    for (b, e, k, l) in [(4, 2, 1, 3), (16, 4, 2, 4), (64, 8, 2, 3)] {
        let mut offsets = rng.permutation(e);
        offsets.truncate(k);
        let routing = construct_coupled_balanced(b, e, k, l, &offsets, &uniform_eta(l, b, k)).unwrap();
        let cp = coupling_oracle(&routing.scores, k);
        assert!((cp + (l - 1) as f64).abs() <= 1e-12, "{cp}");
        for layer in &routing.active {
            assert!(expert_loads(layer, e).iter().all(|&n| n == b * k / e));
        }
        let r = check_construction(b, e, k, l, &mut rng).unwrap();
        assert!(r.holds, "{r:?}");
    }
}

#[test]
fn four_by_two_alternating_loads() {
    let routing = construct_coupled_balanced(4, 2, 1, 3, &[0], &uniform_eta(3, 4, 1)).unwrap();
    for layer in &routing.active {
        assert_eq!(expert_loads(layer, 2), vec![2, 2]);
    }
    assert_eq!(coupling_oracle(&routing.scores, 1), -2.0);
}

fn blobs(rng: &mut Rng, labels: &[usize], centers: &[Vec<f64>], noise: f64) -> Tensor {
    let rows: Vec<Vec<f64>> =
        labels.iter().map(|&c| centers[c].iter().map(|x| x + noise * rng.normal()).collect()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn random_rotation(rng: &mut Rng, h: usize) -> Tensor {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < h {
        let mut v = rng.normals(h, 1.0);
        for b in &q {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / n).collect());
    }
    Tensor::from_rows(&q).unwrap()
}

#[test]
fn cluster_agreement_rotation_and_independence() {
    let mut rng = Rng::new(23);
    let (n, h, e) = (400, 6, 4);
    let centers: Vec<Vec<f64>> = (0..e).map(|_| rng.normals(h, 3.0)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % e).collect();
    let reps = blobs(&mut rng, &labels, &centers, 1.0);
    let reps_next = blobs(&mut rng, &labels, &centers, 1.0);
    let baseline = cluster_agreement(&reps, &reps_next, e, 7).unwrap();
    let rotated = reps_next.matmul(&random_rotation(&mut rng, h)).unwrap();
    let turned = cluster_agreement(&reps, &rotated, e, 7).unwrap();
    assert!(turned >= baseline - 5.0, "{turned} vs {baseline}");
    assert!(baseline > 80.0);

    let other: Vec<usize> = (0..n).map(|_| rng.below(e)).collect();
    let mut trials = Vec::new();
    for _ in 0..5 {
        let a = blobs(&mut rng, &labels, &centers, 1.0);
        let b = blobs(&mut rng, &other, &centers, 1.0);
        trials.push(cluster_agreement(&a, &b, e, 3).unwrap());
    }
    let mean = trials.iter().sum::<f64>() / trials.len() as f64;
    assert!((mean - 25.0).abs() < 6.0, "{trials:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kappa_is_invariant_under_relabeling(seed in 0u64..100_000, e in 2usize..7, n in 1usize..120) {
        let (a, b) = assignments(seed, n, e, 0.5);
        let mut rng = Rng::new(seed ^ 0xabc);
        let (s, t) = (rng.permutation(e), rng.permutation(e));
        let a2: Vec<usize> = a.iter().map(|&x| s[x]).collect();
        let b2: Vec<usize> = b.iter().map(|&x| t[x]).collect();
        let (k1, p1) = coupling_coefficient(&a, &b, e).unwrap();
        let (k2, p2) = coupling_coefficient(&a2, &b2, e).unwrap();
        prop_assert_eq!(k1, k2);
        prop_assert_eq!(k1, brute_kappa(&a, &b, e));
        let conj: Vec<usize> = {
            let mut c = vec![0; e];
            for x in 0..e { c[s[x]] = t[p1[x]]; }
            c
        };
        let matched = |p: &[usize]| a2.iter().zip(&b2).filter(|&(&x, &y)| p[x] == y).count();
        prop_assert_eq!(matched(&conj), matched(&p2));
    }

    #[test]
    fn partition_ignores_positive_scaling(seed in 0u64..100_000, scale in 1e-3f64..1e3) {
        let mut rng = Rng::new(seed);
        let tokens = Tensor::matrix(64, 16, rng.normals(64 * 16, 1.0)).unwrap();
        let a = rng.normals(16, 1.0);
        let scaled: Vec<f64> = a.iter().map(|x| x * scale).collect();
        let p = balanced_partition(&tokens, &a, 8).unwrap();
        prop_assert_eq!(&p.assignment, &balanced_partition(&tokens, &scaled, 8).unwrap().assignment);
        prop_assert_eq!(suites::partition_violations(&p, 8), 0);
    }

    #[test]
    fn prop2_never_violated(seed in 0u64..1_000_000, pad in 0.0f64..0.3) {
        let inst = sample_prop2_instance(&mut Rng::new(seed));
        if let Some((d, e, i)) = inst.tight_parameters() {
            for (d, e, i) in [(d, e, i), (d + pad, e + pad, i + pad)] {
                let r = check_prop2_propagation(&inst, d, e, i).unwrap();
                prop_assert!(!r.violated(), "{:?}", r);
            }
        }
    }

    #[test]
    fn entropy_bound_holds_on_decisive_vectors(
        raw in prop::collection::vec(0.0f64..1.0, 3..16),
        delta in prop::sample::select(vec![0.1, 0.25, 0.5]),
        top in 0.0f64..1.0,
    ) {
        let p = 1.0 - delta * top;
        let rest: f64 = raw.iter().sum::<f64>().max(1e-300);
        let mut g: Vec<f64> = raw.iter().map(|v| v / rest * (1.0 - p)).collect();
        g.push(p);
        let r = check_entropy_corollary(&g, delta).unwrap();
        prop_assert!(r.applicable && r.holds, "{:?}", r);
    }

    #[test]
    fn backward_transfer_union_bound(seed in 0u64..100_000, e in 2usize..7, n in 1usize..200) {
        let mut rng = Rng::new(seed);
        let alloc: Vec<usize> = (0..n).map(|_| rng.below(e)).collect();
        let (a, b) = assignments(seed + 1, n, e, rng.uniform());
        let r = check_backward_transfer(&a, &b, &alloc, e).unwrap();
        prop_assert!(r.holds, "{:?}", r);
    }
}

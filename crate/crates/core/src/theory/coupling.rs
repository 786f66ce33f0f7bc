//! Permutation-invariant cross-layer coupling, backward transfer and
//! representation cluster agreement.

use crate::error::{Error, Result};
use crate::numeric::{Rng, Tensor};

use super::BoundReport;

/// `counts[a][b]` = number of tokens with `first = a` and `second = b`.
pub fn co_occurrence(first: &[usize], second: &[usize], experts: usize) -> Result<Vec<Vec<i64>>> {
    if first.is_empty() {
        return Err(Error::invalid("empty assignment"));
    }
    if first.len() != second.len() {
        return Err(Error::shape("co_occurrence", format!("{} vs {} tokens", first.len(), second.len())));
    }
    let mut counts = vec![vec![0i64; experts]; experts];
    for (&a, &b) in first.iter().zip(second) {
        if a >= experts || b >= experts {
            return Err(Error::invalid(format!("expert id out of range 0..{experts}")));
        }
        counts[a][b] += 1;
    }
    Ok(counts)
}

/// Maximum-weight perfect matching on a square integer matrix (Hungarian
/// algorithm with potentials). Returns `perm` with row `i` matched to column
/// `perm[i]`.
pub fn max_weight_assignment(weights: &[Vec<i64>]) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -weights[i - 1][j - 1];
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    perm
}

/// `κ = max_π P[π(C_ℓ) = C_ℓ₊₁]` and a maximizing relabeling `π*`
/// (`π*[e]` is the layer-ℓ₊₁ expert matched to layer-ℓ expert `e`).
pub fn coupling_coefficient(first: &[usize], second: &[usize], experts: usize) -> Result<(f64, Vec<usize>)> {
    let counts = co_occurrence(first, second, experts)?;
    let perm = max_weight_assignment(&counts);
    let matched: i64 = perm.iter().enumerate().map(|(a, &b)| counts[a][b]).sum();
    Ok((matched as f64 / first.len() as f64, perm))
}

/// Exhaustive κ over all `E!` relabelings; only meant for small `E`.
pub fn brute_force_kappa(first: &[usize], second: &[usize], experts: usize) -> Result<f64> {
    if experts > 9 {
        return Err(Error::invalid("brute force limited to 9 experts"));
    }
    let counts = co_occurrence(first, second, experts)?;
    fn search(counts: &[Vec<i64>], row: usize, used: &mut [bool], acc: i64, best: &mut i64) {
        if row == counts.len() {
            *best = (*best).max(acc);
            return;
        }
        for col in 0..counts.len() {
            if !used[col] {
                used[col] = true;
                search(counts, row + 1, used, acc + counts[row][col], best);
                used[col] = false;
            }
        }
    }
    let mut best = 0;
    search(&counts, 0, &mut vec![false; experts], 0, &mut best);
    Ok(best as f64 / first.len() as f64)
}

/// `P[π*(C_ℓ) ≠ A] ≤ ε_ℓ₊₁ + (1 − κ)`.
pub fn check_backward_transfer(
    first: &[usize],
    second: &[usize],
    allocation: &[usize],
    experts: usize,
) -> Result<BoundReport> {
    if allocation.len() != first.len() {
        return Err(Error::shape("backward_transfer", "allocation length differs"));
    }
    let (kappa, perm) = coupling_coefficient(first, second, experts)?;
    let n = first.len() as f64;
    let eps_next = second.iter().zip(allocation).filter(|(c, a)| c != a).count() as f64 / n;
    let aligned = first.iter().zip(allocation).filter(|&(&c, &a)| perm[c] != a).count() as f64 / n;
    Ok(BoundReport::new("backward_transfer", aligned, eps_next + (1.0 - kappa))
        .with("kappa", kappa)
        .with("eps_next", eps_next)
        .with("perm", perm))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(center, x);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Lloyd's k-means with farthest-point seeding (the first centre is drawn
/// from `seed`), at most 100 iterations. Returns labels and centres.
pub fn kmeans(points: &Tensor, clusters: usize, seed: u64) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let n = points.rows();
    if clusters == 0 || n < clusters {
        return Err(Error::invalid(format!("{n} points cannot form {clusters} clusters")));
    }
    let mut rng = Rng::new(seed);
    let mut centers = vec![points.row(rng.below(n)).to_vec()];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centers[0])).collect();
    while centers.len() < clusters {
        let far = (0..n).fold(0, |b, i| if dist[i] > dist[b] { i } else { b });
        centers.push(points.row(far).to_vec());
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &centers[centers.len() - 1]));
        }
    }
    let mut labels: Vec<usize> = (0..n).map(|i| nearest(&centers, points.row(i))).collect();
    for _ in 0..100 {
        let dim = points.cols();
        let mut sums = vec![vec![0.0; dim]; clusters];
        let mut counts = vec![0usize; clusters];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..clusters {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = (0..n).map(|i| nearest(&centers, points.row(i))).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok((labels, centers))
}

/// Moves the farthest members of oversized clusters to the nearest cluster
/// that still has room, until every cluster holds `⌊n/E⌋` or `⌈n/E⌉` points.
fn balance(points: &Tensor, labels: &mut [usize], centers: &[Vec<f64>]) {
    let (n, e) = (labels.len(), centers.len());
    let mut cap = vec![n / e; e];
    for c in cap.iter_mut().take(n % e) {
        *c += 1;
    }
    let mut sizes = vec![0usize; e];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    // Largest clusters give up points first; capacities follow size order.
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut limit = vec![0; e];
    for (rank, &c) in order.iter().enumerate() {
        limit[c] = cap[rank];
    }
    for &c in &order {
        while sizes[c] > limit[c] {
            let far = (0..n)
                .filter(|&i| labels[i] == c)
                .max_by(|&a, &b| {
                    sq_dist(points.row(a), &centers[c]).total_cmp(&sq_dist(points.row(b), &centers[c])).then(b.cmp(&a))
                })
                .expect("oversized cluster is non-empty");
            let target = (0..e)
                .filter(|&t| sizes[t] < limit[t])
                .min_by(|&a, &b| {
                    sq_dist(points.row(far), &centers[a])
                        .total_cmp(&sq_dist(points.row(far), &centers[b]))
                        .then(a.cmp(&b))
                })
                .expect("an undersized cluster exists");
            labels[far] = target;
            sizes[c] -= 1;
            sizes[target] += 1;
        }
    }
}

/// Percentage of tokens whose balanced k-means cluster at one layer matches
/// the Hungarian-aligned cluster at the next.
pub fn cluster_agreement(reps: &Tensor, reps_next: &Tensor, experts: usize, seed: u64) -> Result<f64> {
    if reps.rows() != reps_next.rows() {
        return Err(Error::shape("cluster_agreement", "token counts differ"));
    }
    if reps.rows() < experts {
        return Err(Error::invalid(format!("{} tokens for {experts} clusters", reps.rows())));
    }
    let (mut a, ca) = kmeans(reps, experts, seed)?;
    let (mut b, cb) = kmeans(reps_next, experts, seed)?;
    balance(reps, &mut a, &ca);
    balance(reps_next, &mut b, &cb);
    let (kappa, _) = coupling_coefficient(&a, &b, experts)?;
    Ok(100.0 * kappa)
}

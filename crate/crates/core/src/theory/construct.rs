//! Constructions showing specialization and coupling are compatible with
//! exact load balance.

use crate::error::{Error, Result};
use crate::numeric::{dot, Tensor};

/// Equal-size slabs along a projection direction.
#[derive(Clone, Debug, PartialEq)]
pub struct BalancedPartition {
    /// Projections `u_i = aᵀx_i`.
    pub projections: Vec<f64>,
    /// `E − 1` cut points, ascending.
    pub thresholds: Vec<f64>,
    /// Slab index of each token.
    pub assignment: Vec<usize>,
}

/// Sorts tokens by `(aᵀx, index)` and cuts the order into `E` consecutive
/// blocks of `B/E`; each threshold is the midpoint between adjacent blocks.
pub fn balanced_partition(tokens: &Tensor, direction: &[f64], experts: usize) -> Result<BalancedPartition> {
    let b = tokens.rows();
    if tokens.shape().len() != 2 || tokens.cols() != direction.len() {
        return Err(Error::shape("balanced_partition", format!("{:?} vs direction {}", tokens.shape(), direction.len())));
    }
    if experts == 0 || !b.is_multiple_of(experts) {
        return Err(Error::invalid(format!("{experts} experts do not divide batch {b}")));
    }
    if direction.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("projection direction is zero"));
    }
    let projections: Vec<f64> = (0..b).map(|i| dot(tokens.row(i), direction)).collect();
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| projections[i].total_cmp(&projections[j]).then(i.cmp(&j)));
    let m = b / experts;
    let mut assignment = vec![0; b];
    for (rank, &i) in order.iter().enumerate() {
        assignment[i] = rank / m;
    }
    let thresholds = (1..experts)
        .map(|e| 0.5 * (projections[order[e * m - 1]] + projections[order[e * m]]))
        .collect();
    Ok(BalancedPartition { projections, thresholds, assignment })
}

/// Score tensors and active sets of a constructed routing.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledRouting {
    /// One `B × E` score matrix per layer.
    pub scores: Vec<Tensor>,
    /// `active[l][i]`: the `k` designated experts of token `i` at layer `l`.
    pub active: Vec<Vec<Vec<usize>>>,
}

/// Equal slot weights `1/k` for every layer and token.
pub fn uniform_eta(layers: usize, batch: usize, k: usize) -> Vec<Vec<Vec<f64>>> {
    vec![vec![vec![1.0 / k as f64; k]; batch]; layers]
}

/// Modular routing `f_ℓ(i)_r = (offset_r + i) mod E` with scores `η` on the
/// designated slots and zero elsewhere. `eta[l][i]` must sum to 1.
pub fn construct_coupled_balanced(
    batch: usize,
    experts: usize,
    k: usize,
    layers: usize,
    offsets: &[usize],
    eta: &[Vec<Vec<f64>>],
) -> Result<CoupledRouting> {
    if experts == 0 || !batch.is_multiple_of(experts) {
        return Err(Error::invalid(format!("{experts} experts do not divide batch {batch}")));
    }
    if k == 0 || k > experts || layers == 0 {
        return Err(Error::invalid(format!("need 1 <= k <= E and L >= 1, got k={k}, L={layers}")));
    }
    if offsets.len() != k || offsets.iter().any(|&o| o >= experts) {
        return Err(Error::invalid("need k offsets in 0..E"));
    }
    let mut seen = offsets.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != k {
        return Err(Error::invalid("offsets must be distinct"));
    }
    if eta.len() != layers || eta.iter().any(|l| l.len() != batch || l.iter().any(|r| r.len() != k)) {
        return Err(Error::shape("construct_coupled_balanced", "eta must be layers × batch × k"));
    }
    for row in eta.iter().flatten() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-12 || row.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid(format!("eta row {row:?} is not a probability vector")));
        }
    }
    let mut scores = Vec::with_capacity(layers);
    let mut active = Vec::with_capacity(layers);
    for layer_eta in eta {
        let mut s = Tensor::zeros(&[batch, experts]);
        let mut sets = Vec::with_capacity(batch);
        for (i, row) in layer_eta.iter().enumerate() {
            let set: Vec<usize> = offsets.iter().map(|&o| (o + i) % experts).collect();
            for (&e, &w) in set.iter().zip(row) {
                s.row_mut(i)[e] = w;
            }
            sets.push(set);
        }
        scores.push(s);
        active.push(sets);
    }
    Ok(CoupledRouting { scores, active })
}

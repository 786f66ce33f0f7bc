//! Path-aware expert placement: cross-layer co-activation graph, greedy
//! capacity-constrained partition, sequence bucketing and a dispatch-locality
//! cost model.
//!
//! Each trace step is one sequence. A sequence is bucketed on the shard that
//! hosts most of its first-layer top-1 experts; dispatches at later layers are
//! local when the expert lives on that shard.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::RoutingTrace;

/// `(layer, expert)`
type Node = (usize, usize);

/// Default remote-dispatch penalty `c`.
pub const REMOTE_PENALTY: f64 = 0.1;

/// Top-1 transition counts between adjacent layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoActivationGraph {
    pub layers: usize,
    pub experts: usize,
    /// `counts[l][e][ν]`: tokens with top-1 `e` at layer `l` and `ν` at `l+1`.
    pub counts: Vec<Vec<Vec<u64>>>,
}

impl CoActivationGraph {
    pub fn build(trace: &RoutingTrace) -> Result<Self> {
        if trace.layers() < 2 {
            return Err(Error::invalid("co-activation needs at least two layers"));
        }
        if trace.num_tokens() == 0 {
            return Err(Error::invalid("empty trace"));
        }
        let (layers, experts) = (trace.layers(), trace.experts());
        let mut counts = vec![vec![vec![0u64; experts]; experts]; layers - 1];
        for (s, t) in trace.positions() {
            for (l, c) in counts.iter_mut().enumerate() {
                c[trace.top1(s, l, t)][trace.top1(s, l + 1, t)] += 1;
            }
        }
        Ok(Self { layers, experts, counts })
    }

    /// Edges `((l, e), (l+1, ν), w)` with `w > 0`, heaviest first, ties by index.
    fn edges(&self) -> Vec<(Node, Node, u64)> {
        let mut out = Vec::new();
        for (l, c) in self.counts.iter().enumerate() {
            for (e, row) in c.iter().enumerate() {
                for (v, &w) in row.iter().enumerate() {
                    if w > 0 {
                        out.push(((l, e), (l + 1, v), w));
                    }
                }
            }
        }
        out.sort_by(|a, b| b.2.cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        out
    }

    /// Total weight of edges whose endpoints share a shard.
    pub fn colocated_weight(&self, placement: &Placement) -> u64 {
        let mut total = 0;
        for (l, c) in self.counts.iter().enumerate() {
            for (e, row) in c.iter().enumerate() {
                for (v, &w) in row.iter().enumerate() {
                    if placement.assign[l][e] == placement.assign[l + 1][v] {
                        total += w;
                    }
                }
            }
        }
        total
    }

    fn weight(&self, a: (usize, usize), b: (usize, usize)) -> u64 {
        match (a.0 + 1 == b.0, b.0 + 1 == a.0) {
            (true, _) => self.counts[a.0][a.1][b.1],
            (_, true) => self.counts[b.0][b.1][a.1],
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub shards: usize,
    /// `assign[l][e]` is the shard of expert `e` at layer `l`.
    pub assign: Vec<Vec<usize>>,
}

impl Placement {
    /// Experts per shard per layer.
    pub fn capacity(&self) -> usize {
        self.assign.first().map_or(0, |a| a.len() / self.shards.max(1))
    }

    /// Expert `e` on shard `e mod S` at every layer.
    pub fn round_robin(layers: usize, experts: usize, shards: usize) -> Result<Self> {
        check_shards(experts, shards)?;
        Ok(Self { shards, assign: vec![(0..experts).map(|e| e % shards).collect(); layers] })
    }

    pub fn validate(&self, layers: usize, experts: usize) -> Result<()> {
        check_shards(experts, self.shards)?;
        if self.assign.len() != layers || self.assign.iter().any(|a| a.len() != experts) {
            return Err(Error::invalid(format!("placement does not cover {layers} layers × {experts} experts")));
        }
        let cap = experts / self.shards;
        for (l, a) in self.assign.iter().enumerate() {
            let mut load = vec![0; self.shards];
            for &s in a {
                if s >= self.shards {
                    return Err(Error::invalid(format!("shard {s} out of range at layer {l}")));
                }
                load[s] += 1;
            }
            if load.iter().any(|&n| n != cap) {
                return Err(Error::invalid(format!("layer {l} loads {load:?} differ from capacity {cap}")));
            }
        }
        Ok(())
    }
}

fn check_shards(experts: usize, shards: usize) -> Result<()> {
    if shards == 0 || !experts.is_multiple_of(shards) {
        return Err(Error::invalid(format!("{shards} shards cannot split {experts} experts evenly")));
    }
    Ok(())
}

struct Builder<'a> {
    graph: &'a CoActivationGraph,
    shards: usize,
    cap: usize,
    assign: Vec<Vec<Option<usize>>>,
    load: Vec<Vec<usize>>,
}

impl Builder<'_> {
    fn room(&self, s: usize, layer: usize) -> bool {
        self.load[layer][s] < self.cap
    }

    fn put(&mut self, (l, e): (usize, usize), s: usize) {
        self.assign[l][e] = Some(s);
        self.load[l][s] += 1;
    }

    /// Weight from `node` to already placed neighbours on shard `s`.
    fn affinity(&self, node: (usize, usize), s: usize) -> u64 {
        let (l, _) = node;
        let mut total = 0;
        for nl in [l.wrapping_sub(1), l + 1] {
            if nl >= self.graph.layers {
                continue;
            }
            for v in 0..self.graph.experts {
                if self.assign[nl][v] == Some(s) {
                    total += self.graph.weight(node, (nl, v));
                }
            }
        }
        total
    }

    fn free(&self, layer: usize) -> usize {
        self.load[layer].iter().filter(|&&n| n < self.cap).count()
    }

    /// Highest affinity, then most free room, then lowest index.
    fn best_shard(&self, nodes: &[(usize, usize)]) -> Option<usize> {
        (0..self.shards)
            .filter(|&s| nodes.iter().all(|&(l, _)| self.room(s, l)))
            .max_by(|&a, &b| {
                let key = |s: usize| {
                    let aff: u64 = nodes.iter().map(|&n| self.affinity(n, s)).sum();
                    let room: usize = nodes.iter().map(|&(l, _)| self.cap - self.load[l][s]).sum();
                    (aff, room)
                };
                key(a).cmp(&key(b)).then(b.cmp(&a))
            })
    }
}

/// Greedy heaviest-edge co-location under per-layer capacity `E / shards`,
/// followed by pairwise swaps within a layer while they raise the co-located
/// weight. Unplaced experts fall back to shard `e mod S` when it has room, so
/// an empty graph yields the round-robin placement. Swap refinement is also
/// run from round-robin and the heavier of the two results is kept.
pub fn partition(graph: &CoActivationGraph, shards: usize) -> Result<Placement> {
    check_shards(graph.experts, shards)?;
    let (layers, experts) = (graph.layers, graph.experts);
    let mut b = Builder {
        graph,
        shards,
        cap: experts / shards,
        assign: vec![vec![None; experts]; layers],
        load: vec![vec![0; shards]; layers],
    };
    for (a, c, _) in graph.edges() {
        match (b.assign[a.0][a.1], b.assign[c.0][c.1]) {
            (None, None) => {
                if let Some(s) = b.best_shard(&[a, c]) {
                    b.put(a, s);
                    b.put(c, s);
                }
            }
            (Some(s), None) if b.room(s, c.0) => b.put(c, s),
            (None, Some(s)) if b.room(s, a.0) => b.put(a, s),
            _ => {}
        }
    }
    for l in 0..layers {
        for e in 0..experts {
            if b.assign[l][e].is_some() {
                continue;
            }
            let node = (l, e);
            let best_aff = (0..shards).filter(|&s| b.room(s, l)).map(|s| b.affinity(node, s)).max();
            let preferred = e % shards;
            let s = if b.room(preferred, l) && Some(b.affinity(node, preferred)) == best_aff {
                preferred
            } else {
                b.best_shard(&[node]).expect("capacity is exact")
            };
            b.put(node, s);
        }
        debug_assert_eq!(b.free(l), 0);
    }
    let mut placement =
        Placement { shards, assign: b.assign.into_iter().map(|a| a.into_iter().map(|s| s.expect("placed")).collect()).collect() };
    improve_by_swaps(graph, &mut placement);
    let mut rr = Placement::round_robin(layers, experts, shards)?;
    improve_by_swaps(graph, &mut rr);
    Ok(if graph.colocated_weight(&rr) > graph.colocated_weight(&placement) { rr } else { placement })
}

fn improve_by_swaps(graph: &CoActivationGraph, p: &mut Placement) {
    let mut current = graph.colocated_weight(p);
    for _ in 0..100 {
        let mut improved = false;
        for l in 0..graph.layers {
            for a in 0..graph.experts {
                for c in a + 1..graph.experts {
                    if p.assign[l][a] == p.assign[l][c] {
                        continue;
                    }
                    p.assign[l].swap(a, c);
                    let w = graph.colocated_weight(p);
                    if w > current {
                        current = w;
                        improved = true;
                    } else {
                        p.assign[l].swap(a, c);
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub local_fraction: f64,
    pub local_dispatches: u64,
    pub remote_dispatches: u64,
    /// `(1 + c·r_rr) / (1 + c·r)` with `r` the remote fraction under this
    /// placement and `r_rr` under round-robin on the same trace.
    pub est_throughput_ratio: f64,
    pub remote_penalty: f64,
}

fn locality(trace: &RoutingTrace, placement: &Placement) -> (u64, u64) {
    let (mut local, mut remote) = (0u64, 0u64);
    for (s, step) in trace.steps().iter().enumerate() {
        let mut votes = vec![0usize; placement.shards];
        for t in 0..step.tokens.len() {
            votes[placement.assign[0][trace.top1(s, 0, t)]] += 1;
        }
        let bucket = (0..placement.shards).fold(0, |b, x| if votes[x] > votes[b] { x } else { b });
        for t in 0..step.tokens.len() {
            for l in 1..trace.layers() {
                for &e in trace.active(s, l, t) {
                    if placement.assign[l][e as usize] == bucket {
                        local += 1;
                    } else {
                        remote += 1;
                    }
                }
            }
        }
    }
    (local, remote)
}

fn remote_fraction(local: u64, remote: u64) -> f64 {
    if local + remote == 0 {
        0.0
    } else {
        remote as f64 / (local + remote) as f64
    }
}

pub fn bucket_and_score(trace: &RoutingTrace, placement: &Placement, remote_penalty: f64) -> Result<CostReport> {
    placement.validate(trace.layers(), trace.experts())?;
    if !(remote_penalty >= 0.0 && remote_penalty.is_finite()) {
        return Err(Error::invalid(format!("remote penalty {remote_penalty} must be finite and >= 0")));
    }
    let (local, remote) = locality(trace, placement);
    let rr = Placement::round_robin(trace.layers(), trace.experts(), placement.shards)?;
    let (rr_local, rr_remote) = locality(trace, &rr);
    let r = remote_fraction(local, remote);
    let r_rr = remote_fraction(rr_local, rr_remote);
    Ok(CostReport {
        local_fraction: 1.0 - r,
        local_dispatches: local,
        remote_dispatches: remote,
        est_throughput_ratio: (1.0 + remote_penalty * r_rr) / (1.0 + remote_penalty * r),
        remote_penalty,
    })
}

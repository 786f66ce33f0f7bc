//! Synthetic corpus with a planted token-to-region allocation.
//!
//! The vocabulary is cut into `n_clusters` contiguous blocks. Each sequence
//! walks a cluster-level Markov chain (stay with probability `markov_stay`,
//! otherwise jump uniformly to another cluster). On entering a cluster the
//! sequence emits a uniform member; while it stays, the next token is the
//! image of the current one under a fixed per-cluster permutation.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::MoeModel;
use crate::numeric::{Rng, Tensor};

pub const CORPUS_MAGIC: [u8; 4] = *b"MOEC";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_clusters: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub n_seqs: usize,
    pub markov_stay: f64,
    pub embed_sep: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_clusters: 8, vocab: 64, seq_len: 32, n_seqs: 256, markov_stay: 0.9, embed_sep: 4.0, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_clusters == 0 || self.n_clusters > self.vocab {
            return bad(format!("n_clusters = {} must lie in 1..=vocab ({})", self.n_clusters, self.vocab));
        }
        if self.vocab > u32::MAX as usize {
            return bad(format!("vocab {} does not fit token ids", self.vocab));
        }
        if self.seq_len < 2 || self.n_seqs == 0 {
            return bad(format!("need seq_len >= 2 and n_seqs >= 1, got {} and {}", self.seq_len, self.n_seqs));
        }
        if !(0.0..=1.0).contains(&self.markov_stay) {
            return bad(format!("markov_stay = {} outside [0, 1]", self.markov_stay));
        }
        if !(self.embed_sep >= 0.0 && self.embed_sep.is_finite()) {
            return bad(format!("embed_sep = {} must be finite and non-negative", self.embed_sep));
        }
        Ok(())
    }
}

/// Ground-truth region of every token id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentAllocation {
    pub regions: usize,
    /// `region[t]` for token id `t`.
    pub region: Vec<usize>,
}

impl LatentAllocation {
    /// Contiguous blocks: token `t` belongs to region `⌊t·C/V⌋`.
    pub fn contiguous(vocab: usize, regions: usize) -> Result<Self> {
        if regions == 0 || regions > vocab {
            return Err(Error::invalid(format!("{regions} regions over {vocab} tokens")));
        }
        Ok(Self { regions, region: (0..vocab).map(|t| t * regions / vocab).collect() })
    }

    pub fn of(&self, token: u32) -> usize {
        self.region[token as usize]
    }

    pub fn members(&self, region: usize) -> Vec<u32> {
        (0..self.region.len()).filter(|&t| self.region[t] == region).map(|t| t as u32).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.regions];
        for &r in &self.region {
            s[r] += 1;
        }
        s
    }

    /// Share of the vocabulary in each region; sums to 1.
    pub fn measure(&self) -> Vec<f64> {
        self.sizes().into_iter().map(|s| s as f64 / self.region.len() as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: SynthConfig,
    pub sequences: Vec<Vec<u32>>,
    pub allocation: LatentAllocation,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: SynthConfig,
    allocation: LatentAllocation,
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let allocation = LatentAllocation::contiguous(cfg.vocab, cfg.n_clusters)?;
    let members: Vec<Vec<u32>> = (0..cfg.n_clusters).map(|c| allocation.members(c)).collect();
    let root = Rng::new(cfg.seed);
    let mut succ = vec![0u32; cfg.vocab];
    let mut perm_rng = root.derive(u64::MAX);
    for m in &members {
        let p = perm_rng.permutation(m.len());
        for (i, &t) in m.iter().enumerate() {
            succ[t as usize] = m[p[i]];
        }
    }
    let sequences = (0..cfg.n_seqs)
        .map(|s| {
            let mut rng = root.derive(s as u64);
            let mut cluster = rng.below(cfg.n_clusters);
            let mut seq: Vec<u32> = Vec::with_capacity(cfg.seq_len);
            for pos in 0..cfg.seq_len {
                let stay = pos > 0 && (cfg.n_clusters == 1 || rng.bernoulli(cfg.markov_stay));
                let token = match seq.last() {
                    Some(&prev) if stay => succ[prev as usize],
                    _ => {
                        if pos > 0 {
                            let jump = rng.below(cfg.n_clusters - 1);
                            cluster = if jump >= cluster { jump + 1 } else { jump };
                        }
                        let m = &members[cluster];
                        m[rng.below(m.len())]
                    }
                };
                seq.push(token);
            }
            seq
        })
        .collect();
    Ok(Corpus { config: cfg.clone(), sequences, allocation })
}

impl Corpus {
    pub fn to_bytes(&self) -> Vec<u8> {
        let seq_len = self.sequences.first().map_or(0, Vec::len);
        let mut out = Vec::with_capacity(16 + 4 * self.sequences.len() * seq_len);
        out.extend_from_slice(&CORPUS_MAGIC);
        for v in [CORPUS_VERSION, self.sequences.len() as u32, seq_len as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.sequences.iter().flatten() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    fn sequences_from_bytes(bytes: &[u8]) -> Result<Vec<Vec<u32>>> {
        if bytes.len() < 16 || bytes[..4] != CORPUS_MAGIC {
            return Err(Error::format("corpus", "bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != CORPUS_VERSION {
            return Err(Error::format("corpus", format!("unsupported version {}", word(4))));
        }
        let (n, len) = (word(8) as usize, word(12) as usize);
        if bytes.len() != 16 + 4 * n * len {
            return Err(Error::format("corpus", format!("expected {} token bytes, found {}", 4 * n * len, bytes.len() - 16)));
        }
        Ok((0..n).map(|s| (0..len).map(|p| word(16 + 4 * (s * len + p))).collect()).collect())
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the token blocks to `path` and the config and allocation to
    /// `path` with a `.json` extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::File::create(path)?.write_all(&self.to_bytes())?;
        let side = Sidecar { config: self.config.clone(), allocation: self.allocation.clone() };
        fs::write(Self::sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let sequences = Self::sequences_from_bytes(&bytes)?;
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(Self::sidecar_path(path))?)?;
        if sequences.iter().flatten().any(|&t| t as usize >= side.allocation.region.len()) {
            return Err(Error::format("corpus", "token id outside the allocation"));
        }
        Ok(Self { config: side.config, sequences, allocation: side.allocation })
    }
}

/// Unit-norm cluster directions, mutually orthogonal when `count ≤ dim`.
fn cluster_directions(rng: &mut Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    while dirs.len() < count {
        let mut v = rng.normals(dim, 1.0);
        if dirs.len() < dim {
            for d in &dirs {
                let p: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            dirs.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    dirs
}

/// Resets the token embeddings to `center(region) + N(0, I)`. Centres sit on
/// orthogonal axes at distance `embed_sep` from each other.
pub fn plant_embeddings(model: &mut MoeModel, allocation: &LatentAllocation, embed_sep: f64, rng: &mut Rng) -> Result<()> {
    let (vocab, hidden) = (model.config().vocab, model.config().hidden);
    if allocation.region.len() != vocab {
        return Err(Error::invalid(format!("allocation covers {} tokens, model vocab is {vocab}", allocation.region.len())));
    }
    let dirs = cluster_directions(rng, allocation.regions, hidden);
    let radius = embed_sep / std::f64::consts::SQRT_2;
    let mut data = Vec::with_capacity(vocab * hidden);
    for t in 0..vocab {
        let d = &dirs[allocation.region[t]];
        data.extend(d.iter().map(|c| radius * c + rng.normal()));
    }
    model.params.get_mut(model.embed).value = Tensor::matrix(vocab, hidden, data)?;
    Ok(())
}

/// Training accuracy of the best linear classifier found by multinomial
/// logistic regression (full-batch gradient descent from zero, fixed budget).
pub fn linear_probe_accuracy(features: &Tensor, labels: &[usize], classes: usize) -> Result<f64> {
    let (n, d) = (features.rows(), features.cols());
    if labels.len() != n || n == 0 {
        return Err(Error::invalid("labels do not match features"));
    }
    if labels.iter().any(|&c| c >= classes) {
        return Err(Error::invalid("label out of range"));
    }
    let scale = (0..n).map(|i| features.row(i).iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / n as f64;
    let lr = 1.0 / scale.max(1e-12);
    let mut w = vec![vec![0.0; d + 1]; classes];
    let predict = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        let logits: Vec<f64> = w.iter().map(|wc| wc[d] + wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect();
        crate::numeric::softmax(&logits)
    };
    for _ in 0..500 {
        let mut grad = vec![vec![0.0; d + 1]; classes];
        for i in 0..n {
            let x = features.row(i);
            let p = predict(&w, x);
            for c in 0..classes {
                let err = p[c] - f64::from(u8::from(c == labels[i]));
                for (g, xv) in grad[c][..d].iter_mut().zip(x) {
                    *g += err * xv;
                }
                grad[c][d] += err;
            }
        }
        for (wc, gc) in w.iter_mut().zip(&grad) {
            for (a, g) in wc.iter_mut().zip(gc) {
                *a -= lr * g / n as f64;
            }
        }
    }
    let correct = (0..n)
        .filter(|&i| {
            let p = predict(&w, features.row(i));
            let best = (0..classes).fold(0, |b, c| if p[c] > p[b] { c } else { b });
            best == labels[i]
        })
        .count();
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_is_balanced_when_divisible() {
        let a = LatentAllocation::contiguous(64, 8).unwrap();
        assert_eq!(a.sizes(), vec![8; 8]);
        assert_eq!(a.measure().iter().sum::<f64>(), 1.0);
        assert_eq!(a.of(9), 1);
        assert!(LatentAllocation::contiguous(4, 5).is_err());
    }

    #[test]
    fn full_stay_keeps_one_cluster() {
        let cfg = SynthConfig { markov_stay: 1.0, n_seqs: 20, ..SynthConfig::default() };
        let c = generate_corpus(&cfg).unwrap();
        for s in &c.sequences {
            assert!(s.iter().all(|&t| c.allocation.of(t) == c.allocation.of(s[0])));
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = generate_corpus(&SynthConfig { n_seqs: 3, seq_len: 5, ..SynthConfig::default() }).unwrap();
        assert_eq!(Corpus::sequences_from_bytes(&c.to_bytes()).unwrap(), c.sequences);
        let mut bad = c.to_bytes();
        bad[0] = b'X';
        assert!(Corpus::sequences_from_bytes(&bad).is_err());
        assert!(Corpus::sequences_from_bytes(&c.to_bytes()[..20]).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(SynthConfig { n_clusters: 70, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { markov_stay: 1.5, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { seq_len: 1, ..SynthConfig::default() }.validate().is_err());
    }
}

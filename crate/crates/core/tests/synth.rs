use moelab::numeric::{Rng, Tensor};
use moelab::synth::*;
use moelab::{MoeConfig, MoeModel};
use proptest::prelude::*;

#[test]
fn uniform_switching_gives_uniform_cluster_marginals() {
    let cfg = SynthConfig { markov_stay: 0.125, n_seqs: 400, seq_len: 50, ..SynthConfig::default() };
    let c = generate_corpus(&cfg).unwrap();
    let mut counts = [0usize; 8];
    for &t in c.sequences.iter().flatten() {
        counts[c.allocation.of(t)] += 1;
    }
    let n = (cfg.n_seqs * cfg.seq_len) as f64;
    let sigma = (n * 0.125 * 0.875).sqrt();
    for &k in &counts {
        assert!((k as f64 - n / 8.0).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn staying_follows_the_cluster_permutation() {
    let c = generate_corpus(&SynthConfig { markov_stay: 1.0, n_seqs: 30, ..SynthConfig::default() }).unwrap();
    let mut next = std::collections::HashMap::new();
    for s in &c.sequences {
        for w in s.windows(2) {
            assert_eq!(c.allocation.of(w[0]), c.allocation.of(w[1]));
            assert_eq!(*next.entry(w[0]).or_insert(w[1]), w[1]);
        }
    }
}

#[test]
fn same_seed_same_bytes() {
    let cfg = SynthConfig { seed: 9, ..SynthConfig::default() };
    let a = generate_corpus(&cfg).unwrap().to_bytes();
    assert_eq!(a, generate_corpus(&cfg).unwrap().to_bytes());
    assert_ne!(a, generate_corpus(&SynthConfig { seed: 10, ..cfg }).unwrap().to_bytes());
}

#[test]
fn corpus_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.bin");
    let c = generate_corpus(&SynthConfig { n_seqs: 10, ..SynthConfig::default() }).unwrap();
    c.save(&path).unwrap();
    assert!(path.with_extension("json").exists());
    assert_eq!(Corpus::load(&path).unwrap(), c);
}

fn planted(sep: f64, vocab: usize) -> (MoeModel, LatentAllocation) {
    let cfg = MoeConfig { vocab, hidden: 32, ..MoeConfig::default() };
    let mut model = MoeModel::new(cfg, &mut Rng::new(0)).unwrap();
    let alloc = LatentAllocation::contiguous(vocab, 8).unwrap();
    plant_embeddings(&mut model, &alloc, sep, &mut Rng::new(5)).unwrap();
    (model, alloc)
}

#[test]
fn separation_shifts_clusters_rigidly() {
    let (noise, alloc) = planted(0.0, 64);
    let (shifted, _) = planted(6.0, 64);
    let (a, b) = (noise.params.value(noise.embed), shifted.params.value(shifted.embed));
    let shift = |t: usize| -> Vec<f64> { b.row(t).iter().zip(a.row(t)).map(|(x, y)| x - y).collect() };
    let centre = |r: usize| shift(alloc.members(r)[0] as usize);
    for t in 0..64 {
        let (s, c) = (shift(t), centre(alloc.region[t]));
        assert!(s.iter().zip(&c).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!((s.iter().map(|x| x * x).sum::<f64>().sqrt() - 6.0 / 2f64.sqrt()).abs() < 1e-12);
    }
    let d: f64 = centre(0).iter().zip(centre(1)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    assert!((d - 6.0).abs() < 1e-9);
}

#[test]
fn probe_accuracy_grows_with_separation() {
    let mut acc = Vec::new();
    for sep in [0.0, 2.0, 10.0] {
        let (m, alloc) = planted(sep, 512);
        acc.push(linear_probe_accuracy(m.params.value(m.embed), &alloc.region, 8).unwrap());
    }
    assert!(acc[0] <= acc[1] && acc[1] <= acc[2], "{acc:?}");
    assert!(acc[2] >= 0.99, "{acc:?}");
}

#[test]
fn probe_rejects_bad_labels() {
    let x = Tensor::zeros(&[2, 2]);
    assert!(linear_probe_accuracy(&x, &[0], 2).is_err());
    assert!(linear_probe_accuracy(&x, &[0, 3], 2).is_err());
}

proptest! {
    #[test]
    fn allocation_is_near_balanced(vocab in 1usize..300, c in 1usize..40) {
        prop_assume!(c <= vocab);
        let a = LatentAllocation::contiguous(vocab, c).unwrap();
        let sizes = a.sizes();
        let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        if vocab % c == 0 {
            prop_assert_eq!(lo, hi);
        }
        prop_assert!((a.measure().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

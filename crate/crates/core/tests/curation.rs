use std::collections::HashSet;

use cmg_core::pipeline::{
    mine_pairs, mine_pairs_naive, sample_negative_pairs, split, subsample_simnet, MiningConfig,
    SubsampleConfig,
};
use cmg_core::synth::synth_corpus;
use cmg_core::MoleculeRecord;
use proptest::prelude::*;

fn corpus(n: usize, seed: u64) -> Vec<MoleculeRecord> {
    synth_corpus(n, seed)
        .unwrap()
        .into_iter()
        .map(|(s, p)| MoleculeRecord::new(s, p).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pruned_mining_matches_naive(n in 2usize..60, seed: u64, delta in 0.05f64..1.0, ordered: bool) {
        let c = corpus(n, seed);
        let cfg = MiningConfig { delta, ordered };
        let (pruned, stats) = mine_pairs(&c, &cfg).unwrap();
        let naive = mine_pairs_naive(&c, &cfg).unwrap();
        prop_assert_eq!(&pruned, &naive);
        prop_assert!(stats.evaluated <= n * (n - 1));
        for p in &pruned {
            prop_assert!(p.similarity >= delta);
            prop_assert!(p.x != p.y);
            prop_assert!(ordered || p.x < p.y);
        }
    }

    #[test]
    fn negatives_stay_below_threshold(n in 2usize..60, seed: u64, per in 1usize..8) {
        let c = corpus(n, seed);
        let neg = sample_negative_pairs(&c, 0.4, per, seed).unwrap();
        let mut seen = HashSet::new();
        for p in &neg {
            prop_assert!(p.similarity < 0.4);
            prop_assert!(p.x != p.y);
            prop_assert!(seen.insert((p.x, p.y)));
        }
        prop_assert!(neg.iter().filter(|p| p.x == 0).count() <= per);
    }

    #[test]
    fn split_is_disjoint_and_exhaustive(n in 2usize..500, ratio in 0.05f64..0.95, seed: u64) {
        let rows: Vec<usize> = (0..n).collect();
        let n_train = (n as f64 * ratio).round() as usize;
        match split(&rows, ratio, seed) {
            Ok((train, dev)) => {
                prop_assert_eq!(train.len(), n_train);
                let a: HashSet<usize> = train.iter().copied().collect();
                let b: HashSet<usize> = dev.iter().copied().collect();
                prop_assert!(a.is_disjoint(&b));
                prop_assert_eq!(a.len() + b.len(), n);
            }
            Err(_) => prop_assert!(n_train == 0 || n_train >= n),
        }
    }

    #[test]
    fn subsample_hits_the_positive_ratio(seed: u64, fraction in 0.05f64..0.5, ratio in 0.2f64..0.8) {
        let c = corpus(120, 7);
        let (pos, _) = mine_pairs(&c, &MiningConfig::default()).unwrap();
        let neg = sample_negative_pairs(&c, 0.4, 10, 3).unwrap();
        let cfg = SubsampleConfig { fraction, positive_ratio: ratio, ..SubsampleConfig::default() };
        let total = ((pos.len() + neg.len()) as f64 * fraction).round() as usize;
        let want_pos = (total as f64 * ratio).round() as usize;
        match subsample_simnet(&pos, &neg, &cfg, seed) {
            Ok(sample) => {
                prop_assert_eq!(sample.len(), total);
                let got_pos = sample.iter().filter(|l| l.label).count();
                prop_assert_eq!(got_pos, want_pos);
                for l in &sample {
                    prop_assert_eq!(l.label, l.pair.similarity >= 0.4);
                }
                let keys: HashSet<(usize, usize)> = sample.iter().map(|l| (l.pair.x, l.pair.y)).collect();
                prop_assert_eq!(keys.len(), sample.len());
            }
            Err(_) => prop_assert!(want_pos > pos.len() || total - want_pos > neg.len()),
        }
    }
}

#[test]
fn stratification_preserves_the_histogram() {
    let c = corpus(300, 11);
    let (pos, _) = mine_pairs(&c, &MiningConfig::default()).unwrap();
    let bins = 10;
    let bin = |s: f64| ((s * bins as f64).floor() as usize).min(bins - 1);
    let mut full = vec![0usize; bins];
    for p in &pos {
        full[bin(p.similarity)] += 1;
    }
    let cfg = SubsampleConfig {
        fraction: 0.25,
        positive_ratio: 1.0,
        ..SubsampleConfig::default()
    };
    let sample = subsample_simnet(&pos, &[], &cfg, 5).unwrap();
    let mut got = vec![0usize; bins];
    for l in &sample {
        got[bin(l.pair.similarity)] += 1;
    }
    for (f, g) in full.iter().zip(&got) {
        let expected = *f as f64 * sample.len() as f64 / pos.len() as f64;
        assert!(
            (*g as f64 - expected).abs() <= 1.0,
            "bin share {g} vs {expected:.2}"
        );
    }
}

use std::cmp::Ordering;

use cmg_core::chem::{hash_words, BEGIN, END};
use cmg_core::constraint::{ConstraintConfig, PropNet, SimNet};
use cmg_core::decoding::{
    beam_search, log_softmax, rescore_select, BeamCandidate, BeamConfig, CandidateScorer,
    DecodeError, StepModel,
};
use cmg_core::tensor::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 5;

/// Pseudo-random next-token distribution that depends on the whole prefix.
struct HashModel {
    salt: u64,
}

impl StepModel for HashModel {
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>, DecodeError> {
        let mut words: Vec<u64> = prefix.iter().map(|&t| u64::from(t)).collect();
        words.push(self.salt);
        let logits: Vec<f64> = (0..VOCAB as u64)
            .map(|v| {
                words.push(v);
                let h = hash_words(&words);
                words.pop();
                (h >> 11) as f64 / (1u64 << 53) as f64 * 4.0
            })
            .collect();
        Ok(log_softmax(&logits))
    }
}

/// Every `[BEGIN] body [END]` with at most `max_len` tokens, scored by the
/// same per-step log-probabilities the search sees.
fn enumerate(model: &HashModel, max_len: usize) -> Vec<BeamCandidate> {
    let mut out = Vec::new();
    let mut stack = vec![(vec![BEGIN], 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        if prefix.len() >= max_len {
            continue;
        }
        let lp = model.log_probs(&prefix).unwrap();
        for v in [END, 3, 4] {
            let mut t = prefix.clone();
            t.push(v);
            let s = score + lp[v as usize];
            if v == END {
                out.push(BeamCandidate {
                    tokens: t,
                    score: s,
                });
            } else {
                stack.push((t, s));
            }
        }
    }
    out
}

fn ranked(mut c: Vec<BeamCandidate>, normalize: bool) -> Vec<BeamCandidate> {
    let key = |b: &BeamCandidate| {
        if normalize {
            b.score / (b.tokens.len() - 1) as f64
        } else {
            b.score
        }
    };
    c.sort_by(|a, b| {
        key(b)
            .partial_cmp(&key(a))
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    c
}

proptest! {
    #[test]
    fn wide_beam_is_exhaustive(salt: u64, max_len in 2usize..7, normalize: bool, k in 1usize..6) {
        let model = HashModel { salt };
        let all = ranked(enumerate(&model, max_len), normalize);
        let mut cfg = BeamConfig::new(4096, max_len);
        cfg.length_normalize = normalize;
        let beam = beam_search(&model, &cfg).unwrap();
        prop_assert_eq!(beam.len(), all.len());
        for (b, e) in beam.iter().zip(&all) {
            prop_assert_eq!(&b.tokens, &e.tokens);
            prop_assert!((b.score - e.score).abs() < 1e-12);
        }
        // A narrow beam never beats the exhaustive optimum.
        let mut narrow = cfg.clone();
        narrow.width = k;
        let best = beam_search(&model, &narrow).map(|b| b[0].score);
        if let Ok(s) = best {
            prop_assert!(s <= all.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max) + 1e-12);
        }
    }

    #[test]
    fn width_one_is_greedy(salt: u64, max_len in 2usize..10) {
        let model = HashModel { salt };
        let mut tokens = vec![BEGIN];
        let mut score = 0.0;
        let mut done = false;
        while tokens.len() < max_len {
            let lp = model.log_probs(&tokens).unwrap();
            let v = [END, 3, 4].into_iter().max_by(|a, b| lp[*a as usize].partial_cmp(&lp[*b as usize]).unwrap().then(b.cmp(a))).unwrap();
            tokens.push(v);
            score += lp[v as usize];
            if v == END {
                done = true;
                break;
            }
        }
        let beam = beam_search(&model, &BeamConfig::new(1, max_len));
        if done {
            let beam = beam.unwrap();
            prop_assert_eq!(&beam[0].tokens, &tokens);
            prop_assert!((beam[0].score - score).abs() < 1e-12);
        } else {
            let no_end = matches!(beam, Err(DecodeError::NoCompleteCandidate { .. }));
            prop_assert!(no_end);
        }
    }
}

/// Scorer whose outputs are fixed hashes of the candidate tokens.
struct TableScorer;

fn unit(words: &[u64]) -> f64 {
    (hash_words(words) >> 11) as f64 / (1u64 << 53) as f64
}

impl CandidateScorer for TableScorer {
    fn properties(&self, tokens: &[u32]) -> Result<[f64; 3], DecodeError> {
        let w: Vec<u64> = tokens.iter().map(|&t| u64::from(t)).collect();
        Ok(std::array::from_fn(|k| {
            let mut w = w.clone();
            w.push(k as u64);
            unit(&w) * 2.0 - 1.0
        }))
    }

    fn similarity(&self, x: &[u32], tokens: &[u32]) -> Result<f64, DecodeError> {
        let w: Vec<u64> = x
            .iter()
            .chain(tokens)
            .map(|&t| u64::from(t))
            .chain([99])
            .collect();
        Ok(unit(&w))
    }
}

proptest! {
    #[test]
    fn rescoring_picks_the_combined_maximum(
        seqs in prop::collection::btree_set(prop::collection::vec(3u32..9, 0..5), 1..12),
        scores in prop::collection::vec(-5.0f64..0.0, 12),
        target in prop::array::uniform3(-1.0f64..1.0),
        rotate in 0usize..12,
    ) {
        let mut cands: Vec<BeamCandidate> = seqs
            .into_iter()
            .zip(&scores)
            .map(|(body, &score)| {
                let mut tokens = vec![BEGIN];
                tokens.extend(body);
                tokens.push(END);
                BeamCandidate { tokens, score }
            })
            .collect();
        let x = [BEGIN, 5, 6, END];
        let s = TableScorer;
        let mut best: Option<(f64, Vec<u32>)> = None;
        for c in &cands {
            let p = s.properties(&c.tokens).unwrap();
            let pn: f64 = (0..3).map(|k| 1.0 - (target[k] - p[k]).abs()).sum::<f64>() / 3.0;
            let total = c.score + pn + s.similarity(&x, &c.tokens).unwrap();
            let better = match &best {
                None => true,
                Some((b, t)) => total > *b || (total == *b && c.tokens < *t),
            };
            if better {
                best = Some((total, c.tokens.clone()));
            }
        }
        let pick = rescore_select(&cands, &x, &target, &s).unwrap();
        let (total, tokens) = best.unwrap();
        prop_assert_eq!(&pick.candidate.tokens, &tokens);
        prop_assert!((pick.combined() - total).abs() < 1e-12);
        // Input order does not matter.
        let n = cands.len();
        cands.rotate_left(rotate % n);
        prop_assert_eq!(rescore_select(&cands, &x, &target, &s).unwrap().candidate.tokens, tokens);
    }
}

fn one_hot(ids: &[u32], vocab: usize) -> Tensor {
    let mut t = Tensor::zeros(&[ids.len(), vocab]);
    for (i, &id) in ids.iter().enumerate() {
        t.set(&[i, id as usize], 1.0);
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn one_hot_soft_embedding_matches_ids(ids in prop::collection::vec(2u32..20, 1..12), seed: u64) {
        let vocab = 20;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let propnet = PropNet::new(&mut store, "p.", ConstraintConfig::new(6, vocab), &mut rng).unwrap();
        let simnet = SimNet::new(&mut store, "s.", ConstraintConfig::new(6, vocab), &mut rng).unwrap();
        let tape = Tape::new();
        let probs = tape.constant(one_hot(&ids, vocab));
        let soft = propnet.forward_soft(&tape, &store, probs).unwrap().value();
        let hard = propnet.forward_ids(&tape, &store, &[&ids]).unwrap().value();
        for (a, b) in soft.data().iter().zip(hard.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let fs = simnet.features_soft(&tape, &store, probs).unwrap().value();
        let fh = simnet.features_ids(&tape, &store, &[&ids]).unwrap().value();
        for (a, b) in fs.data().iter().zip(fh.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

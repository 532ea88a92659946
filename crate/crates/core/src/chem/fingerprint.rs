//! ECFP-style circular fingerprints and Tanimoto similarity.

use std::collections::{BTreeSet, HashSet};

use super::graph::MolecularGraph;
use super::ChemError;

pub const DEFAULT_RADIUS: usize = 2;
pub const DEFAULT_BITS: usize = 2048;

/// Fixed 64-bit mixer (splitmix64 finalizer). Stable across runs and platforms.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-dependent fold of a word sequence.
pub fn hash_words(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |h, &w| mix64(h ^ mix64(w)))
}

/// Set of bit positions in `[0, n_bits)`, stored as packed words.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    words: Vec<u64>,
    n_bits: usize,
    radius: usize,
}

impl Fingerprint {
    pub fn from_positions(
        positions: impl IntoIterator<Item = usize>,
        n_bits: usize,
        radius: usize,
    ) -> Result<Self, ChemError> {
        if !n_bits.is_power_of_two() {
            return Err(ChemError::BadWidth(n_bits));
        }
        let mut words = vec![0u64; n_bits.div_ceil(64)];
        for p in positions {
            if p >= n_bits {
                return Err(ChemError::BitOutOfRange { bit: p, n_bits });
            }
            words[p / 64] |= 1 << (p % 64);
        }
        Ok(Fingerprint {
            words,
            n_bits,
            radius,
        })
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn contains(&self, bit: usize) -> bool {
        bit < self.n_bits && self.words[bit / 64] & (1 << (bit % 64)) != 0
    }

    /// Set bit positions in increasing order.
    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    None
                } else {
                    let tz = w.trailing_zeros() as usize;
                    w &= w - 1;
                    Some(wi * 64 + tz)
                }
            })
        })
    }

    pub fn intersection_count(&self, other: &Fingerprint) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }
}

/// Tanimoto value; `degenerate` marks the both-empty case, reported as 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tanimoto {
    pub value: f64,
    pub degenerate: bool,
}

/// |A ∩ B| / |A ∪ B|.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<Tanimoto, ChemError> {
    if a.n_bits != b.n_bits {
        return Err(ChemError::WidthMismatch {
            left: a.n_bits,
            right: b.n_bits,
        });
    }
    let inter = a.intersection_count(b);
    let union = a.count() + b.count() - inter;
    Ok(tanimoto_from_counts(inter, union))
}

pub(crate) fn tanimoto_from_counts(inter: usize, union: usize) -> Tanimoto {
    if union == 0 {
        Tanimoto {
            value: 0.0,
            degenerate: true,
        }
    } else {
        Tanimoto {
            value: inter as f64 / union as f64,
            degenerate: false,
        }
    }
}

fn initial_invariant(g: &MolecularGraph, atom: usize, degree: usize) -> u64 {
    let a = &g.atoms()[atom];
    hash_words(&[
        u64::from(a.atomic_number()),
        u64::from(a.aromatic),
        a.charge as i64 as u64,
        u64::from(a.hydrogens),
        degree as u64,
    ])
}

/// Circular fingerprint.
///
/// Round 0 hashes each atom's (element, aromatic flag, charge, H count,
/// degree). Each later round rehashes an atom's identifier together with the
/// sorted (bond order, neighbor identifier) list. An identifier is kept only
/// if its bond neighborhood grew this round and no earlier (or smaller
/// same-round) identifier covers exactly the same bonds. Kept identifiers are
/// folded modulo `n_bits`.
pub fn morgan_fingerprint(
    g: &MolecularGraph,
    radius: usize,
    n_bits: usize,
) -> Result<Fingerprint, ChemError> {
    if g.is_empty() {
        return Err(ChemError::EmptyGraph);
    }
    if !n_bits.is_power_of_two() {
        return Err(ChemError::BadWidth(n_bits));
    }
    let n = g.atoms().len();
    let adj = g.adjacency();
    let mut inv: Vec<u64> = (0..n)
        .map(|i| initial_invariant(g, i, adj[i].len()))
        .collect();
    let mut identifiers: BTreeSet<u64> = inv.iter().copied().collect();

    // Bond neighborhood covered by each atom's current identifier.
    let mut env: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let mut seen_envs: HashSet<Vec<usize>> = HashSet::new();
    let mut active = vec![true; n];

    for round in 1..=radius {
        let mut next = Vec::with_capacity(n);
        let mut next_env = Vec::with_capacity(n);
        for atom in 0..n {
            let mut neigh: Vec<(u64, u64)> = adj[atom]
                .iter()
                .map(|&(nb, order, _)| (order.code(), inv[nb]))
                .collect();
            neigh.sort_unstable();
            let mut words = Vec::with_capacity(2 + 2 * neigh.len());
            words.push(round as u64);
            words.push(inv[atom]);
            for (o, h) in neigh {
                words.push(o);
                words.push(h);
            }
            next.push(hash_words(&words));

            let mut e = env[atom].clone();
            for &(nb, _, bond) in &adj[atom] {
                e.insert(bond);
                e.extend(env[nb].iter().copied());
            }
            next_env.push(e);
        }

        let mut candidates: Vec<(Vec<usize>, u64, usize)> = Vec::new();
        for atom in 0..n {
            if !active[atom] {
                continue;
            }
            if next_env[atom].len() == env[atom].len() {
                active[atom] = false;
                continue;
            }
            candidates.push((next_env[atom].iter().copied().collect(), next[atom], atom));
        }
        // Same-environment ties resolve to the smaller identifier.
        candidates.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        for (bonds, id, _) in candidates {
            if seen_envs.insert(bonds) {
                identifiers.insert(id);
            }
        }
        inv = next;
        env = next_env;
    }

    let mask = (n_bits - 1) as u64;
    Fingerprint::from_positions(
        identifiers.iter().map(|&id| (id & mask) as usize),
        n_bits,
        radius,
    )
}

//! Seeded desk corpora: scaffold families decorated with substituents.
//!
//! Molecules built on one scaffold share most of their fingerprint bits, so a
//! corpus drawn from a few dozen scaffolds has plenty of pairs above the
//! similarity threshold and plenty below it.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chem::ChemError;
use crate::properties::{surrogate_properties_smiles, PropertyVector};

/// `{k}` is a terminal slot (the substituent is pasted as is) and `({k})` a
/// branch slot that disappears when the substituent is empty.
pub const SCAFFOLDS: &[&str] = &[
    "{0}c1ccc(cc1)C(=O)NC2CCN({1})CC2",
    "{0}c1ccc2nc(sc2c1)N3CCOCC3",
    "{0}C1CCC(CC1)Oc2ccc({1})cn2",
    "{0}c1cc(ccn1)C(=O)N2CCCC2",
    "{0}N1CCN(CC1)c2ncc({1})cc2",
    "{0}c1ccc(cc1)S(=O)(=O)NC({1})C",
    "{0}OCCOc1ccc2ccccc2c1",
    "{0}c1coc(n1)CC2CCCCC2",
    "{0}CC(=O)Nc1cccc(c1)C#N",
    "{0}c1ccc(o1)C=CC(=O)N({1})C",
    "{0}C1=CC(=O)N(C1)Cc2ccccc2",
    "{0}c1nnc(s1)SCC(=O)N({1})C",
    "{0}c1ccc(cc1)Nc2ncnc3ccccc23",
    "{0}CC1CCN(CC1)C(=O)c2ccco2",
    "{0}c1cccc(c1)OCC(O)CN({1})C",
    "{0}C(=O)c1ccc(cc1)N2CCC({1})CC2",
    "{0}c1ccc(nc1)OC2CCN({1})C2",
    "{0}C1CCN(C1)C(=O)c2ccc({1})s2",
    "{0}c1ccc2c(c1)ncn2C({1})C",
    "{0}NC(=O)c1cc({1})c2ccccc2o1",
];

pub const SUBSTITUENTS: &[&str] = &[
    "", "C", "CC", "CCC", "O", "OC", "N", "NC", "F", "Cl", "Br", "CO", "C(C)C", "C(=O)O",
];

/// Fills the slots of `scaffold` with `subs[k]` (missing entries count as empty).
pub fn decorate(scaffold: &str, subs: &[&str]) -> String {
    let mut s = scaffold.to_string();
    for k in 0..2 {
        let sub = subs.get(k).copied().unwrap_or("");
        let branch = format!("({{{k}}})");
        let replacement = if sub.is_empty() {
            String::new()
        } else {
            format!("({sub})")
        };
        s = s.replace(&branch, &replacement);
        s = s.replace(&format!("{{{k}}}"), sub);
    }
    s
}

/// `n` distinct molecules with surrogate properties, in generation order.
///
/// Returns fewer than `n` only when the template space is exhausted.
pub fn synth_corpus(n: usize, seed: u64) -> Result<Vec<(String, PropertyVector)>, ChemError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let max_attempts = 50 * n.max(1);
    for _ in 0..max_attempts {
        if out.len() == n {
            break;
        }
        let scaffold = SCAFFOLDS[rng.random_range(0..SCAFFOLDS.len())];
        let a = SUBSTITUENTS[rng.random_range(0..SUBSTITUENTS.len())];
        let b = SUBSTITUENTS[rng.random_range(0..SUBSTITUENTS.len())];
        let smiles = decorate(scaffold, &[a, b]);
        if seen.insert(smiles.clone()) {
            let props = surrogate_properties_smiles(&smiles)?;
            out.push((smiles, props));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::validate;

    #[test]
    fn decoration() {
        assert_eq!(decorate("{0}c1ccc({1})cc1", &["C", ""]), "Cc1ccccc1");
        assert_eq!(decorate("{0}c1ccc({1})cc1", &["", "OC"]), "c1ccc(OC)cc1");
        assert_eq!(decorate("{0}C1CC1", &["Cl", "F"]), "ClC1CC1");
    }

    #[test]
    fn every_combination_parses() {
        for s in SCAFFOLDS {
            for a in SUBSTITUENTS {
                for b in SUBSTITUENTS {
                    let m = decorate(s, &[a, b]);
                    assert!(validate(&m), "{m}");
                    assert!(m.len() <= 40, "{m}");
                }
            }
        }
    }

    #[test]
    fn seeded_and_distinct() {
        let a = synth_corpus(200, 5).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a, synth_corpus(200, 5).unwrap());
        let unique: HashSet<_> = a.iter().map(|(s, _)| s).collect();
        assert_eq!(unique.len(), 200);
        assert_ne!(a, synth_corpus(200, 6).unwrap());
    }
}

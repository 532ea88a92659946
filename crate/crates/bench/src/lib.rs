//! Shared fixtures for the benchmarks.

use cmg_core::constraint::ConstraintConfig;
use cmg_core::synth::synth_corpus;
use cmg_core::training::{CmgModel, PairSample};
use cmg_core::translator::TranslatorConfig;
use cmg_core::{MoleculeRecord, PropertyScaler, Vocabulary};

/// `n` seeded desk molecules with fingerprints.
pub fn corpus(n: usize, seed: u64) -> Vec<MoleculeRecord> {
    synth_corpus(n, seed)
        .expect("synthetic corpus")
        .into_iter()
        .map(|(s, p)| MoleculeRecord::new(s, p).expect("valid SMILES"))
        .collect()
}

/// Default-width model with untrained weights, plus one pair drawn from `corpus`.
pub fn model_and_sample(corpus: &[MoleculeRecord]) -> (CmgModel, PairSample) {
    let vocab = Vocabulary::standard();
    let n = vocab.len();
    let scaler = PropertyScaler::fit(corpus.iter().map(|m| &m.properties)).expect("scaler");
    let tcfg = TranslatorConfig {
        vocab: n,
        ..TranslatorConfig::default()
    };
    let model = CmgModel::new(
        tcfg,
        ConstraintConfig::new(32, n),
        ConstraintConfig::new(32, n),
        scaler.clone(),
        0,
    )
    .expect("model");
    let (x, y) = (&corpus[0], &corpus[1]);
    let sample = PairSample::from_smiles(
        &vocab,
        model.max_len(),
        &scaler,
        &x.smiles,
        &x.properties,
        &y.smiles,
        &y.properties,
    )
    .expect("sample");
    (model, sample)
}

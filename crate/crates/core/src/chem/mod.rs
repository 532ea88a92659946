//! SMILES tokenization, parsing, circular fingerprints and Tanimoto similarity.

mod fingerprint;
mod graph;
mod tokens;

use std::io::BufRead;
use std::path::Path;

use thiserror::Error;

pub(crate) use fingerprint::tanimoto_from_counts;
pub use fingerprint::{
    hash_words, mix64, morgan_fingerprint, tanimoto, Fingerprint, Tanimoto, DEFAULT_BITS,
    DEFAULT_RADIUS,
};
pub use graph::{element_number, parse_graph, validate, Atom, Bond, BondOrder, MolecularGraph};
pub use tokens::{Smiles, TokenSequence, Vocabulary, BEGIN, END, PAD};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChemError {
    #[error("empty SMILES")]
    EmptySmiles,
    #[error("character '{ch}' at {pos} is not in the SMILES vocabulary")]
    UnknownCharacter { ch: char, pos: usize },
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("malformed token sequence: {0}")]
    MalformedSequence(String),
    #[error("syntax error at {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("ring closure {digit} is never closed")]
    UnclosedRing { digit: u32 },
    #[error("bad bracket atom at {pos}: {msg}")]
    BadBracketAtom { pos: usize, msg: String },
    #[error("empty molecular graph")]
    EmptyGraph,
    #[error("fingerprint width {0} is not a power of two")]
    BadWidth(usize),
    #[error("bit {bit} outside fingerprint width {n_bits}")]
    BitOutOfRange { bit: usize, n_bits: usize },
    #[error("fingerprint widths differ: {left} vs {right}")]
    WidthMismatch { left: usize, right: usize },
}

/// Default-parameter fingerprint straight from a SMILES string.
pub fn fingerprint_smiles(smiles: &str) -> Result<Fingerprint, ChemError> {
    morgan_fingerprint(&parse_graph(smiles)?, DEFAULT_RADIUS, DEFAULT_BITS)
}

/// Tanimoto similarity of two SMILES under default fingerprint settings.
pub fn smiles_similarity(a: &str, b: &str) -> Result<f64, ChemError> {
    Ok(tanimoto(&fingerprint_smiles(a)?, &fingerprint_smiles(b)?)?.value)
}

/// Reads a molecule list: one SMILES per line, `#` comments and blank lines skipped.
pub fn read_molecule_list(path: &Path) -> std::io::Result<Vec<(usize, String)>> {
    let file = std::fs::File::open(path)?;
    parse_molecule_list(std::io::BufReader::new(file))
}

pub fn parse_molecule_list(reader: impl BufRead) -> std::io::Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push((i + 1, t.to_string()));
    }
    Ok(out)
}

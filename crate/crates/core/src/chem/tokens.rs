//! Character-level SMILES vocabulary and token sequences.

use std::fmt;

use super::ChemError;

/// Reserved ids. Every other id maps to exactly one SMILES character.
pub const PAD: u32 = 0;
pub const BEGIN: u32 = 1;
pub const END: u32 = 2;

const SPECIALS: [&str; 3] = ["[PAD]", "[BEGIN]", "[END]"];

// Letters cover every element symbol that can appear inside brackets.
const ALPHABET: &str = "ABCDEFGHIKLMNOPRSTUVWXYZabcdefghiklmnoprstuy0123456789()[]=#$:/\\+-@%.";

/// A SMILES string: non-empty, no whitespace. Grammar is checked by the parser.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Smiles(String);

impl Smiles {
    pub fn new(text: impl Into<String>) -> Result<Self, ChemError> {
        let text = text.into();
        if text.is_empty() {
            return Err(ChemError::EmptySmiles);
        }
        if let Some(pos) = text.find(char::is_whitespace) {
            return Err(ChemError::Syntax {
                pos,
                msg: "whitespace inside SMILES".into(),
            });
        }
        Ok(Smiles(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for Smiles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Smiles {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Fixed character vocabulary shared by every network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    lookup: [Option<u32>; 128],
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        let chars: Vec<char> = ALPHABET.chars().collect();
        let mut lookup = [None; 128];
        for (i, c) in chars.iter().enumerate() {
            lookup[*c as usize] = Some(i as u32 + SPECIALS.len() as u32);
        }
        Vocabulary { chars, lookup }
    }

    pub fn len(&self) -> usize {
        self.chars.len() + SPECIALS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, c: char) -> Option<u32> {
        if c.is_ascii() {
            self.lookup[c as usize]
        } else {
            None
        }
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        (id as usize)
            .checked_sub(SPECIALS.len())
            .and_then(|i| self.chars.get(i).copied())
    }

    /// Human-readable label for any id, including the reserved ones.
    pub fn label(&self, id: u32) -> String {
        match SPECIALS.get(id as usize) {
            Some(s) => s.to_string(),
            None => self
                .char_of(id)
                .map(String::from)
                .unwrap_or_else(|| format!("<{id}>")),
        }
    }

    /// One token per character wrapped in `[BEGIN]` / `[END]`.
    pub fn tokenize(&self, s: &Smiles, max_len: usize) -> Result<TokenSequence, ChemError> {
        let text = s.as_str();
        let n = text.chars().count();
        if n + 2 > max_len {
            return Err(ChemError::TooLong {
                len: n + 2,
                max: max_len,
            });
        }
        let mut ids = Vec::with_capacity(n + 2);
        ids.push(BEGIN);
        for (pos, c) in text.chars().enumerate() {
            ids.push(
                self.id_of(c)
                    .ok_or(ChemError::UnknownCharacter { ch: c, pos })?,
            );
        }
        ids.push(END);
        Ok(TokenSequence { ids })
    }

    /// Strips `[BEGIN]`/`[END]`/`[PAD]` and maps the body back to characters.
    pub fn detokenize(&self, t: &TokenSequence) -> Result<Smiles, ChemError> {
        self.detokenize_ids(&t.ids)
    }

    pub fn detokenize_ids(&self, ids: &[u32]) -> Result<Smiles, ChemError> {
        let malformed = |why: &str| ChemError::MalformedSequence(why.to_string());
        if ids.first() != Some(&BEGIN) {
            return Err(malformed("missing [BEGIN]"));
        }
        let end = ids
            .iter()
            .position(|&id| id == END)
            .ok_or_else(|| malformed("missing [END]"))?;
        if ids[end + 1..].iter().any(|&id| id != PAD) {
            return Err(malformed("tokens after [END]"));
        }
        let body = &ids[1..end];
        if body.is_empty() {
            return Err(malformed("empty molecule"));
        }
        let mut text = String::with_capacity(body.len());
        for &id in body {
            match self.char_of(id) {
                Some(c) => text.push(c),
                None => {
                    return Err(malformed(&format!(
                        "reserved token {} in body",
                        self.label(id)
                    )))
                }
            }
        }
        Smiles::new(text)
    }
}

/// Vocabulary ids, `[BEGIN]` first and `[END]` last (trailing `[PAD]` allowed).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    /// Wraps raw ids without validation; `detokenize` reports malformed input.
    pub fn from_ids(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Length up to and including `[END]`.
    pub fn unpadded_len(&self) -> usize {
        self.ids
            .iter()
            .position(|&id| id == END)
            .map_or(self.ids.len(), |p| p + 1)
    }

    /// Everything after `[BEGIN]` up to and including `[END]`.
    pub fn body_with_end(&self) -> &[u32] {
        &self.ids[1.min(self.ids.len())..self.unpadded_len()]
    }
}

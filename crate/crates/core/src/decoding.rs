//! Beam search, constraint-rescored selection, and target jitter.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::chem::{fingerprint_smiles, tanimoto, validate, ChemError, BEGIN, END, PAD};
use crate::nn::NetError;
use crate::properties::{PropertyError, PropertySource, PropertyVector, NUM_PROPERTIES};
use crate::training::{tokenize_smiles, CmgModel};
use crate::translator::EncoderOutput;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error(transparent)]
    Property(#[from] PropertyError),
    #[error("no candidate reached the end token within {max_len} tokens")]
    NoCompleteCandidate { max_len: usize },
    #[error("no candidates to rescore")]
    EmptyCandidates,
    #[error("beam width must be at least 1")]
    ZeroWidth,
}

/// Anything that yields next-token log-probabilities for a prefix.
pub trait StepModel {
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>, DecodeError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    /// Maximum tokens per candidate, counting `[BEGIN]` and `[END]`.
    pub max_len: usize,
    /// Rank by mean per-token log-probability instead of the sum.
    pub length_normalize: bool,
    pub begin: u32,
    pub end: u32,
    /// Tokens never expanded.
    pub forbidden: Vec<u32>,
}

impl BeamConfig {
    pub fn new(width: usize, max_len: usize) -> Self {
        BeamConfig {
            width,
            max_len,
            length_normalize: false,
            begin: BEGIN,
            end: END,
            forbidden: vec![PAD, BEGIN],
        }
    }
}

/// A complete `[BEGIN] … [END]` sequence with its summed log-likelihood.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamCandidate {
    pub tokens: Vec<u32>,
    pub score: f64,
}

impl BeamCandidate {
    fn rank_key(&self, normalize: bool) -> f64 {
        if normalize {
            self.score / (self.tokens.len() - 1).max(1) as f64
        } else {
            self.score
        }
    }
}

/// Higher key first, then lexicographically smaller tokens.
fn by_rank(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(b.1))
}

/// Breadth-`width` search. At each step every live beam is expanded by every
/// allowed token, and the best `width` expansions survive; expansions ending
/// in `end` retire to the finished pool. Returns up to `width` finished
/// candidates, best first.
pub fn beam_search(
    model: &impl StepModel,
    cfg: &BeamConfig,
) -> Result<Vec<BeamCandidate>, DecodeError> {
    if cfg.width == 0 {
        return Err(DecodeError::ZeroWidth);
    }
    let mut live = vec![BeamCandidate {
        tokens: vec![cfg.begin],
        score: 0.0,
    }];
    let mut finished: Vec<BeamCandidate> = Vec::new();
    while !live.is_empty() && live[0].tokens.len() < cfg.max_len {
        let mut expansions = Vec::new();
        for beam in &live {
            let lp = model.log_probs(&beam.tokens)?;
            for (v, &l) in lp.iter().enumerate() {
                let v = v as u32;
                if cfg.forbidden.contains(&v) || l == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = beam.tokens.clone();
                tokens.push(v);
                expansions.push(BeamCandidate {
                    tokens,
                    score: beam.score + l,
                });
            }
        }
        expansions.sort_by(|a, b| {
            by_rank(
                (a.rank_key(cfg.length_normalize), &a.tokens),
                (b.rank_key(cfg.length_normalize), &b.tokens),
            )
        });
        expansions.truncate(cfg.width);
        live.clear();
        for c in expansions {
            if c.tokens.last() == Some(&cfg.end) {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    if finished.is_empty() {
        return Err(DecodeError::NoCompleteCandidate {
            max_len: cfg.max_len,
        });
    }
    finished.sort_by(|a, b| {
        by_rank(
            (a.rank_key(cfg.length_normalize), &a.tokens),
            (b.rank_key(cfg.length_normalize), &b.tokens),
        )
    });
    finished.truncate(cfg.width);
    Ok(finished)
}

/// Property and similarity predictions for a finished candidate.
pub trait CandidateScorer {
    /// Predicted (normalized) properties of `tokens`.
    fn properties(&self, tokens: &[u32]) -> Result<[f64; NUM_PROPERTIES], DecodeError>;
    /// Predicted probability that `tokens` is similar to the input `x`.
    fn similarity(&self, x: &[u32], tokens: &[u32]) -> Result<f64, DecodeError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rescored {
    pub candidate: BeamCandidate,
    pub s_pn: f64,
    pub s_sn: f64,
}

impl Rescored {
    pub fn combined(&self) -> f64 {
        self.candidate.score + self.s_pn + self.s_sn
    }
}

/// `mean_k (1 − |target_k − predicted_k|)`.
pub fn property_bonus(target: &[f64; NUM_PROPERTIES], predicted: &[f64; NUM_PROPERTIES]) -> f64 {
    target
        .iter()
        .zip(predicted)
        .map(|(t, p)| 1.0 - (t - p).abs())
        .sum::<f64>()
        / NUM_PROPERTIES as f64
}

/// Scores every candidate with its property and similarity bonus.
pub fn rescore_all(
    candidates: &[BeamCandidate],
    x: &[u32],
    target: &[f64; NUM_PROPERTIES],
    scorer: &impl CandidateScorer,
) -> Result<Vec<Rescored>, DecodeError> {
    candidates
        .iter()
        .map(|c| {
            Ok(Rescored {
                s_pn: property_bonus(target, &scorer.properties(&c.tokens)?),
                s_sn: scorer.similarity(x, &c.tokens)?,
                candidate: c.clone(),
            })
        })
        .collect()
}

/// The candidate maximizing `s + s_pn + s_sn`; ties go to the
/// lexicographically smaller token sequence so input order never matters.
pub fn rescore_select(
    candidates: &[BeamCandidate],
    x: &[u32],
    target: &[f64; NUM_PROPERTIES],
    scorer: &impl CandidateScorer,
) -> Result<Rescored, DecodeError> {
    if candidates.is_empty() {
        return Err(DecodeError::EmptyCandidates);
    }
    let scored = rescore_all(candidates, x, target, scorer)?;
    Ok(scored
        .into_iter()
        .min_by(|a, b| {
            by_rank(
                (a.combined(), &a.candidate.tokens),
                (b.combined(), &b.candidate.tokens),
            )
        })
        .expect("non-empty"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiversifyConfig {
    pub sigma: [f64; NUM_PROPERTIES],
    pub n_samples: usize,
}

impl Default for DiversifyConfig {
    fn default() -> Self {
        DiversifyConfig {
            sigma: [0.0; NUM_PROPERTIES],
            n_samples: 20,
        }
    }
}

/// `n_samples` targets with independent Gaussian jitter `N(p_k, σ_k)` per property.
pub fn diversify_targets(
    target: &PropertyVector,
    cfg: &DiversifyConfig,
    seed: u64,
) -> Vec<PropertyVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = target.to_array();
    (0..cfg.n_samples)
        .map(|_| {
            PropertyVector::from_array(std::array::from_fn(|k| {
                let z: f64 = StandardNormal.sample(&mut rng);
                base[k] + cfg.sigma[k] * z
            }))
        })
        .collect()
}

/// Decoder bound to one encoder output.
pub struct TranslatorStep<'m> {
    pub model: &'m CmgModel,
    pub enc: EncoderOutput,
}

impl StepModel for TranslatorStep<'_> {
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>, DecodeError> {
        let logits = self
            .model
            .translator
            .decode_step(&self.model.store, &self.enc, prefix)?;
        Ok(log_softmax(&logits))
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Hard-token scoring with the model's PropNet and SimNet.
pub struct ConstraintScorer<'m> {
    pub model: &'m CmgModel,
}

impl CandidateScorer for ConstraintScorer<'_> {
    fn properties(&self, tokens: &[u32]) -> Result<[f64; NUM_PROPERTIES], DecodeError> {
        Ok(self
            .model
            .propnet
            .predict(&self.model.store, &tokens[1..])?)
    }

    fn similarity(&self, x: &[u32], tokens: &[u32]) -> Result<f64, DecodeError> {
        Ok(self
            .model
            .simnet
            .predict(&self.model.store, &x[1..], &tokens[1..])?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub beam_width: usize,
    pub diversify: DiversifyConfig,
    pub length_normalize: bool,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            beam_width: 5,
            diversify: DiversifyConfig::default(),
            length_normalize: false,
            seed: 0,
        }
    }
}

/// One selected molecule (or failure) for one jittered target.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedMolecule {
    pub jitter_index: usize,
    pub target: PropertyVector,
    pub output: Option<String>,
    pub valid: bool,
    /// Similarity to the input; only for valid outputs.
    pub tanimoto: Option<f64>,
    pub s_beam: f64,
    pub s_pn: f64,
    pub s_sn: f64,
    /// PropNet estimate in raw units.
    pub predicted: Option<PropertyVector>,
    /// Oracle properties, when an oracle was supplied and could score the output.
    pub properties: Option<PropertyVector>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    pub input: String,
    pub outputs: Vec<GeneratedMolecule>,
}

struct Selected {
    tokens: Vec<u32>,
    rescored: Rescored,
}

fn decode_one(
    model: &CmgModel,
    x: &[u32],
    px: &[f64; 3],
    target: &PropertyVector,
    cfg: &GenerateConfig,
) -> Result<Selected, DecodeError> {
    let py = model.scaler.normalize(target)?;
    let enc = model.translator.encode(&model.store, x, px, &py)?;
    let step = TranslatorStep { model, enc };
    let mut beam = BeamConfig::new(cfg.beam_width, model.max_len());
    beam.length_normalize = cfg.length_normalize;
    let cands = beam_search(&step, &beam)?;
    let rescored = rescore_select(&cands, x, &py, &ConstraintScorer { model })?;
    Ok(Selected {
        tokens: rescored.candidate.tokens.clone(),
        rescored,
    })
}

/// Runs beam search plus rescoring for every jittered target of `p_y`.
/// Jitters run in parallel and are merged in index order; identical targets
/// share one decode. A jitter without a finished candidate is recorded with
/// its error instead of failing the call.
pub fn generate(
    model: &CmgModel,
    x_smiles: &str,
    p_x: &PropertyVector,
    p_y: &PropertyVector,
    cfg: &GenerateConfig,
    oracle: Option<&PropertySource>,
) -> Result<GenerationResult, DecodeError> {
    let x = tokenize_smiles(&model.vocab, x_smiles, model.max_len())?;
    let px = model.scaler.normalize(p_x)?;
    let targets = diversify_targets(p_y, &cfg.diversify, cfg.seed);
    let x_fp = fingerprint_smiles(x_smiles)?;

    let mut unique: Vec<PropertyVector> = Vec::new();
    let mut slot: HashMap<[u64; 3], usize> = HashMap::new();
    let mut index_of = Vec::with_capacity(targets.len());
    for t in &targets {
        let key = t.to_array().map(f64::to_bits);
        let i = *slot.entry(key).or_insert_with(|| {
            unique.push(*t);
            unique.len() - 1
        });
        index_of.push(i);
    }
    let decoded: Vec<Result<Selected, DecodeError>> = unique
        .par_iter()
        .map(|t| decode_one(model, &x, &px, t, cfg))
        .collect();
    let fatal = decoded
        .iter()
        .position(|d| matches!(d, Err(e) if !matches!(e, DecodeError::NoCompleteCandidate { .. })));
    if let Some(pos) = fatal {
        if let Some(Err(e)) = decoded.into_iter().nth(pos) {
            return Err(e);
        }
        unreachable!("position points at an error");
    }

    let mut outputs = Vec::with_capacity(targets.len());
    for (j, t) in targets.iter().enumerate() {
        let mut g = GeneratedMolecule {
            jitter_index: j,
            target: *t,
            output: None,
            valid: false,
            tanimoto: None,
            s_beam: f64::NAN,
            s_pn: f64::NAN,
            s_sn: f64::NAN,
            predicted: None,
            properties: None,
            error: None,
        };
        match &decoded[index_of[j]] {
            Err(e) => g.error = Some(e.to_string()),
            Ok(sel) => {
                g.s_beam = sel.rescored.candidate.score;
                g.s_pn = sel.rescored.s_pn;
                g.s_sn = sel.rescored.s_sn;
                let predicted = model.propnet.predict(&model.store, &sel.tokens[1..])?;
                g.predicted = Some(model.scaler.denormalize(&predicted)?);
                match model.vocab.detokenize_ids(&sel.tokens) {
                    Ok(s) => {
                        let s = s.into_string();
                        g.valid = validate(&s);
                        if g.valid {
                            let fp = fingerprint_smiles(&s)?;
                            g.tanimoto = Some(tanimoto(&x_fp, &fp)?.value);
                            g.properties = oracle.and_then(|o| o.lookup(&s));
                        }
                        g.output = Some(s);
                    }
                    Err(e) => g.error = Some(e.to_string()),
                }
            }
        }
        outputs.push(g);
    }
    Ok(GenerationResult {
        input: x_smiles.to_string(),
        outputs,
    })
}

pub const GENERATION_HEADER: &str =
    "input_smiles\tjitter_index\toutput_smiles\tvalid\ttanimoto\ts_beam\ts_pn\ts_sn";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".to_string()
    }
}

/// Generation TSV with a header line.
pub fn generation_tsv(results: &[GenerationResult]) -> String {
    let mut s = format!("{GENERATION_HEADER}\n");
    for r in results {
        for g in &r.outputs {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.input,
                g.jitter_index,
                g.output.as_deref().unwrap_or("NA"),
                u8::from(g.valid),
                fmt_opt(g.tanimoto),
                fmt_f(g.s_beam),
                fmt_f(g.s_pn),
                fmt_f(g.s_sn),
            );
        }
    }
    s
}

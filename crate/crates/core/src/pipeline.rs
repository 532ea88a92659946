//! Corpus curation: holdout exclusion, similarity pair mining, SimNet
//! sampling, splits, and the pair TSV formats.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::chem::{
    morgan_fingerprint, parse_graph, tanimoto, tanimoto_from_counts, ChemError, Fingerprint,
    DEFAULT_BITS, DEFAULT_RADIUS,
};
use crate::config::{ConfigError, KeyValues};
use crate::properties::{PropertyVector, NUM_PROPERTIES};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error("{0} rows cannot be split into two non-empty parts")]
    TooFewRows(usize),
    #[error("need {needed} negative pairs, only {available} available")]
    InsufficientNegatives { needed: usize, available: usize },
    #[error("need {needed} positive pairs, only {available} available")]
    InsufficientPositives { needed: usize, available: usize },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A molecule with its properties and cached fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct MoleculeRecord {
    pub smiles: String,
    pub properties: PropertyVector,
    pub fingerprint: Fingerprint,
}

impl MoleculeRecord {
    pub fn new(smiles: impl Into<String>, properties: PropertyVector) -> Result<Self, ChemError> {
        let smiles = smiles.into();
        let fingerprint = morgan_fingerprint(&parse_graph(&smiles)?, DEFAULT_RADIUS, DEFAULT_BITS)?;
        Ok(MoleculeRecord {
            smiles,
            properties,
            fingerprint,
        })
    }
}

/// Indices into a corpus plus their Tanimoto similarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairRecord {
    pub x: usize,
    pub y: usize,
    pub similarity: f64,
}

/// Drops every record whose SMILES appears in `holdout`; returns the removal count.
pub fn exclude_molecules(
    corpus: Vec<MoleculeRecord>,
    holdout: &HashSet<String>,
) -> (Vec<MoleculeRecord>, usize) {
    let before = corpus.len();
    let kept: Vec<MoleculeRecord> = corpus
        .into_iter()
        .filter(|m| !holdout.contains(&m.smiles))
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiningConfig {
    pub delta: f64,
    /// Emit both (X, Y) and (Y, X); otherwise only X < Y by index.
    pub ordered: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            delta: 0.4,
            ordered: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MiningStats {
    /// Candidate pairs whose similarity was computed.
    pub evaluated: usize,
    /// Posting-list entries visited.
    pub postings_visited: usize,
}

fn check_delta(delta: f64) -> Result<(), PipelineError> {
    if delta > 0.0 && delta <= 1.0 {
        Ok(())
    } else {
        Err(PipelineError::Invalid(format!(
            "similarity threshold {delta} outside (0, 1]"
        )))
    }
}

/// All pairs with Tanimoto ≥ δ, using an inverted bit → molecule index.
///
/// Shared-bit counts are accumulated from the posting lists, so a pair is only
/// scored when it shares a bit; a pair sharing none has similarity 0 < δ.
/// Output is sorted by (x, y) whatever the thread count.
pub fn mine_pairs(
    corpus: &[MoleculeRecord],
    cfg: &MiningConfig,
) -> Result<(Vec<PairRecord>, MiningStats), PipelineError> {
    check_delta(cfg.delta)?;
    let n = corpus.len();
    let width = corpus.first().map_or(0, |m| m.fingerprint.n_bits());
    let mut index: Vec<Vec<u32>> = vec![Vec::new(); width];
    let mut sizes = Vec::with_capacity(n);
    let bits: Vec<Vec<usize>> = corpus
        .iter()
        .map(|m| m.fingerprint.positions().collect())
        .collect();
    for (i, b) in bits.iter().enumerate() {
        if corpus[i].fingerprint.n_bits() != width {
            return Err(ChemError::WidthMismatch {
                left: width,
                right: corpus[i].fingerprint.n_bits(),
            }
            .into());
        }
        sizes.push(b.len());
        for &p in b {
            index[p].push(i as u32);
        }
    }
    let per_x: Vec<(Vec<PairRecord>, MiningStats)> = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![0u32; n], Vec::<u32>::new()),
            |(counts, touched), i| {
                let mut stats = MiningStats::default();
                for &p in &bits[i] {
                    let post = &index[p];
                    stats.postings_visited += post.len();
                    for &j in post {
                        let j = j as usize;
                        if j == i || (!cfg.ordered && j < i) {
                            continue;
                        }
                        if counts[j] == 0 {
                            touched.push(j as u32);
                        }
                        counts[j] += 1;
                    }
                }
                touched.sort_unstable();
                let mut out = Vec::new();
                for &j in touched.iter() {
                    let j = j as usize;
                    let inter = counts[j] as usize;
                    counts[j] = 0;
                    stats.evaluated += 1;
                    let sim = tanimoto_from_counts(inter, sizes[i] + sizes[j] - inter).value;
                    if sim >= cfg.delta {
                        out.push(PairRecord {
                            x: i,
                            y: j,
                            similarity: sim,
                        });
                    }
                }
                touched.clear();
                (out, stats)
            },
        )
        .collect();
    let mut pairs = Vec::new();
    let mut stats = MiningStats::default();
    for (p, s) in per_x {
        pairs.extend(p);
        stats.evaluated += s.evaluated;
        stats.postings_visited += s.postings_visited;
    }
    Ok((pairs, stats))
}

/// Reference O(n²) double loop over full Tanimoto evaluations.
pub fn mine_pairs_naive(
    corpus: &[MoleculeRecord],
    cfg: &MiningConfig,
) -> Result<Vec<PairRecord>, PipelineError> {
    check_delta(cfg.delta)?;
    let mut out = Vec::new();
    for (i, a) in corpus.iter().enumerate() {
        for (j, b) in corpus.iter().enumerate() {
            if i == j || (!cfg.ordered && j < i) {
                continue;
            }
            let sim = tanimoto(&a.fingerprint, &b.fingerprint)?.value;
            if sim >= cfg.delta {
                out.push(PairRecord {
                    x: i,
                    y: j,
                    similarity: sim,
                });
            }
        }
    }
    Ok(out)
}

/// Random sub-δ pairs: for each molecule, up to `per_molecule` random partners
/// are drawn and kept when their similarity is below δ. Duplicates are dropped.
pub fn sample_negative_pairs(
    corpus: &[MoleculeRecord],
    delta: f64,
    per_molecule: usize,
    seed: u64,
) -> Result<Vec<PairRecord>, PipelineError> {
    let n = corpus.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    if n < 2 {
        return Ok(out);
    }
    for i in 0..n {
        for _ in 0..per_molecule {
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            if !seen.insert((i, j)) {
                continue;
            }
            let sim = tanimoto(&corpus[i].fingerprint, &corpus[j].fingerprint)?.value;
            if sim < delta {
                out.push(PairRecord {
                    x: i,
                    y: j,
                    similarity: sim,
                });
            }
        }
    }
    out.sort_by_key(|p| (p.x, p.y));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubsampleConfig {
    /// Share of the combined pool to keep, in (0, 1].
    pub fraction: f64,
    pub positive_ratio: f64,
    pub bins: usize,
    pub delta: f64,
}

impl Default for SubsampleConfig {
    fn default() -> Self {
        SubsampleConfig {
            fraction: 1.0,
            positive_ratio: 0.5,
            bins: 10,
            delta: 0.4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPair {
    pub pair: PairRecord,
    pub label: bool,
}

fn bin_of(sim: f64, bins: usize) -> usize {
    ((sim * bins as f64).floor() as usize).min(bins - 1)
}

/// Splits `total` across groups in proportion to `sizes` by largest remainder
/// (ties go to the lower group index).
fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let pool: usize = sizes.iter().sum();
    if pool == 0 {
        return vec![0; sizes.len()];
    }
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| s * total / pool).collect();
    let mut rest: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| (s * total % pool, i))
        .collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = total - alloc.iter().sum::<usize>();
    for (_, i) in rest {
        if missing == 0 {
            break;
        }
        if alloc[i] < sizes[i] {
            alloc[i] += 1;
            missing -= 1;
        }
    }
    alloc
}

fn stratified(
    rows: &[PairRecord],
    take: usize,
    bins: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<PairRecord> {
    let mut by_bin: Vec<Vec<PairRecord>> = vec![Vec::new(); bins];
    for r in rows {
        by_bin[bin_of(r.similarity, bins)].push(*r);
    }
    let sizes: Vec<usize> = by_bin.iter().map(Vec::len).collect();
    let alloc = apportion(&sizes, take);
    let mut out = Vec::with_capacity(take);
    for (mut group, k) in by_bin.into_iter().zip(alloc) {
        group.shuffle(rng);
        out.extend(group.into_iter().take(k));
    }
    out
}

/// Labeled SimNet sample drawn from positive and negative pools. Each class
/// is sampled stratified over similarity bins so its histogram is preserved,
/// and class sizes are set so the positive share matches `positive_ratio`.
pub fn subsample_simnet(
    positives: &[PairRecord],
    negatives: &[PairRecord],
    cfg: &SubsampleConfig,
    seed: u64,
) -> Result<Vec<LabeledPair>, PipelineError> {
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(PipelineError::Invalid(format!(
            "fraction {} outside (0, 1]",
            cfg.fraction
        )));
    }
    if !(0.0..=1.0).contains(&cfg.positive_ratio) || cfg.bins == 0 {
        return Err(PipelineError::Invalid(
            "positive ratio outside [0, 1] or zero bins".into(),
        ));
    }
    let pos: Vec<PairRecord> = positives
        .iter()
        .chain(negatives)
        .filter(|p| p.similarity >= cfg.delta)
        .copied()
        .collect();
    let neg: Vec<PairRecord> = positives
        .iter()
        .chain(negatives)
        .filter(|p| p.similarity < cfg.delta)
        .copied()
        .collect();
    let total = ((pos.len() + neg.len()) as f64 * cfg.fraction).round() as usize;
    let want_pos = (total as f64 * cfg.positive_ratio).round() as usize;
    let want_neg = total - want_pos;
    if want_pos > pos.len() {
        return Err(PipelineError::InsufficientPositives {
            needed: want_pos,
            available: pos.len(),
        });
    }
    if want_neg > neg.len() {
        return Err(PipelineError::InsufficientNegatives {
            needed: want_neg,
            available: neg.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<LabeledPair> = stratified(&pos, want_pos, cfg.bins, &mut rng)
        .into_iter()
        .map(|pair| LabeledPair { pair, label: true })
        .chain(
            stratified(&neg, want_neg, cfg.bins, &mut rng)
                .into_iter()
                .map(|pair| LabeledPair { pair, label: false }),
        )
        .collect();
    out.sort_by_key(|l| (l.pair.x, l.pair.y));
    Ok(out)
}

/// Seeded shuffle, then the first `round(n·ratio)` rows go to train.
pub fn split<T: Clone>(
    rows: &[T],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), PipelineError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(PipelineError::Invalid(format!(
            "split ratio {ratio} outside (0, 1)"
        )));
    }
    let n = rows.len();
    let n_train = (n as f64 * ratio).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(PipelineError::TooFewRows(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order[..n_train].iter().map(|&i| rows[i].clone()).collect();
    let dev = order[n_train..].iter().map(|&i| rows[i].clone()).collect();
    Ok((train, dev))
}

/// Molecules of the pairs that also occur in `holdout`, sorted and unique.
pub fn leakage_audit<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    holdout: &HashSet<String>,
) -> Vec<String> {
    let mut leaked = BTreeSet::new();
    for (x, y) in pairs {
        for m in [x, y] {
            if holdout.contains(m) {
                leaked.insert(m.to_string());
            }
        }
    }
    leaked.into_iter().collect()
}

/// A pair row as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRow {
    pub x: String,
    pub y: String,
    pub similarity: f64,
    pub px: PropertyVector,
    pub py: PropertyVector,
    pub label: Option<bool>,
}

impl PairRow {
    pub fn from_record(corpus: &[MoleculeRecord], p: &PairRecord, label: Option<bool>) -> Self {
        PairRow {
            x: corpus[p.x].smiles.clone(),
            y: corpus[p.y].smiles.clone(),
            similarity: p.similarity,
            px: corpus[p.x].properties,
            py: corpus[p.y].properties,
            label,
        }
    }
}

pub const PAIR_HEADER: &str = "x_smiles\ty_smiles\tsimilarity\tpx1\tpx2\tpx3\tpy1\tpy2\tpy3";

/// Pair TSV (SimNet TSV when rows carry labels) with a provenance comment line.
pub fn pairs_tsv(rows: &[PairRow], config_hash: u64, seed: u64) -> String {
    let labeled = rows.first().is_some_and(|r| r.label.is_some());
    let mut s = format!("# config_hash={config_hash:016x} seed={seed}\n{PAIR_HEADER}");
    s.push_str(if labeled { "\tlabel\n" } else { "\n" });
    for r in rows {
        let _ = write!(s, "{}\t{}\t{}", r.x, r.y, r.similarity);
        for v in r.px.to_array().iter().chain(&r.py.to_array()) {
            let _ = write!(s, "\t{v}");
        }
        if let Some(l) = r.label {
            let _ = write!(s, "\t{}", u8::from(l));
        }
        s.push('\n');
    }
    s
}

/// Reads either pair TSV flavour; comment and header lines are skipped.
pub fn parse_pairs(reader: impl BufRead) -> Result<Vec<PairRow>, PipelineError> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') || line.starts_with("x_smiles\t") {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 && f.len() != 10 {
            return Err(PipelineError::Parse {
                line: line_no,
                msg: format!("expected 9 or 10 fields, found {}", f.len()),
            });
        }
        let num = |k: usize| -> Result<f64, PipelineError> {
            f[k].trim().parse().map_err(|_| PipelineError::Parse {
                line: line_no,
                msg: format!("field {} is not a number: {:?}", k + 1, f[k]),
            })
        };
        let mut vals = [0.0; 2 * NUM_PROPERTIES];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = num(3 + k)?;
        }
        let label = match f.get(9).map(|s| s.trim()) {
            None => None,
            Some("1") => Some(true),
            Some("0") => Some(false),
            Some(other) => {
                return Err(PipelineError::Parse {
                    line: line_no,
                    msg: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        rows.push(PairRow {
            x: f[0].to_string(),
            y: f[1].to_string(),
            similarity: num(2)?,
            px: PropertyVector::from_array([vals[0], vals[1], vals[2]]),
            py: PropertyVector::from_array([vals[3], vals[4], vals[5]]),
            label,
        });
    }
    Ok(rows)
}

/// Knobs for the whole curation pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurateConfig {
    pub mining: MiningConfig,
    pub negatives_per_molecule: usize,
    pub subsample: SubsampleConfig,
    /// Upper bound on the SimNet sample size; the sample also shrinks to
    /// whatever the class pools can supply at the requested ratio.
    pub simnet_size: usize,
    pub split_ratio: f64,
}

impl Default for CurateConfig {
    fn default() -> Self {
        CurateConfig {
            mining: MiningConfig::default(),
            negatives_per_molecule: 10,
            subsample: SubsampleConfig::default(),
            simnet_size: 2000,
            split_ratio: 0.8,
        }
    }
}

impl CurateConfig {
    pub const KEYS: [&'static str; 7] = [
        "curate.delta",
        "curate.ordered",
        "curate.negatives_per_molecule",
        "curate.simnet_size",
        "curate.positive_ratio",
        "curate.bins",
        "curate.split_ratio",
    ];

    pub fn from_kv(kv: &KeyValues, mut base: CurateConfig) -> Result<Self, ConfigError> {
        kv.apply("curate.delta", &mut base.mining.delta)?;
        kv.apply("curate.ordered", &mut base.mining.ordered)?;
        kv.apply(
            "curate.negatives_per_molecule",
            &mut base.negatives_per_molecule,
        )?;
        kv.apply("curate.simnet_size", &mut base.simnet_size)?;
        kv.apply("curate.positive_ratio", &mut base.subsample.positive_ratio)?;
        kv.apply("curate.bins", &mut base.subsample.bins)?;
        kv.apply("curate.split_ratio", &mut base.split_ratio)?;
        base.subsample.delta = base.mining.delta;
        Ok(base)
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("curate.delta", self.mining.delta);
        kv.set("curate.ordered", self.mining.ordered);
        kv.set("curate.negatives_per_molecule", self.negatives_per_molecule);
        kv.set("curate.simnet_size", self.simnet_size);
        kv.set("curate.positive_ratio", self.subsample.positive_ratio);
        kv.set("curate.bins", self.subsample.bins);
        kv.set("curate.split_ratio", self.split_ratio);
    }

    pub fn hash(&self) -> u64 {
        let mut kv = KeyValues::new();
        self.write_kv(&mut kv);
        kv.hash()
    }
}

/// Everything `curate` produces.
#[derive(Clone, Debug)]
pub struct Curated {
    pub corpus: Vec<MoleculeRecord>,
    pub removed: usize,
    pub stats: MiningStats,
    pub pairs_train: Vec<PairRow>,
    pub pairs_dev: Vec<PairRow>,
    pub simnet_train: Vec<PairRow>,
    pub simnet_dev: Vec<PairRow>,
    pub molecules_train: Vec<MoleculeRecord>,
    pub molecules_dev: Vec<MoleculeRecord>,
}

/// Largest pool fraction that stays within `simnet_size` and that both class
/// pools can supply at the requested positive ratio.
fn simnet_fraction(mined: &[PairRecord], negatives: &[PairRecord], cfg: &CurateConfig) -> f64 {
    let delta = cfg.mining.delta;
    let all = || mined.iter().chain(negatives);
    let pos = all().filter(|p| p.similarity >= delta).count() as f64;
    let neg = all().filter(|p| p.similarity < delta).count() as f64;
    let pool = pos + neg;
    if pool == 0.0 {
        return 1.0;
    }
    let r = cfg.subsample.positive_ratio;
    let mut cap = cfg.simnet_size as f64;
    if r > 0.0 {
        cap = cap.min(pos / r);
    }
    if r < 1.0 {
        cap = cap.min(neg / (1.0 - r));
    }
    // One row of slack absorbs rounding in the class sizes.
    ((cap - 1.0).max(1.0) / pool).min(1.0)
}

/// Exclusion, mining, negatives, SimNet sampling and 8:2-style splits,
/// all as a pure function of the inputs and `seed`.
pub fn curate(
    corpus: Vec<MoleculeRecord>,
    holdout: &HashSet<String>,
    cfg: &CurateConfig,
    seed: u64,
) -> Result<Curated, PipelineError> {
    let (corpus, removed) = exclude_molecules(corpus, holdout);
    let (mined, stats) = mine_pairs(&corpus, &cfg.mining)?;
    let rows: Vec<PairRow> = mined
        .iter()
        .map(|p| PairRow::from_record(&corpus, p, None))
        .collect();
    let (pairs_train, pairs_dev) = split(&rows, cfg.split_ratio, seed)?;

    let negatives = sample_negative_pairs(
        &corpus,
        cfg.mining.delta,
        cfg.negatives_per_molecule,
        seed ^ 0x5eed_0001,
    )?;
    let sub = SubsampleConfig {
        delta: cfg.mining.delta,
        fraction: simnet_fraction(&mined, &negatives, cfg),
        ..cfg.subsample
    };
    let labeled = subsample_simnet(&mined, &negatives, &sub, seed ^ 0x5eed_0002)?;
    let labeled_rows: Vec<PairRow> = labeled
        .iter()
        .map(|l| PairRow::from_record(&corpus, &l.pair, Some(l.label)))
        .collect();
    let (simnet_train, simnet_dev) = split(&labeled_rows, cfg.split_ratio, seed ^ 0x5eed_0003)?;
    let (molecules_train, molecules_dev) = split(&corpus, cfg.split_ratio, seed ^ 0x5eed_0004)?;
    Ok(Curated {
        corpus,
        removed,
        stats,
        pairs_train,
        pairs_dev,
        simnet_train,
        simnet_dev,
        molecules_train,
        molecules_dev,
    })
}

//! Evaluation: improvement, diversity and multi-objective success rate.

use std::fmt::Write as _;
use std::io::BufRead;
use std::str::FromStr;

use thiserror::Error;

use crate::chem::{smiles_similarity, tanimoto, ChemError};
use crate::config::{ConfigError, KeyValues};
use crate::decoding::GENERATION_HEADER;
use crate::pipeline::MoleculeRecord;
use crate::properties::{PropertySource, PropertyVector, NUM_PROPERTIES, PROPERTY_NAMES};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no properties for {0}")]
    MissingProperties(String),
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bad target specification {spec:?}: {msg}")]
    Target { spec: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Multi-objective success thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MooCriteria {
    pub delta: f64,
    pub min_plogp_gain: f64,
    pub min_qed: f64,
    /// Exclusive lower bound.
    pub min_drd2: f64,
}

impl Default for MooCriteria {
    fn default() -> Self {
        MooCriteria {
            delta: 0.4,
            min_plogp_gain: 1.0,
            min_qed: 0.9,
            min_drd2: 0.5,
        }
    }
}

impl MooCriteria {
    pub fn from_kv(kv: &KeyValues, mut base: MooCriteria) -> Result<Self, ConfigError> {
        kv.apply("moo.delta", &mut base.delta)?;
        kv.apply("moo.min_plogp_gain", &mut base.min_plogp_gain)?;
        kv.apply("moo.min_qed", &mut base.min_qed)?;
        kv.apply("moo.min_drd2", &mut base.min_drd2)?;
        Ok(base)
    }

    /// Threshold test on precomputed similarity and properties.
    pub fn passes(&self, similarity: f64, px: &PropertyVector, py: &PropertyVector) -> bool {
        similarity >= self.delta
            && py.plogp - px.plogp >= self.min_plogp_gain
            && py.qed >= self.min_qed
            && py.drd2 > self.min_drd2
    }
}

pub fn moo_success(
    x: &MoleculeRecord,
    y: &MoleculeRecord,
    c: &MooCriteria,
) -> Result<bool, EvalError> {
    let sim = tanimoto(&x.fingerprint, &y.fingerprint)?.value;
    Ok(c.passes(sim, &x.properties, &y.properties))
}

/// One generated output with oracle properties attached.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredOutput {
    pub smiles: Option<String>,
    pub valid: bool,
    pub tanimoto: Option<f64>,
    pub properties: Option<PropertyVector>,
}

impl ScoredOutput {
    fn similar(&self, delta: f64) -> bool {
        self.valid && self.tanimoto.is_some_and(|t| t >= delta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredInput {
    pub input: String,
    pub properties: Option<PropertyVector>,
    pub outputs: Vec<ScoredOutput>,
}

/// One generation TSV row: output SMILES, validity flag, Tanimoto to the input.
pub type GeneratedRow = (Option<String>, bool, Option<f64>);

/// Groups generation TSV rows by input (first-appearance order).
pub fn parse_generation(
    reader: impl BufRead,
) -> Result<Vec<(String, Vec<GeneratedRow>)>, EvalError> {
    let mut groups: Vec<(String, Vec<GeneratedRow>)> = Vec::new();
    let n_fields = GENERATION_HEADER.split('\t').count();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') || line == GENERATION_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != n_fields {
            return Err(EvalError::Parse {
                line: line_no,
                msg: format!("expected {n_fields} fields, found {}", f.len()),
            });
        }
        let valid = match f[3] {
            "1" => true,
            "0" => false,
            v => {
                return Err(EvalError::Parse {
                    line: line_no,
                    msg: format!("valid flag must be 0 or 1, got {v:?}"),
                })
            }
        };
        let output = (f[2] != "NA").then(|| f[2].to_string());
        let sim = if f[4] == "NA" {
            None
        } else {
            Some(f[4].parse::<f64>().map_err(|_| EvalError::Parse {
                line: line_no,
                msg: format!("tanimoto is not a number: {:?}", f[4]),
            })?)
        };
        match groups.last_mut() {
            Some((inp, rows)) if inp == f[0] => rows.push((output, valid, sim)),
            _ => groups.push((f[0].to_string(), vec![(output, valid, sim)])),
        }
    }
    Ok(groups)
}

/// Attaches oracle properties to parsed generation rows.
pub fn score_generation(
    groups: Vec<(String, Vec<GeneratedRow>)>,
    oracle: &PropertySource,
) -> Vec<ScoredInput> {
    groups
        .into_iter()
        .map(|(input, rows)| ScoredInput {
            properties: oracle.lookup(&input),
            outputs: rows
                .into_iter()
                .map(|(smiles, valid, tanimoto)| ScoredOutput {
                    properties: if valid {
                        smiles.as_deref().and_then(|s| oracle.lookup(s))
                    } else {
                        None
                    },
                    smiles,
                    valid,
                    tanimoto: if valid { tanimoto } else { None },
                })
                .collect(),
            input,
        })
        .collect()
}

/// What to do with inputs that have no valid, similar output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EmptyPolicy {
    #[default]
    Zero,
    Drop,
}

/// Population mean and standard deviation of the per-input best increment of
/// property `index` among valid outputs with similarity ≥ δ.
pub fn metric_improvement(
    results: &[ScoredInput],
    index: usize,
    delta: f64,
    policy: EmptyPolicy,
) -> Result<(f64, f64), EvalError> {
    let mut best = Vec::with_capacity(results.len());
    for r in results {
        let mut top: Option<f64> = None;
        for o in r.outputs.iter().filter(|o| o.similar(delta)) {
            let px = r
                .properties
                .ok_or_else(|| EvalError::MissingProperties(r.input.clone()))?;
            let py = o.properties.ok_or_else(|| {
                EvalError::MissingProperties(o.smiles.clone().unwrap_or_default())
            })?;
            let inc = py.get(index) - px.get(index);
            top = Some(top.map_or(inc, |t: f64| t.max(inc)));
        }
        match (top, policy) {
            (Some(v), _) => best.push(v),
            (None, EmptyPolicy::Zero) => best.push(0.0),
            (None, EmptyPolicy::Drop) => {}
        }
    }
    Ok(mean_std(&best))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean pairwise Tanimoto distance among each input's distinct valid,
/// similar outputs (0 with fewer than two), averaged over inputs.
///
/// A stand-in for the usual diversity score, whose exact definition differs.
pub fn metric_diversity(results: &[ScoredInput], delta: f64) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for r in results {
        let mut distinct: Vec<&str> = r
            .outputs
            .iter()
            .filter(|o| o.similar(delta))
            .filter_map(|o| o.smiles.as_deref())
            .collect();
        distinct.sort_unstable();
        distinct.dedup();
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..distinct.len() {
            for j in i + 1..distinct.len() {
                if let Ok(s) = smiles_similarity(distinct[i], distinct[j]) {
                    sum += 1.0 - s;
                    pairs += 1;
                }
            }
        }
        if pairs > 0 {
            total += sum / pairs as f64;
        }
    }
    total / results.len() as f64
}

/// Percentage of inputs with at least one output passing the criteria.
/// Outputs or inputs lacking properties never count as successes.
pub fn metric_moo_success_rate(results: &[ScoredInput], c: &MooCriteria) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results
        .iter()
        .filter(|r| {
            r.properties.is_some_and(|px| {
                r.outputs.iter().any(|o| {
                    o.valid && matches!((o.tanimoto, o.properties), (Some(t), Some(py)) if c.passes(t, &px, &py))
                })
            })
        })
        .count();
    100.0 * hits as f64 / results.len() as f64
}

/// Share of outputs that parse as molecules.
pub fn validity_rate(results: &[ScoredInput]) -> f64 {
    let total: usize = results.iter().map(|r| r.outputs.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let valid: usize = results
        .iter()
        .map(|r| r.outputs.iter().filter(|o| o.valid).count())
        .sum();
    valid as f64 / total as f64
}

/// Per-property target rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetOp {
    Keep,
    Set(f64),
    Add(f64),
}

/// Target specification like `plogp+1,qed=keep,drd2=0.6`; unnamed properties keep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetSpec(pub [TargetOp; NUM_PROPERTIES]);

impl TargetSpec {
    pub fn apply(&self, px: &PropertyVector) -> PropertyVector {
        let mut out = px.to_array();
        for (v, op) in out.iter_mut().zip(&self.0) {
            match *op {
                TargetOp::Keep => {}
                TargetOp::Set(t) => *v = t,
                TargetOp::Add(d) => *v += d,
            }
        }
        PropertyVector::from_array(out)
    }
}

impl FromStr for TargetSpec {
    type Err = EvalError;

    fn from_str(spec: &str) -> Result<Self, EvalError> {
        let err = |msg: String| EvalError::Target {
            spec: spec.to_string(),
            msg,
        };
        let mut ops = [TargetOp::Keep; NUM_PROPERTIES];
        let mut seen = [false; NUM_PROPERTIES];
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let split_at = part
                .find(['=', '+', '-'])
                .ok_or_else(|| err(format!("{part:?} has no '=', '+' or '-'")))?;
            let (name, rule) = part.split_at(split_at);
            let k = PROPERTY_NAMES
                .iter()
                .position(|n| n.eq_ignore_ascii_case(name.trim()))
                .ok_or_else(|| err(format!("unknown property {name:?}")))?;
            if std::mem::replace(&mut seen[k], true) {
                return Err(err(format!("{name} given twice")));
            }
            let num = |t: &str| {
                t.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("bad number {t:?}")))
            };
            ops[k] = match rule.split_at(1) {
                ("=", v) if v.trim() == "keep" => TargetOp::Keep,
                ("=", v) => TargetOp::Set(num(v)?),
                ("+", v) => TargetOp::Add(num(v)?),
                (_, v) => TargetOp::Add(-num(v)?),
            };
        }
        Ok(TargetSpec(ops))
    }
}

/// Parses comma-separated per-property values, such as a jitter scale.
pub fn parse_triple(text: &str) -> Result<[f64; NUM_PROPERTIES], EvalError> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| EvalError::Target {
            spec: text.to_string(),
            msg: e.to_string(),
        })?;
    match vals.as_slice() {
        [v] => Ok([*v; NUM_PROPERTIES]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(EvalError::Target {
            spec: text.to_string(),
            msg: format!("expected 1 or {NUM_PROPERTIES} values"),
        }),
    }
}

/// Metrics for one evaluated generation file.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub inputs: usize,
    pub outputs: usize,
    pub validity: f64,
    pub improvement: [(f64, f64); NUM_PROPERTIES],
    pub diversity: f64,
    pub moo_success_rate: f64,
}

pub fn summarize(
    results: &[ScoredInput],
    criteria: &MooCriteria,
    policy: EmptyPolicy,
) -> Result<EvalSummary, EvalError> {
    let mut improvement = [(0.0, 0.0); NUM_PROPERTIES];
    for (k, slot) in improvement.iter_mut().enumerate() {
        *slot = metric_improvement(results, k, criteria.delta, policy)?;
    }
    Ok(EvalSummary {
        inputs: results.len(),
        outputs: results.iter().map(|r| r.outputs.len()).sum(),
        validity: validity_rate(results),
        improvement,
        diversity: metric_diversity(results, criteria.delta),
        moo_success_rate: metric_moo_success_rate(results, criteria),
    })
}

impl EvalSummary {
    /// `metric<TAB>value` rows.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tvalue\n");
        let _ = writeln!(s, "inputs\t{}", self.inputs);
        let _ = writeln!(s, "outputs\t{}", self.outputs);
        let _ = writeln!(s, "validity\t{:.6}", self.validity);
        for (name, (m, sd)) in PROPERTY_NAMES.iter().zip(&self.improvement) {
            let _ = writeln!(s, "{name}_improvement_mean\t{m:.6}");
            let _ = writeln!(s, "{name}_improvement_std\t{sd:.6}");
        }
        let _ = writeln!(s, "diversity_proxy\t{:.6}", self.diversity);
        let _ = writeln!(s, "moo_success_pct\t{:.2}", self.moo_success_rate);
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{} inputs, {} outputs, {:.1}% valid\n",
            self.inputs,
            self.outputs,
            100.0 * self.validity
        );
        for (name, (m, sd)) in PROPERTY_NAMES.iter().zip(&self.improvement) {
            let _ = writeln!(s, "{name} improvement: {m:.2} ± {sd:.2}");
        }
        let _ = writeln!(
            s,
            "diversity (pairwise-distance proxy): {:.3}",
            self.diversity
        );
        let _ = writeln!(s, "MOO success: {:.2}%", self.moo_success_rate);
        s
    }
}

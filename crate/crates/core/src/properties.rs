//! The three-property conditioning vector (PlogP, QED, DRD2), its scaling,
//! TSV ingestion, and deterministic surrogate properties.
//!
//! The surrogates are simple graph-count formulas standing in for the real
//! chemistry scores so that everything runs without an external toolkit. They
//! are not PlogP, QED or DRD2.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use thiserror::Error;

use crate::chem::{parse_graph, ChemError, MolecularGraph};

pub const NUM_PROPERTIES: usize = 3;
pub const PROPERTY_NAMES: [&str; NUM_PROPERTIES] = ["plogp", "qed", "drd2"];

#[derive(Debug, Error)]
pub enum PropertyError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {name}={value} outside [0, 1]")]
    Range {
        line: usize,
        name: &'static str,
        value: f64,
    },
    #[error("property vector not finite or out of range: {0:?}")]
    Invalid([f64; NUM_PROPERTIES]),
    #[error("scaler has not been fitted")]
    UnfittedScaler,
    #[error("cannot fit a scaler on an empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropertyVector {
    pub plogp: f64,
    pub qed: f64,
    pub drd2: f64,
}

impl PropertyVector {
    pub fn new(plogp: f64, qed: f64, drd2: f64) -> Result<Self, PropertyError> {
        let p = PropertyVector { plogp, qed, drd2 };
        let ok = p.to_array().iter().all(|v| v.is_finite())
            && (0.0..=1.0).contains(&qed)
            && (0.0..=1.0).contains(&drd2);
        if ok {
            Ok(p)
        } else {
            Err(PropertyError::Invalid(p.to_array()))
        }
    }

    pub fn to_array(self) -> [f64; NUM_PROPERTIES] {
        [self.plogp, self.qed, self.drd2]
    }

    /// No range check; used for targets and jittered values.
    pub fn from_array(a: [f64; NUM_PROPERTIES]) -> Self {
        PropertyVector {
            plogp: a[0],
            qed: a[1],
            drd2: a[2],
        }
    }

    pub fn get(&self, index: usize) -> f64 {
        self.to_array()[index]
    }
}

/// Per-dimension affine scaling fitted on a training corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PropertyScaler {
    fitted: Option<([f64; NUM_PROPERTIES], [f64; NUM_PROPERTIES])>,
}

impl PropertyScaler {
    pub fn identity() -> Self {
        Self::from_parts([0.0; 3], [1.0; 3]).expect("unit scale is positive")
    }

    pub fn from_parts(shift: [f64; 3], scale: [f64; 3]) -> Result<Self, PropertyError> {
        if scale.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || shift.iter().any(|s| !s.is_finite())
        {
            return Err(PropertyError::Invalid(scale));
        }
        Ok(PropertyScaler {
            fitted: Some((shift, scale)),
        })
    }

    /// Mean and population standard deviation; constant dimensions get scale 1.
    pub fn fit<'a>(
        vectors: impl IntoIterator<Item = &'a PropertyVector>,
    ) -> Result<Self, PropertyError> {
        let rows: Vec<[f64; 3]> = vectors.into_iter().map(|p| p.to_array()).collect();
        if rows.is_empty() {
            return Err(PropertyError::EmptyCorpus);
        }
        let n = rows.len() as f64;
        let mut shift = [0.0; 3];
        let mut scale = [0.0; 3];
        for k in 0..3 {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
            shift[k] = mean;
            scale[k] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Self::from_parts(shift, scale)
    }

    pub fn parts(&self) -> Option<([f64; 3], [f64; 3])> {
        self.fitted
    }

    pub fn normalize(&self, p: &PropertyVector) -> Result<[f64; 3], PropertyError> {
        let (shift, scale) = self.fitted.ok_or(PropertyError::UnfittedScaler)?;
        let a = p.to_array();
        Ok(std::array::from_fn(|k| (a[k] - shift[k]) / scale[k]))
    }

    pub fn denormalize(&self, z: &[f64; 3]) -> Result<PropertyVector, PropertyError> {
        let (shift, scale) = self.fitted.ok_or(PropertyError::UnfittedScaler)?;
        Ok(PropertyVector::from_array(std::array::from_fn(|k| {
            z[k] * scale[k] + shift[k]
        })))
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Surrogate property vector from graph counts:
/// plogp = 0.4·#C − 0.6·(#N + #O) − 0.3·#rings,
/// qed = σ(1.5 − 0.1·|#heavy − 25|), drd2 = σ(0.5·#aromatic − 4).
pub fn surrogate_properties(g: &MolecularGraph) -> Result<PropertyVector, ChemError> {
    if g.is_empty() {
        return Err(ChemError::EmptyGraph);
    }
    let atoms = g.atoms();
    let count =
        |pred: &dyn Fn(&crate::chem::Atom) -> bool| atoms.iter().filter(|a| pred(a)).count() as f64;
    let carbons = count(&|a| a.element == "C");
    let n_o = count(&|a| a.element == "N" || a.element == "O");
    let heavy = count(&|a| a.is_heavy());
    let aromatic = count(&|a| a.aromatic);
    let rings = g.ring_count() as f64;
    Ok(PropertyVector {
        plogp: 0.4 * carbons - 0.6 * n_o - 0.3 * rings,
        qed: logistic(1.5 - 0.1 * (heavy - 25.0).abs()),
        drd2: logistic(0.5 * aromatic - 4.0),
    })
}

pub fn surrogate_properties_smiles(smiles: &str) -> Result<PropertyVector, ChemError> {
    surrogate_properties(&parse_graph(smiles)?)
}

/// Where property values come from: an ingested table or the surrogates.
#[derive(Clone, Debug)]
pub enum PropertySource {
    Table(HashMap<String, PropertyVector>),
    Surrogate,
}

impl PropertySource {
    pub fn lookup(&self, smiles: &str) -> Option<PropertyVector> {
        match self {
            PropertySource::Table(map) => map.get(smiles).copied(),
            PropertySource::Surrogate => surrogate_properties_smiles(smiles).ok(),
        }
    }
}

/// Parsed property table plus how many duplicate rows were overwritten.
#[derive(Clone, Debug, Default)]
pub struct PropertyTable {
    pub values: HashMap<String, PropertyVector>,
    pub order: Vec<String>,
    pub duplicates: usize,
}

pub fn load_properties(path: &Path) -> Result<PropertyTable, PropertyError> {
    let file = std::fs::File::open(path)?;
    parse_properties(std::io::BufReader::new(file))
}

/// `smiles<TAB>plogp<TAB>qed<TAB>drd2`, optional header, `#` comments; last duplicate wins.
pub fn parse_properties(reader: impl BufRead) -> Result<PropertyTable, PropertyError> {
    let mut table = PropertyTable::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(PropertyError::Parse {
                line: line_no,
                msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        if table.order.is_empty()
            && table.duplicates == 0
            && fields[1].trim().eq_ignore_ascii_case("plogp")
        {
            continue;
        }
        let mut vals = [0.0; 3];
        for k in 0..3 {
            vals[k] = fields[k + 1]
                .trim()
                .parse::<f64>()
                .map_err(|e| PropertyError::Parse {
                    line: line_no,
                    msg: format!("{}: {e}", PROPERTY_NAMES[k]),
                })?;
            if !vals[k].is_finite() {
                return Err(PropertyError::Parse {
                    line: line_no,
                    msg: format!("{} is not finite", PROPERTY_NAMES[k]),
                });
            }
        }
        for (k, name) in [(1, "qed"), (2, "drd2")] {
            if !(0.0..=1.0).contains(&vals[k]) {
                return Err(PropertyError::Range {
                    line: line_no,
                    name,
                    value: vals[k],
                });
            }
        }
        let smiles = fields[0].trim().to_string();
        if smiles.is_empty() {
            return Err(PropertyError::Parse {
                line: line_no,
                msg: "empty SMILES field".into(),
            });
        }
        let p = PropertyVector::from_array(vals);
        if table.values.insert(smiles.clone(), p).is_some() {
            table.duplicates += 1;
        } else {
            table.order.push(smiles);
        }
    }
    Ok(table)
}

/// Writes the property TSV with a header row.
pub fn write_properties<'a>(
    mut out: impl std::io::Write,
    rows: impl IntoIterator<Item = (&'a str, &'a PropertyVector)>,
) -> std::io::Result<()> {
    writeln!(out, "smiles\tplogp\tqed\tdrd2")?;
    for (s, p) in rows {
        writeln!(out, "{s}\t{}\t{}\t{}", p.plogp, p.qed, p.drd2)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn parse_row() {
        let t = parse_properties("CCO\t-1.23\t0.41\t0.02\n".as_bytes()).unwrap();
        assert_eq!(
            t.values["CCO"],
            PropertyVector {
                plogp: -1.23,
                qed: 0.41,
                drd2: 0.02
            }
        );
        assert_eq!(t.duplicates, 0);
    }

    #[test]
    fn header_and_duplicates() {
        let text = "smiles\tplogp\tqed\tdrd2\nCCO\t1\t0.5\t0.5\nCCO\t2\t0.5\t0.5\n";
        let t = parse_properties(text.as_bytes()).unwrap();
        assert_eq!(t.values.len(), 1);
        assert_eq!(t.values["CCO"].plogp, 2.0);
        assert_eq!(t.duplicates, 1);
    }

    #[test]
    fn range_and_parse_errors() {
        let err = parse_properties("CCO\t1\t1.7\t0.1\n".as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            PropertyError::Range {
                line: 1,
                name: "qed",
                ..
            }
        ));
        let err = parse_properties("CCO\t1\t0.5\t0.1\nCC\tx\t0.1\t0.1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, PropertyError::Parse { line: 2, .. }));
        let err = parse_properties("CCO\t1\t0.5\n".as_bytes()).unwrap_err();
        assert!(matches!(err, PropertyError::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_file() {
        assert!(parse_properties("".as_bytes()).unwrap().values.is_empty());
    }

    #[test]
    fn surrogate_examples() {
        let p = surrogate_properties_smiles("CCO").unwrap();
        assert!((p.plogp - 0.2).abs() < 1e-12);
        assert!((p.drd2 - 0.017_986_209_962_091_56).abs() < 1e-12);

        let chain25 = "C".repeat(25);
        let q = surrogate_properties_smiles(&chain25).unwrap();
        assert!((q.qed - 0.817_574_476_193_643_7).abs() < 1e-12);

        // benzene: 6 C, 1 ring, 6 aromatic
        let b = surrogate_properties_smiles("c1ccccc1").unwrap();
        assert!((b.plogp - (2.4 - 0.3)).abs() < 1e-12);
        assert!((b.drd2 - 1.0 / (1.0 + (1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn scaler_contract() {
        let unfitted = PropertyScaler::default();
        let p = PropertyVector::new(1.0, 0.5, 0.5).unwrap();
        assert!(matches!(
            unfitted.normalize(&p),
            Err(PropertyError::UnfittedScaler)
        ));

        let id = PropertyScaler::identity();
        assert_eq!(id.normalize(&p).unwrap(), [1.0, 0.5, 0.5]);

        let s = PropertyScaler::from_parts([1.0, 0.5, 0.5], [2.0, 0.1, 0.3]).unwrap();
        assert_eq!(s.normalize(&p).unwrap(), [0.0, 0.0, 0.0]);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let v = PropertyVector::from_array([
                rng.random_range(-10.0..10.0),
                rng.random(),
                rng.random(),
            ]);
            let back = s.denormalize(&s.normalize(&v).unwrap()).unwrap();
            for k in 0..3 {
                worst = worst.max((back.get(k) - v.get(k)).abs());
            }
        }
        assert!(worst < 1e-9);
        assert!(PropertyScaler::from_parts([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn scaler_fit_handles_constant_dimension() {
        let rows = [
            PropertyVector::new(1.0, 0.5, 0.2).unwrap(),
            PropertyVector::new(3.0, 0.5, 0.4).unwrap(),
        ];
        let s = PropertyScaler::fit(&rows).unwrap();
        let (shift, scale) = s.parts().unwrap();
        assert_eq!(shift[0], 2.0);
        assert_eq!(scale[0], 1.0);
        assert_eq!(scale[1], 1.0);
        assert!(PropertyScaler::fit(&[]).is_err());
    }

    #[test]
    fn property_vector_range() {
        assert!(PropertyVector::new(0.0, 1.2, 0.0).is_err());
        assert!(PropertyVector::new(f64::NAN, 0.2, 0.0).is_err());
    }
}

//! Controlled molecule generation by property-conditioned SMILES translation.

pub mod chem;
pub mod config;
pub mod constraint;
pub mod decoding;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod properties;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod translator;

pub use chem::{ChemError, Fingerprint, MolecularGraph, Smiles, Vocabulary};
pub use config::{ConfigError, KeyValues};
pub use decoding::{generate, DecodeError, GenerateConfig, GenerationResult};
pub use eval::{EvalError, MooCriteria, TargetSpec};
pub use pipeline::{CurateConfig, MoleculeRecord, PairRecord, PipelineError};
pub use properties::{PropertyError, PropertyScaler, PropertySource, PropertyVector};
pub use training::{CmgModel, PropNetModel, SimNetModel, TrainConfig, TrainError, TrainReport};
pub use translator::TranslatorConfig;

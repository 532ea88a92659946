//! Constraint-network pre-training, weight transfer, and the composite
//! translation training loop.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::chem::{ChemError, Smiles, Vocabulary};
use crate::config::{ConfigError, KeyValues};
use crate::constraint::{propnet_loss, simnet_loss, ConstraintConfig, PropNet, SimNet, BCE_CLIP};
use crate::nn::NetError;
use crate::properties::{PropertyError, PropertyScaler, PropertyVector, NUM_PROPERTIES};
use crate::tensor::{
    load_checkpoint, save_checkpoint, Method, Optimizer, ParamStore, Tape, Tensor, TensorError, Var,
};
use crate::translator::{nll_sum, token_hits, Translator, TranslatorConfig};

pub const TRANSLATOR_PREFIX: &str = "translator.";
pub const PROPNET_PREFIX: &str = "propnet.";
pub const SIMNET_PREFIX: &str = "simnet.";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error(transparent)]
    Property(#[from] PropertyError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error(
        "vocabulary sizes differ: translator {translator}, propnet {propnet}, simnet {simnet}"
    )]
    VocabMismatch {
        translator: usize,
        propnet: usize,
        simnet: usize,
    },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Net(e.into())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lr: f64,
    pub method: Method,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Rescale the gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_p: 0.5,
            lambda_s: 0.5,
            lr: 1e-3,
            method: Method::Adam,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 9] = [
        "train.lambda_p",
        "train.lambda_s",
        "train.lr",
        "train.method",
        "train.batch_size",
        "train.max_epochs",
        "train.patience",
        "train.seed",
        "train.clip_norm",
    ];

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.lambda_p >= 0.0 && self.lambda_s >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues, mut base: TrainConfig) -> Result<Self, ConfigError> {
        kv.apply("train.lambda_p", &mut base.lambda_p)?;
        kv.apply("train.lambda_s", &mut base.lambda_s)?;
        kv.apply("train.lr", &mut base.lr)?;
        if let Some(m) = kv.get_str("train.method") {
            base.method = m.parse().map_err(|_| ConfigError::BadValue {
                key: "train.method".into(),
                value: m.into(),
            })?;
        }
        kv.apply("train.batch_size", &mut base.batch_size)?;
        kv.apply("train.max_epochs", &mut base.max_epochs)?;
        kv.apply("train.patience", &mut base.patience)?;
        kv.apply("train.seed", &mut base.seed)?;
        if let Some(c) = kv.get::<f64>("train.clip_norm")? {
            base.clip_norm = (c > 0.0).then_some(c);
        }
        base.validate()?;
        Ok(base)
    }

    fn optimizer(&self) -> Optimizer {
        Optimizer::new(self.method, self.lr)
    }
}

/// One row of a training report.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub lt: f64,
    pub lp: f64,
    pub ls: f64,
    pub lcmg: f64,
    /// Teacher-forced token accuracy, or classification accuracy for SimNet.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub chosen_epoch: usize,
    /// Selection metric at the chosen epoch (dev loss, MSE or accuracy).
    pub best_metric: f64,
}

impl TrainReport {
    pub fn dev(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(|r| r.split == "dev")
    }

    pub fn train(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(|r| r.split == "train")
    }

    /// `epoch  lt  lp  ls  lcmg  split` with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tlt\tlp\tls\tlcmg\tsplit\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{}",
                r.epoch, r.lt, r.lp, r.ls, r.lcmg, r.split
            );
        }
        s
    }

    pub fn write_tsv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_tsv())
    }
}

/// A tokenized molecule with its normalized property target.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertySample {
    pub ids: Vec<u32>,
    pub target: [f64; NUM_PROPERTIES],
}

/// A tokenized molecule pair with a 0/1 similarity label.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilaritySample {
    pub a: Vec<u32>,
    pub b: Vec<u32>,
    pub label: bool,
}

/// A tokenized translation pair with normalized properties.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub x: Vec<u32>,
    pub y: Vec<u32>,
    pub px: [f64; NUM_PROPERTIES],
    pub py: [f64; NUM_PROPERTIES],
}

pub fn tokenize_smiles(
    vocab: &Vocabulary,
    smiles: &str,
    max_len: usize,
) -> Result<Vec<u32>, ChemError> {
    Ok(vocab
        .tokenize(&Smiles::new(smiles)?, max_len)?
        .ids()
        .to_vec())
}

impl PairSample {
    pub fn from_smiles(
        vocab: &Vocabulary,
        max_len: usize,
        scaler: &PropertyScaler,
        x: &str,
        px: &PropertyVector,
        y: &str,
        py: &PropertyVector,
    ) -> Result<Self, TrainError> {
        Ok(PairSample {
            x: tokenize_smiles(vocab, x, max_len)?,
            y: tokenize_smiles(vocab, y, max_len)?,
            px: scaler.normalize(px)?,
            py: scaler.normalize(py)?,
        })
    }
}

fn body(ids: &[u32]) -> &[u32] {
    &ids[1.min(ids.len())..]
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Tracks the best selection metric and stops after `patience` epochs without improvement.
struct EarlyStop {
    best: Option<(usize, f64, Vec<Tensor>)>,
    patience: usize,
    stale: usize,
    higher_is_better: bool,
}

impl EarlyStop {
    fn new(patience: usize, higher_is_better: bool) -> Self {
        EarlyStop {
            best: None,
            patience,
            stale: 0,
            higher_is_better,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, epoch: usize, metric: f64, store: &ParamStore) -> bool {
        let better = match &self.best {
            None => true,
            Some((_, b, _)) => {
                if self.higher_is_better {
                    metric > *b
                } else {
                    metric < *b
                }
            }
        };
        if better {
            self.best = Some((epoch, metric, store.snapshot()));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    fn finish(self, store: &mut ParamStore, report: &mut TrainReport) {
        if let Some((epoch, metric, snap)) = self.best {
            store.restore(&snap);
            report.chosen_epoch = epoch;
            report.best_metric = metric;
        }
    }
}

fn apply_grads(
    store: &mut ParamStore,
    grads: &[(crate::tensor::ParamId, Tensor)],
    opt: &mut Optimizer,
    clip: Option<f64>,
) {
    store.zero_grad();
    store.accumulate(grads);
    if let Some(max) = clip {
        let norm = store.grad_norm(false);
        if norm > max {
            store.scale_grads(max / norm);
        }
    }
    opt.step(store);
}

/// A stand-alone PropNet with the scaler its targets were normalized by.
#[derive(Clone, Debug)]
pub struct PropNetModel {
    pub store: ParamStore,
    pub net: PropNet,
    pub scaler: PropertyScaler,
}

impl PropNetModel {
    pub fn new(
        config: ConstraintConfig,
        scaler: PropertyScaler,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = PropNet::new(&mut store, PROPNET_PREFIX, config, &mut rng)?;
        Ok(PropNetModel { store, net, scaler })
    }

    fn kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("model", "propnet");
        self.net.config().write_kv(PROPNET_PREFIX, &mut kv);
        write_scaler(&self.scaler, &mut kv);
        kv
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        save_model(path, &self.store, &self.kv())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let (loaded, kv) = load_model(path, "propnet")?;
        let cfg = ConstraintConfig::from_kv(PROPNET_PREFIX, &kv, ConstraintConfig::new(1, 1))?;
        let mut m = PropNetModel::new(cfg, read_scaler(&kv)?, 0)?;
        adopt(&mut m.store, &loaded, path)?;
        Ok(m)
    }

    /// Mean squared error per property entry, over `samples`.
    pub fn mse(&self, samples: &[PropertySample], batch: usize) -> Result<f64, TrainError> {
        let mut total = 0.0;
        for chunk in samples.chunks(batch.max(1)) {
            let tape = Tape::new();
            let ids: Vec<&[u32]> = chunk.iter().map(|s| body(&s.ids)).collect();
            let pred = self.net.forward_ids(&tape, &self.store, &ids)?;
            total += propnet_loss(pred, &targets(chunk)?)?.value().item() * chunk.len() as f64;
        }
        Ok(total / (samples.len() * NUM_PROPERTIES) as f64)
    }
}

fn targets(chunk: &[PropertySample]) -> Result<Tensor, TensorError> {
    Tensor::new(
        vec![chunk.len(), NUM_PROPERTIES],
        chunk.iter().flat_map(|s| s.target).collect(),
    )
}

/// Trains a PropNet on normalized targets; keeps the best-dev epoch.
/// The report's `lp` column holds per-entry MSE.
pub fn pretrain_propnet(
    train: &[PropertySample],
    dev: &[PropertySample],
    net: ConstraintConfig,
    scaler: PropertyScaler,
    cfg: &TrainConfig,
) -> Result<(PropNetModel, TrainReport), TrainError> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut model = PropNetModel::new(net, scaler, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut opt = cfg.optimizer();
    let mut report = TrainReport::default();
    let mut stop = EarlyStop::new(cfg.patience, false);
    for epoch in 1..=cfg.max_epochs {
        let order = shuffled(train.len(), &mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let chunk: Vec<PropertySample> = idx.iter().map(|&i| train[i].clone()).collect();
            let grads = {
                let tape = Tape::new();
                let ids: Vec<&[u32]> = chunk.iter().map(|s| body(&s.ids)).collect();
                let pred = model.net.forward_ids(&tape, &model.store, &ids)?;
                let loss = propnet_loss(pred, &targets(&chunk)?)?;
                sum += loss.value().item() * chunk.len() as f64;
                tape.backward(loss)?.param_grads()
            };
            apply_grads(&mut model.store, &grads, &mut opt, cfg.clip_norm);
        }
        let train_mse = sum / (train.len() * NUM_PROPERTIES) as f64;
        let dev_mse = model.mse(dev, cfg.batch_size.max(32))?;
        for (split, v) in [("train", train_mse), ("dev", dev_mse)] {
            report.records.push(EpochRecord {
                epoch,
                split,
                lt: 0.0,
                lp: v,
                ls: 0.0,
                lcmg: v,
                accuracy: None,
            });
        }
        log::info!("propnet epoch {epoch}: train mse {train_mse:.5} dev mse {dev_mse:.5}");
        if stop.observe(epoch, dev_mse, &model.store) {
            break;
        }
    }
    stop.finish(&mut model.store, &mut report);
    Ok((model, report))
}

#[derive(Clone, Debug)]
pub struct SimNetModel {
    pub store: ParamStore,
    pub net: SimNet,
}

impl SimNetModel {
    pub fn new(config: ConstraintConfig, seed: u64) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = SimNet::new(&mut store, SIMNET_PREFIX, config, &mut rng)?;
        Ok(SimNetModel { store, net })
    }

    fn kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("model", "simnet");
        self.net.config().write_kv(SIMNET_PREFIX, &mut kv);
        kv
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        save_model(path, &self.store, &self.kv())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let (loaded, kv) = load_model(path, "simnet")?;
        let cfg = ConstraintConfig::from_kv(SIMNET_PREFIX, &kv, ConstraintConfig::new(1, 1))?;
        let mut m = SimNetModel::new(cfg, 0)?;
        adopt(&mut m.store, &loaded, path)?;
        Ok(m)
    }

    /// `(mean BCE, accuracy)` where a prediction counts as positive above 0.5.
    pub fn evaluate(
        &self,
        samples: &[SimilaritySample],
        batch: usize,
    ) -> Result<(f64, f64), TrainError> {
        let mut loss = 0.0;
        let mut hits = 0;
        for chunk in samples.chunks(batch.max(1)) {
            let tape = Tape::new();
            let (pred, labels) = self.forward_chunk(&tape, chunk)?;
            loss += simnet_loss(pred, &labels)?.value().item() * chunk.len() as f64;
            let p = pred.value();
            hits += chunk
                .iter()
                .zip(p.data())
                .filter(|(s, &v)| (v > 0.5) == s.label)
                .count();
        }
        Ok((
            loss / samples.len() as f64,
            hits as f64 / samples.len() as f64,
        ))
    }

    fn forward_chunk<'t>(
        &self,
        tape: &'t Tape,
        chunk: &[SimilaritySample],
    ) -> Result<(Var<'t>, Vec<f64>), TrainError> {
        let a: Vec<&[u32]> = chunk.iter().map(|s| body(&s.a)).collect();
        let b: Vec<&[u32]> = chunk.iter().map(|s| body(&s.b)).collect();
        let pred = self.net.forward_ids(tape, &self.store, &a, &b)?;
        let labels = chunk
            .iter()
            .map(|s| if s.label { 1.0 } else { 0.0 })
            .collect();
        Ok((pred, labels))
    }
}

/// Trains a SimNet with BCE; keeps the epoch with the best dev accuracy
/// (ties go to the earlier epoch).
pub fn pretrain_simnet(
    train: &[SimilaritySample],
    dev: &[SimilaritySample],
    net: ConstraintConfig,
    cfg: &TrainConfig,
) -> Result<(SimNetModel, TrainReport), TrainError> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let positives = train.iter().filter(|s| s.label).count();
    if positives == 0 || positives == train.len() {
        return Err(TrainError::DegenerateLabels);
    }
    let mut model = SimNetModel::new(net, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut opt = cfg.optimizer();
    let mut report = TrainReport::default();
    let mut stop = EarlyStop::new(cfg.patience, true);
    for epoch in 1..=cfg.max_epochs {
        let order = shuffled(train.len(), &mut rng);
        let mut sum = 0.0;
        let mut hits = 0;
        for idx in order.chunks(cfg.batch_size) {
            let chunk: Vec<SimilaritySample> = idx.iter().map(|&i| train[i].clone()).collect();
            let grads = {
                let tape = Tape::new();
                let (pred, labels) = model.forward_chunk(&tape, &chunk)?;
                let loss = simnet_loss(pred, &labels)?;
                sum += loss.value().item() * chunk.len() as f64;
                let p = pred.value();
                hits += chunk
                    .iter()
                    .zip(p.data())
                    .filter(|(s, &v)| (v > 0.5) == s.label)
                    .count();
                tape.backward(loss)?.param_grads()
            };
            apply_grads(&mut model.store, &grads, &mut opt, cfg.clip_norm);
        }
        let train_loss = sum / train.len() as f64;
        let train_acc = hits as f64 / train.len() as f64;
        let (dev_loss, dev_acc) = model.evaluate(dev, cfg.batch_size.max(32))?;
        for (split, l, a) in [("train", train_loss, train_acc), ("dev", dev_loss, dev_acc)] {
            report.records.push(EpochRecord {
                epoch,
                split,
                lt: 0.0,
                lp: 0.0,
                ls: l,
                lcmg: l,
                accuracy: Some(a),
            });
        }
        log::info!("simnet epoch {epoch}: train bce {train_loss:.4} dev bce {dev_loss:.4} dev acc {dev_acc:.4}");
        if stop.observe(epoch, dev_acc, &model.store) {
            break;
        }
    }
    stop.finish(&mut model.store, &mut report);
    Ok((model, report))
}

/// Translator plus frozen constraint networks in one parameter store.
#[derive(Clone, Debug)]
pub struct CmgModel {
    pub store: ParamStore,
    pub translator: Translator,
    pub propnet: PropNet,
    pub simnet: SimNet,
    pub scaler: PropertyScaler,
    pub vocab: Vocabulary,
}

impl CmgModel {
    /// Fresh parameters for all three networks.
    pub fn new(
        translator: TranslatorConfig,
        propnet: ConstraintConfig,
        simnet: ConstraintConfig,
        scaler: PropertyScaler,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if translator.vocab != propnet.vocab || translator.vocab != simnet.vocab {
            return Err(TrainError::VocabMismatch {
                translator: translator.vocab,
                propnet: propnet.vocab,
                simnet: simnet.vocab,
            });
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let translator = Translator::new(&mut store, TRANSLATOR_PREFIX, translator, &mut rng)?;
        let propnet = PropNet::new(&mut store, PROPNET_PREFIX, propnet, &mut rng)?;
        let simnet = SimNet::new(&mut store, SIMNET_PREFIX, simnet, &mut rng)?;
        Ok(CmgModel {
            store,
            translator,
            propnet,
            simnet,
            scaler,
            vocab: Vocabulary::standard(),
        })
    }

    pub fn max_len(&self) -> usize {
        self.translator.config().max_len
    }

    pub fn config_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("model", "cmg");
        self.translator.config().write_kv(&mut kv);
        self.propnet.config().write_kv(PROPNET_PREFIX, &mut kv);
        self.simnet.config().write_kv(SIMNET_PREFIX, &mut kv);
        write_scaler(&self.scaler, &mut kv);
        kv
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        save_model(path, &self.store, &self.config_kv())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let (loaded, kv) = load_model(path, "cmg")?;
        let t = TranslatorConfig::from_kv(&kv)?;
        let p = ConstraintConfig::from_kv(PROPNET_PREFIX, &kv, ConstraintConfig::new(1, 1))?;
        let s = ConstraintConfig::from_kv(SIMNET_PREFIX, &kv, ConstraintConfig::new(1, 1))?;
        let mut m = CmgModel::new(t, p, s, read_scaler(&kv)?, 0)?;
        adopt(&mut m.store, &loaded, path)?;
        Ok(m)
    }

    /// Names of every frozen parameter.
    pub fn frozen_names(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(_, p)| p.name.clone())
            .collect()
    }
}

/// Builds the composite model: copies pre-trained constraint weights in and
/// freezes them. The translator starts fresh from `seed` unless `translator_init`
/// supplies values.
pub fn assemble_cmg(
    translator: TranslatorConfig,
    translator_init: Option<&ParamStore>,
    propnet: &PropNetModel,
    simnet: &SimNetModel,
    seed: u64,
) -> Result<CmgModel, TrainError> {
    let mut model = CmgModel::new(
        translator,
        propnet.net.config().clone(),
        simnet.net.config().clone(),
        propnet.scaler.clone(),
        seed,
    )?;
    if let Some(init) = translator_init {
        model.store.copy_from(init, TRANSLATOR_PREFIX)?;
    }
    model.store.copy_from(&propnet.store, PROPNET_PREFIX)?;
    model.store.copy_from(&simnet.store, SIMNET_PREFIX)?;
    model.store.set_frozen_prefix(PROPNET_PREFIX, true);
    model.store.set_frozen_prefix(SIMNET_PREFIX, true);
    Ok(model)
}

/// Per-sample pieces of the composite loss, before batch normalization.
pub struct SampleTerms<'t> {
    /// Summed token negative log-likelihood.
    pub nll: Var<'t>,
    pub positions: usize,
    /// Squared property distance.
    pub lp: Var<'t>,
    /// `−ln ŝ` with the label fixed to 1.
    pub ls: Var<'t>,
    pub logits: Var<'t>,
}

/// Teacher-forced decoding of `y`; the decoder's softmax rows go through the
/// constraint networks via their embedding tables.
pub fn sample_terms<'t>(
    tape: &'t Tape,
    model: &CmgModel,
    s: &PairSample,
) -> Result<SampleTerms<'t>, TrainError> {
    let store = &model.store;
    let logits = model
        .translator
        .teacher_forced(tape, store, &s.x, &s.px, &s.py, &s.y)?;
    let (nll, positions) = nll_sum(logits, &s.y[1..])?;
    let probs = logits.softmax(1)?;
    let pred = model.propnet.forward_soft(tape, store, probs)?;
    let diff = pred.sub(tape.constant(Tensor::new(vec![1, NUM_PROPERTIES], s.py.to_vec())?))?;
    let lp = diff.mul(diff)?.sum_all()?;
    let fx = model.simnet.features_ids(tape, store, &[body(&s.x)])?;
    let fy = model.simnet.features_soft(tape, store, probs)?;
    let sim = model.simnet.head(tape, store, fx, fy)?;
    let ls = sim
        .clamp(BCE_CLIP, 1.0 - BCE_CLIP)?
        .ln()?
        .sum_all()?
        .scale(-1.0)?;
    Ok(SampleTerms {
        nll,
        positions,
        lp,
        ls,
        logits,
    })
}

/// Batch-level composite loss on one tape.
pub struct CmgLoss<'t> {
    pub total: Var<'t>,
    pub lt: Var<'t>,
    pub lp: Var<'t>,
    pub ls: Var<'t>,
}

impl CmgLoss<'_> {
    pub fn components(&self) -> LossValues {
        LossValues {
            lt: self.lt.value().item(),
            lp: self.lp.value().item(),
            ls: self.ls.value().item(),
            total: self.total.value().item(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub lt: f64,
    pub lp: f64,
    pub ls: f64,
    pub total: f64,
}

/// `ℒ_T + λ_p·ℒ_P + λ_s·ℒ_S`; ℒ_T averages over every target position in
/// the batch, ℒ_P and ℒ_S over samples.
pub fn cmg_loss<'t>(
    tape: &'t Tape,
    model: &CmgModel,
    batch: &[PairSample],
    lambda_p: f64,
    lambda_s: f64,
) -> Result<CmgLoss<'t>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let terms = batch
        .iter()
        .map(|s| sample_terms(tape, model, s))
        .collect::<Result<Vec<_>, _>>()?;
    let positions: usize = terms.iter().map(|t| t.positions).sum();
    let n = batch.len() as f64;
    let sum = |f: &dyn Fn(&SampleTerms<'t>) -> Var<'t>| -> Result<Var<'t>, TensorError> {
        let mut acc = f(&terms[0]);
        for t in &terms[1..] {
            acc = acc.add(f(t))?;
        }
        Ok(acc)
    };
    let lt = sum(&|t| t.nll)?.scale(1.0 / positions as f64)?;
    let lp = sum(&|t| t.lp)?.scale(1.0 / n)?;
    let ls = sum(&|t| t.ls)?.scale(1.0 / n)?;
    let total = lt.add(lp.scale(lambda_p)?)?.add(ls.scale(lambda_s)?)?;
    Ok(CmgLoss { total, lt, lp, ls })
}

/// Sample-level result of one forward/backward pass.
struct SampleOutcome {
    nll: f64,
    positions: usize,
    lp: f64,
    ls: f64,
    hits: usize,
    grads: Vec<(crate::tensor::ParamId, Tensor)>,
}

/// Mini-batch optimizer over a [`CmgModel`]. Each sample gets its own tape;
/// samples run in parallel and their gradients are summed in sample order,
/// so results do not depend on the thread count.
pub struct CmgTrainer {
    pub config: TrainConfig,
    optimizer: Optimizer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub values: LossValues,
    pub hits: usize,
    pub positions: usize,
}

impl CmgTrainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(CmgTrainer {
            optimizer: config.optimizer(),
            config,
        })
    }

    fn run_samples(
        &self,
        model: &CmgModel,
        batch: &[&PairSample],
        weights: Option<(f64, f64)>,
    ) -> Result<Vec<SampleOutcome>, TrainError> {
        let positions: usize = batch.iter().map(|s| s.y.len() - 1).sum();
        let n = batch.len() as f64;
        batch
            .par_iter()
            .map(|s| {
                let tape = Tape::new();
                let t = sample_terms(&tape, model, s)?;
                let (hits, _) = token_hits(&t.logits.value_ref(), &s.y[1..]);
                let mut out = SampleOutcome {
                    nll: t.nll.value().item(),
                    positions: t.positions,
                    lp: t.lp.value().item(),
                    ls: t.ls.value().item(),
                    hits,
                    grads: Vec::new(),
                };
                if let Some((lambda_p, lambda_s)) = weights {
                    let loss = t
                        .nll
                        .scale(1.0 / positions as f64)?
                        .add(t.lp.scale(lambda_p / n)?)?
                        .add(t.ls.scale(lambda_s / n)?)?;
                    out.grads = tape.backward(loss)?.param_grads();
                }
                Ok(out)
            })
            .collect()
    }

    fn summarize(&self, outcomes: &[SampleOutcome]) -> BatchStats {
        let positions: usize = outcomes.iter().map(|o| o.positions).sum();
        let n = outcomes.len() as f64;
        let lt = outcomes.iter().map(|o| o.nll).sum::<f64>() / positions as f64;
        let lp = outcomes.iter().map(|o| o.lp).sum::<f64>() / n;
        let ls = outcomes.iter().map(|o| o.ls).sum::<f64>() / n;
        BatchStats {
            values: LossValues {
                lt,
                lp,
                ls,
                total: lt + self.config.lambda_p * lp + self.config.lambda_s * ls,
            },
            hits: outcomes.iter().map(|o| o.hits).sum(),
            positions,
        }
    }

    /// One optimizer update on `batch`; returns pre-update statistics.
    pub fn step(
        &mut self,
        model: &mut CmgModel,
        batch: &[&PairSample],
    ) -> Result<BatchStats, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let outcomes = self.run_samples(
            model,
            batch,
            Some((self.config.lambda_p, self.config.lambda_s)),
        )?;
        model.store.zero_grad();
        for o in &outcomes {
            model.store.accumulate(&o.grads);
        }
        if let Some(max) = self.config.clip_norm {
            let norm = model.store.grad_norm(false);
            if norm > max {
                model.store.scale_grads(max / norm);
            }
        }
        self.optimizer.step(&mut model.store);
        Ok(self.summarize(&outcomes))
    }

    /// Loss components and token accuracy without updating anything.
    pub fn evaluate(
        &self,
        model: &CmgModel,
        samples: &[PairSample],
    ) -> Result<BatchStats, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let mut outcomes = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let refs: Vec<&PairSample> = chunk.iter().collect();
            outcomes.extend(self.run_samples(model, &refs, None)?);
        }
        Ok(self.summarize(&outcomes))
    }
}

/// Epoch loop with early stopping on dev ℒ_CMG. The best epoch's
/// parameters are restored into `model` on return.
pub fn train_cmg(
    model: &mut CmgModel,
    train: &[PairSample],
    dev: &[PairSample],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    train_cmg_with(model, train, dev, cfg, |_| false)
}

/// [`train_cmg`] with a callback after each epoch; returning true stops training.
pub fn train_cmg_with(
    model: &mut CmgModel,
    train: &[PairSample],
    dev: &[PairSample],
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(&EpochRecord) -> bool,
) -> Result<TrainReport, TrainError> {
    if train.is_empty() || dev.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut trainer = CmgTrainer::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut report = TrainReport::default();
    let mut stop = EarlyStop::new(cfg.patience, false);
    for epoch in 1..=cfg.max_epochs {
        let order = shuffled(train.len(), &mut rng);
        let (mut lt, mut lp, mut ls) = (0.0, 0.0, 0.0);
        let (mut hits, mut positions) = (0, 0);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&PairSample> = idx.iter().map(|&i| &train[i]).collect();
            let st = trainer.step(model, &batch)?;
            lt += st.values.lt * st.positions as f64;
            lp += st.values.lp * batch.len() as f64;
            ls += st.values.ls * batch.len() as f64;
            hits += st.hits;
            positions += st.positions;
        }
        let n = train.len() as f64;
        let (lt, lp, ls) = (lt / positions as f64, lp / n, ls / n);
        let train_rec = EpochRecord {
            epoch,
            split: "train",
            lt,
            lp,
            ls,
            lcmg: lt + cfg.lambda_p * lp + cfg.lambda_s * ls,
            accuracy: Some(hits as f64 / positions as f64),
        };
        let d = trainer.evaluate(model, dev)?;
        let dev_rec = EpochRecord {
            epoch,
            split: "dev",
            lt: d.values.lt,
            lp: d.values.lp,
            ls: d.values.ls,
            lcmg: d.values.total,
            accuracy: Some(d.hits as f64 / d.positions as f64),
        };
        log::info!(
            "cmg epoch {epoch}: train lcmg {:.4} acc {:.4}; dev lcmg {:.4} acc {:.4}",
            train_rec.lcmg,
            train_rec.accuracy.unwrap_or(0.0),
            dev_rec.lcmg,
            dev_rec.accuracy.unwrap_or(0.0)
        );
        let halt = after_epoch(&dev_rec);
        let metric = dev_rec.lcmg;
        report.records.push(train_rec);
        report.records.push(dev_rec);
        if stop.observe(epoch, metric, &model.store) || halt {
            break;
        }
    }
    stop.finish(&mut model.store, &mut report);
    Ok(report)
}

fn write_scaler(s: &PropertyScaler, kv: &mut KeyValues) {
    if let Some((shift, scale)) = s.parts() {
        let join = |a: [f64; 3]| {
            a.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        kv.set("scaler.shift", join(shift));
        kv.set("scaler.scale", join(scale));
    }
}

fn read_scaler(kv: &KeyValues) -> Result<PropertyScaler, TrainError> {
    let parse = |key: &str| -> Result<[f64; 3], ConfigError> {
        let raw = kv
            .get_str(key)
            .ok_or_else(|| ConfigError::Invalid(format!("missing {key}")))?;
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: raw.to_string(),
        };
        let vals: Vec<f64> = raw
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        vals.try_into().map_err(|_| bad())
    };
    Ok(PropertyScaler::from_parts(
        parse("scaler.shift")?,
        parse("scaler.scale")?,
    )?)
}

/// Path of the `key=value` file stored next to a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn save_model(path: &Path, store: &ParamStore, kv: &KeyValues) -> Result<(), TrainError> {
    save_checkpoint(path, store, kv.hash())?;
    let mut f = std::fs::File::create(config_path(path))?;
    f.write_all(kv.render().as_bytes())?;
    Ok(())
}

fn load_model(path: &Path, kind: &str) -> Result<(ParamStore, KeyValues), TrainError> {
    let err = |msg: String| TrainError::Checkpoint {
        path: path.display().to_string(),
        msg,
    };
    let text =
        std::fs::read_to_string(config_path(path)).map_err(|e| err(format!("config: {e}")))?;
    let kv = KeyValues::parse(&text)?;
    if kv.get_str("model") != Some(kind) {
        return Err(err(format!(
            "expected a {kind} model, found {:?}",
            kv.get_str("model")
        )));
    }
    let (store, header) = load_checkpoint(path).map_err(|e| err(e.to_string()))?;
    if header.config_hash != kv.hash() {
        return Err(err("config hash does not match the checkpoint".into()));
    }
    Ok((store, kv))
}

/// Copies every parameter value and frozen flag from `loaded`.
fn adopt(store: &mut ParamStore, loaded: &ParamStore, path: &Path) -> Result<(), TrainError> {
    if loaded.len() != store.len() {
        return Err(TrainError::Checkpoint {
            path: path.display().to_string(),
            msg: format!("{} tensors, expected {}", loaded.len(), store.len()),
        });
    }
    store.copy_from(loaded, "")?;
    let flags: Vec<(String, bool)> = loaded
        .iter()
        .map(|(_, p)| (p.name.clone(), p.frozen))
        .collect();
    for (name, frozen) in flags {
        if let Some(id) = store.id_of(&name) {
            store.get_mut(id).frozen = frozen;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::BEGIN;

    fn tiny_translator() -> TranslatorConfig {
        TranslatorConfig {
            d: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff: 24,
            max_len: 16,
            ..TranslatorConfig::default()
        }
    }

    fn tiny_model() -> CmgModel {
        let v = Vocabulary::standard().len();
        let c = ConstraintConfig::new(6, v);
        let p = PropNetModel::new(c.clone(), PropertyScaler::identity(), 1).unwrap();
        let s = SimNetModel::new(c, 2).unwrap();
        assemble_cmg(tiny_translator(), None, &p, &s, 3).unwrap()
    }

    fn pair(x: &str, y: &str) -> PairSample {
        let v = Vocabulary::standard();
        PairSample {
            x: tokenize_smiles(&v, x, 16).unwrap(),
            y: tokenize_smiles(&v, y, 16).unwrap(),
            px: [0.1, 0.2, -0.3],
            py: [0.5, -0.5, 0.0],
        }
    }

    #[test]
    fn assembly_freezes_constraint_nets() {
        let m = tiny_model();
        for (_, p) in m.store.iter() {
            assert_eq!(
                p.frozen,
                !p.name.starts_with(TRANSLATOR_PREFIX),
                "{}",
                p.name
            );
        }
        let trainable = m.store.trainable_ids();
        assert!(trainable
            .iter()
            .all(|&id| m.store.get(id).name.starts_with(TRANSLATOR_PREFIX)));
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let p =
            PropNetModel::new(ConstraintConfig::new(4, 10), PropertyScaler::identity(), 1).unwrap();
        let s = SimNetModel::new(ConstraintConfig::new(4, 10), 1).unwrap();
        assert!(matches!(
            assemble_cmg(tiny_translator(), None, &p, &s, 0),
            Err(TrainError::VocabMismatch { .. })
        ));
    }

    #[test]
    fn zero_weights_reduce_to_translation_loss() {
        let m = tiny_model();
        let batch = vec![pair("CCO", "CCN"), pair("c1ccccc1", "c1ccccc1O")];
        let tape = Tape::new();
        let l = cmg_loss(&tape, &m, &batch, 0.0, 0.0).unwrap();
        assert_eq!(l.total.value().item(), l.lt.value().item());
        let v = l.components();
        assert!(v.lt >= 0.0 && v.lp >= 0.0 && v.ls >= 0.0);
        let tape = Tape::new();
        let w = cmg_loss(&tape, &m, &batch, 1.0, 1.0).unwrap().components();
        assert!((w.total - (v.lt + v.lp + v.ls)).abs() < 1e-12);
    }

    #[test]
    fn trainer_step_matches_single_tape_gradient() {
        let m = tiny_model();
        let batch = vec![pair("CCO", "CCN"), pair("CC(=O)O", "CC(=O)N")];
        let tape = Tape::new();
        let l = cmg_loss(&tape, &m, &batch, 0.5, 0.5).unwrap();
        let whole = tape.backward(l.total).unwrap().param_grads();
        let trainer = CmgTrainer::new(TrainConfig::default()).unwrap();
        let refs: Vec<&PairSample> = batch.iter().collect();
        let outcomes = trainer.run_samples(&m, &refs, Some((0.5, 0.5))).unwrap();
        let mut store = m.store.clone();
        store.zero_grad();
        for o in &outcomes {
            store.accumulate(&o.grads);
        }
        for (id, g) in whole {
            for (a, b) in g.data().iter().zip(store.get(id).grad.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn constraint_gradients_reach_translator_only_through_updates() {
        let mut m = tiny_model();
        let batch = vec![pair("CCO", "CCN")];
        let tape = Tape::new();
        let l = cmg_loss(&tape, &m, &batch, 1.0, 1.0).unwrap();
        let aux = l.lp.add(l.ls).unwrap();
        let grads = tape.backward(aux).unwrap().param_grads();
        let translator_norm: f64 = grads
            .iter()
            .filter(|(id, _)| m.store.get(*id).name.starts_with(TRANSLATOR_PREFIX))
            .map(|(_, g)| g.sq_norm())
            .sum();
        assert!(translator_norm > 0.0);
        let before: Vec<Tensor> = m.store.snapshot();
        let mut trainer = CmgTrainer::new(TrainConfig::default()).unwrap();
        for _ in 0..3 {
            trainer.step(&mut m, &[&batch[0]]).unwrap();
        }
        for ((_, p), old) in m.store.iter().zip(&before) {
            if p.frozen {
                assert_eq!(&p.value, old);
            }
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let m = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = CmgModel::load(&path).unwrap();
        assert_eq!(back.store.snapshot(), m.store.snapshot());
        assert_eq!(back.frozen_names(), m.frozen_names());
        assert_eq!(back.scaler, m.scaler);
        assert!(PropNetModel::load(&path).is_err());
    }

    #[test]
    fn config_checks() {
        let c = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let kv =
            KeyValues::parse("train.lambda_p=0\ntrain.method=sgd\ntrain.clip_norm=1.5").unwrap();
        let c = TrainConfig::from_kv(&kv, TrainConfig::default()).unwrap();
        assert_eq!(c.lambda_p, 0.0);
        assert_eq!(c.method, Method::Sgd);
        assert_eq!(c.clip_norm, Some(1.5));
    }

    #[test]
    fn pretraining_preconditions() {
        let v = Vocabulary::standard();
        let s = |a: &str, b: &str, label| SimilaritySample {
            a: tokenize_smiles(&v, a, 16).unwrap(),
            b: tokenize_smiles(&v, b, 16).unwrap(),
            label,
        };
        let all_pos = vec![s("CC", "CC", true), s("CO", "CO", true)];
        let cfg = TrainConfig::default();
        let c = ConstraintConfig::new(4, v.len());
        assert!(matches!(
            pretrain_simnet(&all_pos, &all_pos, c.clone(), &cfg),
            Err(TrainError::DegenerateLabels)
        ));
        assert!(matches!(
            pretrain_propnet(&[], &[], c.clone(), PropertyScaler::identity(), &cfg),
            Err(TrainError::EmptyCorpus)
        ));
        let one = vec![PropertySample {
            ids: vec![BEGIN, 5, 2],
            target: [0.0; 3],
        }];
        let zero = TrainConfig {
            max_epochs: 0,
            ..cfg
        };
        assert!(pretrain_propnet(&one, &one, c, PropertyScaler::identity(), &zero).is_err());
    }

    #[test]
    fn constant_targets_are_learned() {
        let v = Vocabulary::standard();
        let mols = [
            "CCO", "CCN", "CCCC", "c1ccccc1", "CC(=O)O", "OCCO", "NCCN", "CCOC",
        ];
        let samples: Vec<PropertySample> = mols
            .iter()
            .map(|m| PropertySample {
                ids: tokenize_smiles(&v, m, 16).unwrap(),
                target: [0.3, -0.2, 0.1],
            })
            .collect();
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 4,
            max_epochs: 60,
            patience: 60,
            ..TrainConfig::default()
        };
        let (model, report) = pretrain_propnet(
            &samples,
            &samples,
            ConstraintConfig::new(8, v.len()),
            PropertyScaler::identity(),
            &cfg,
        )
        .unwrap();
        assert!(
            model.mse(&samples, 8).unwrap() < 1e-3,
            "{}",
            report.best_metric
        );
        let best = report.dev().map(|r| r.lp).fold(f64::INFINITY, f64::min);
        assert_eq!(best, report.best_metric);
    }
}

//! Property and similarity predictors used as frozen regularizers.
//!
//! Both networks read token ids *after* `[BEGIN]` (the body plus `[END]`),
//! which lines up with the rows of teacher-forced decoder output.

use rand::Rng;

use crate::chem::{fingerprint_smiles, tanimoto, ChemError};
use crate::config::{ConfigError, KeyValues};
use crate::nn::{mask_matrix, Dense, LstmCell, NetError};
use crate::properties::NUM_PROPERTIES;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Lower/upper clip applied to probabilities inside the BCE.
pub const BCE_CLIP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstraintConfig {
    /// Embedding and recurrent width.
    pub d: usize,
    pub vocab: usize,
}

impl ConstraintConfig {
    pub fn new(d: usize, vocab: usize) -> Self {
        ConstraintConfig { d, vocab }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d == 0 || self.vocab == 0 {
            return Err(ConfigError::Invalid(
                "constraint width and vocabulary must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn write_kv(&self, prefix: &str, kv: &mut KeyValues) {
        kv.set(&format!("{prefix}d"), self.d);
        kv.set(&format!("{prefix}vocab"), self.vocab);
    }

    pub fn from_kv(
        prefix: &str,
        kv: &KeyValues,
        default: ConstraintConfig,
    ) -> Result<Self, ConfigError> {
        let mut c = default;
        kv.apply(&format!("{prefix}d"), &mut c.d)?;
        kv.apply(&format!("{prefix}vocab"), &mut c.vocab)?;
        c.validate()?;
        Ok(c)
    }
}

/// Forward and backward LSTMs whose final states are concatenated to `2d`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    fwd: LstmCell,
    bwd: LstmCell,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        BiLstm {
            fwd: LstmCell::new(store, &format!("{name}.fwd"), inputs, hidden, rng),
            bwd: LstmCell::new(store, &format!("{name}.bwd"), inputs, hidden, rng),
        }
    }

    /// One embedded sequence `[T, E]` → `[1, 2d]`.
    pub fn encode_rows<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
    ) -> Result<Var<'t>, NetError> {
        let len = x.shape()[0];
        if len == 0 {
            return Err(NetError::EmptySequence);
        }
        let zf = self.fwd.project(tape, store, x)?;
        let zb = self.bwd.project(tape, store, x)?;
        let fsteps = (0..len)
            .map(|t| zf.slice(0, t, 1))
            .collect::<Result<Vec<_>, _>>()?;
        let bsteps = (0..len)
            .rev()
            .map(|t| zb.slice(0, t, 1))
            .collect::<Result<Vec<_>, _>>()?;
        let hf = self.fwd.run_projected(tape, store, &fsteps, None)?;
        let hb = self.bwd.run_projected(tape, store, &bsteps, None)?;
        Ok(tape.concat(&[hf, hb], 1)?)
    }

    /// A batch of id sequences over an embedding `table` → `[B, 2d]`.
    /// Rows may differ in length; shorter rows hold their state once done.
    pub fn encode_ids<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        table: Var<'t>,
        batch: &[&[u32]],
    ) -> Result<Var<'t>, NetError> {
        if batch.is_empty() || batch.iter().any(|s| s.is_empty()) {
            return Err(NetError::EmptySequence);
        }
        let longest = batch.iter().map(|s| s.len()).max().unwrap_or(0);
        let hidden = self.fwd.hidden;
        // Project the whole table once; each step then only gathers rows.
        let tf = self.fwd.project(tape, store, table)?;
        let tb = self.bwd.project(tape, store, table)?;
        let mut fsteps = Vec::with_capacity(longest);
        let mut bsteps = Vec::with_capacity(longest);
        let mut masks = Vec::with_capacity(longest);
        for t in 0..longest {
            let live: Vec<bool> = batch.iter().map(|s| t < s.len()).collect();
            let fids: Vec<u32> = batch
                .iter()
                .map(|s| s.get(t).copied().unwrap_or(0))
                .collect();
            let bids: Vec<u32> = batch
                .iter()
                .map(|s| if t < s.len() { s[s.len() - 1 - t] } else { 0 })
                .collect();
            fsteps.push(tf.embedding(&fids)?);
            bsteps.push(tb.embedding(&bids)?);
            masks.push(mask_matrix(&live, hidden));
        }
        let hf = self.fwd.run_projected(tape, store, &fsteps, Some(&masks))?;
        let hb = self.bwd.run_projected(tape, store, &bsteps, Some(&masks))?;
        Ok(tape.concat(&[hf, hb], 1)?)
    }
}

/// Probability-weighted average of embedding rows: `probs [T, V] · table [V, E]`.
pub fn soft_embed<'t>(probs: Var<'t>, table: Var<'t>) -> Result<Var<'t>, NetError> {
    Ok(probs.matmul(table)?)
}

/// Sequence → normalized property vector.
#[derive(Clone, Debug)]
pub struct PropNet {
    config: ConstraintConfig,
    pub embed: ParamId,
    lstm: BiLstm,
    hidden: Dense,
    out: Dense,
}

impl PropNet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: ConstraintConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, NetError> {
        config.validate()?;
        let d = config.d;
        Ok(PropNet {
            embed: store.register(
                format!("{prefix}embed"),
                Tensor::xavier(config.vocab, d, rng),
            ),
            lstm: BiLstm::new(store, &format!("{prefix}lstm"), d, d, rng),
            hidden: Dense::new(store, &format!("{prefix}hidden"), 2 * d, d, rng),
            out: Dense::new(store, &format!("{prefix}out"), d, NUM_PROPERTIES, rng),
            config,
        })
    }

    pub fn config(&self) -> &ConstraintConfig {
        &self.config
    }

    fn head<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        h: Var<'t>,
    ) -> Result<Var<'t>, NetError> {
        let z = self.hidden.forward(tape, store, h)?.tanh()?;
        Ok(self.out.forward(tape, store, z)?)
    }

    /// `[B, 3]` predictions for a batch of id sequences.
    pub fn forward_ids<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        batch: &[&[u32]],
    ) -> Result<Var<'t>, NetError> {
        let table = tape.param(store, self.embed);
        let h = self.lstm.encode_ids(tape, store, table, batch)?;
        self.head(tape, store, h)
    }

    /// `[1, 3]` prediction for per-position token distributions `[T, V]`.
    pub fn forward_soft<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        probs: Var<'t>,
    ) -> Result<Var<'t>, NetError> {
        let x = soft_embed(probs, tape.param(store, self.embed))?;
        let h = self.lstm.encode_rows(tape, store, x)?;
        self.head(tape, store, h)
    }

    pub fn predict(
        &self,
        store: &ParamStore,
        ids: &[u32],
    ) -> Result<[f64; NUM_PROPERTIES], NetError> {
        let tape = Tape::new();
        let v = self.forward_ids(&tape, store, &[ids])?.value();
        Ok(v.data().try_into().expect("three outputs"))
    }
}

/// Ordered sequence pair → probability that the two are similar.
#[derive(Clone, Debug)]
pub struct SimNet {
    config: ConstraintConfig,
    pub embed: ParamId,
    lstm: BiLstm,
    hidden: Dense,
    out: Dense,
}

impl SimNet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: ConstraintConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, NetError> {
        config.validate()?;
        let d = config.d;
        Ok(SimNet {
            embed: store.register(
                format!("{prefix}embed"),
                Tensor::xavier(config.vocab, d, rng),
            ),
            lstm: BiLstm::new(store, &format!("{prefix}lstm"), d, d, rng),
            hidden: Dense::new(store, &format!("{prefix}hidden"), 4 * d, d, rng),
            out: Dense::new(store, &format!("{prefix}out"), d, 1, rng),
            config,
        })
    }

    pub fn config(&self) -> &ConstraintConfig {
        &self.config
    }

    /// Shared-encoder features `[B, 2d]` for a batch of id sequences.
    pub fn features_ids<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        batch: &[&[u32]],
    ) -> Result<Var<'t>, NetError> {
        let table = tape.param(store, self.embed);
        self.lstm.encode_ids(tape, store, table, batch)
    }

    /// Shared-encoder features `[1, 2d]` for a distribution sequence.
    pub fn features_soft<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        probs: Var<'t>,
    ) -> Result<Var<'t>, NetError> {
        let x = soft_embed(probs, tape.param(store, self.embed))?;
        self.lstm.encode_rows(tape, store, x)
    }

    /// `[B, 1]` probabilities from `(a-features, b-features)`.
    pub fn head<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        fa: Var<'t>,
        fb: Var<'t>,
    ) -> Result<Var<'t>, NetError> {
        let joined = tape.concat(&[fa, fb], 1)?;
        let z = self.hidden.forward(tape, store, joined)?.tanh()?;
        Ok(self.out.forward(tape, store, z)?.sigmoid()?)
    }

    pub fn forward_ids<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        a: &[&[u32]],
        b: &[&[u32]],
    ) -> Result<Var<'t>, NetError> {
        if a.len() != b.len() {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "simnet",
                left: vec![a.len()],
                right: vec![b.len()],
            }
            .into());
        }
        let fa = self.features_ids(tape, store, a)?;
        let fb = self.features_ids(tape, store, b)?;
        self.head(tape, store, fa, fb)
    }

    pub fn predict(&self, store: &ParamStore, a: &[u32], b: &[u32]) -> Result<f64, NetError> {
        let tape = Tape::new();
        Ok(self.forward_ids(&tape, store, &[a], &[b])?.value().item())
    }
}

/// Mean squared Euclidean distance between `[B, 3]` predictions and targets.
pub fn propnet_loss<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>, NetError> {
    let diff = pred.sub(pred.tape().constant(target.clone()))?;
    Ok(diff.mul(diff)?.sum(1)?.mean(0)?)
}

/// Mean binary cross-entropy of `[B, 1]` probabilities against 0/1 labels.
pub fn simnet_loss<'t>(pred: Var<'t>, labels: &[f64]) -> Result<Var<'t>, NetError> {
    let tape = pred.tape();
    let n = labels.len();
    if pred.shape() != [n, 1] {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "simnet_loss",
            left: pred.shape(),
            right: vec![n, 1],
        }
        .into());
    }
    let p = pred.clamp(BCE_CLIP, 1.0 - BCE_CLIP)?;
    let s = tape.constant(Tensor::new(vec![n, 1], labels.to_vec())?);
    let not_s = tape.constant(Tensor::new(
        vec![n, 1],
        labels.iter().map(|v| 1.0 - v).collect(),
    )?);
    let pos = s.mul(p.ln()?)?;
    let neg = not_s.mul(p.affine(-1.0, 1.0)?.ln()?)?;
    Ok(pos.add(neg)?.sum_all()?.scale(-1.0 / n as f64)?)
}

/// 1 when the two molecules' Tanimoto similarity reaches `delta` (inclusive).
pub fn label_similarity(x: &str, y: &str, delta: f64) -> Result<bool, ChemError> {
    let sim = tanimoto(&fingerprint_smiles(x)?, &fingerprint_smiles(y)?)?;
    Ok(sim.value >= delta)
}

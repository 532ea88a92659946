//! Property-conditioned Transformer encoder-decoder over SMILES tokens.

use rand::Rng;

use crate::chem::{Vocabulary, BEGIN, PAD};
use crate::config::{ConfigError, KeyValues};
use crate::nn::{Dense, LayerNorm, NetError};
use crate::properties::NUM_PROPERTIES;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Added to disallowed attention scores before the softmax.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranslatorConfig {
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff: usize,
    pub vocab: usize,
    pub max_len: usize,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            d: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ff: 128,
            vocab: Vocabulary::standard().len(),
            max_len: 64,
        }
    }
}

impl TranslatorConfig {
    pub const KEYS: [&'static str; 7] = [
        "translator.d",
        "translator.heads",
        "translator.enc_layers",
        "translator.dec_layers",
        "translator.ff",
        "translator.vocab",
        "translator.max_len",
    ];

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(ConfigError::Invalid(format!(
                "hidden width {} must be a positive multiple of the head count {}",
                self.d, self.heads
            )));
        }
        if self.max_len < 3 {
            return Err(ConfigError::Invalid(format!(
                "max_len {} is below 3",
                self.max_len
            )));
        }
        if self.vocab <= BEGIN as usize + 1 || self.ff == 0 {
            return Err(ConfigError::Invalid(
                "vocabulary and feed-forward width must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Width of each enriched encoder vector, `d + 2k`.
    pub fn enriched_width(&self) -> usize {
        self.d + 2 * NUM_PROPERTIES
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        let vals = [
            self.d,
            self.heads,
            self.enc_layers,
            self.dec_layers,
            self.ff,
            self.vocab,
            self.max_len,
        ];
        for (k, v) in Self::KEYS.iter().zip(vals) {
            kv.set(k, v);
        }
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self, ConfigError> {
        let mut c = TranslatorConfig::default();
        let slots = [
            &mut c.d,
            &mut c.heads,
            &mut c.enc_layers,
            &mut c.dec_layers,
            &mut c.ff,
            &mut c.vocab,
            &mut c.max_len,
        ];
        for (k, slot) in Self::KEYS.iter().zip(slots) {
            kv.apply(k, slot)?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Scaled dot-product attention with per-head column slices.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    heads: usize,
    d: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_width: usize,
        kv_width: usize,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        MultiHeadAttention {
            q: Dense::new(store, &format!("{name}.q"), query_width, d, rng),
            k: Dense::new(store, &format!("{name}.k"), kv_width, d, rng),
            v: Dense::new(store, &format!("{name}.v"), kv_width, d, rng),
            o: Dense::new(store, &format!("{name}.o"), d, d, rng),
            heads,
            d,
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        queries: Var<'t>,
        keys: Var<'t>,
        causal: bool,
    ) -> Result<Var<'t>, NetError> {
        Ok(self
            .forward_with_weights(tape, store, queries, keys, causal)?
            .0)
    }

    /// Also returns each head's `[n_q, n_k]` attention matrix.
    pub fn forward_with_weights<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        queries: Var<'t>,
        keys: Var<'t>,
        causal: bool,
    ) -> Result<(Var<'t>, Vec<Var<'t>>), NetError> {
        let q = self.q.forward(tape, store, queries)?;
        let k = self.k.forward(tape, store, keys)?;
        let v = self.v.forward(tape, store, keys)?;
        let (nq, nk) = (q.shape()[0], k.shape()[0]);
        let dh = self.d / self.heads;
        let mask = causal.then(|| tape.constant(causal_mask(nq, nk)));
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice(1, h * dh, dh)?;
            let kh = k.slice(1, h * dh, dh)?;
            let vh = v.slice(1, h * dh, dh)?;
            let mut scores = qh
                .matmul(kh.transpose()?)?
                .scale(1.0 / (dh as f64).sqrt())?;
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            let w = scores.softmax(1)?;
            outs.push(w.matmul(vh)?);
            weights.push(w);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        Ok((self.o.forward(tape, store, joined)?, weights))
    }
}

/// `[n_q, n_k]` with `MASK_VALUE` wherever the key lies after the query.
pub fn causal_mask(nq: usize, nk: usize) -> Tensor {
    let mut m = Tensor::zeros(&[nq, nk]);
    for i in 0..nq {
        for j in i + 1..nk {
            m.set(&[i, j], MASK_VALUE);
        }
    }
    m
}

/// Fixed sinusoidal position table `[max_len, d]`.
pub fn sinusoidal_encoding(max_len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[max_len, d]);
    for pos in 0..max_len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            t.set(
                &[pos, i],
                if i % 2 == 0 { angle.sin() } else { angle.cos() },
            );
        }
    }
    t
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Dense,
    down: Dense,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, d: usize, ff: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            up: Dense::new(store, &format!("{name}.up"), d, ff, rng),
            down: Dense::new(store, &format!("{name}.down"), ff, d, rng),
        }
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
    ) -> Result<Var<'t>, NetError> {
        let h = self.up.forward(tape, store, x)?.relu()?;
        Ok(self.down.forward(tape, store, h)?)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

/// Final-layer encoder vectors with `(p_X, p_Y)` appended, `[n, d + 2k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub values: Tensor,
}

impl EncoderOutput {
    pub fn positions(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct Translator {
    config: TranslatorConfig,
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out: Dense,
    positions: Tensor,
}

impl Translator {
    /// Registers every parameter under `prefix` (e.g. `"translator."`).
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: TranslatorConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, NetError> {
        config.validate()?;
        let TranslatorConfig {
            d,
            heads,
            ff,
            vocab,
            ..
        } = config;
        let embed = store.register(format!("{prefix}embed"), Tensor::xavier(vocab, d, rng));
        let encoder = (0..config.enc_layers)
            .map(|l| {
                let n = format!("{prefix}enc{l}");
                EncoderLayer {
                    attn: MultiHeadAttention::new(store, &format!("{n}.attn"), d, d, d, heads, rng),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d),
                    ff: FeedForward::new(store, &format!("{n}.ff"), d, ff, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d),
                }
            })
            .collect();
        let wide = config.enriched_width();
        let decoder = (0..config.dec_layers)
            .map(|l| {
                let n = format!("{prefix}dec{l}");
                DecoderLayer {
                    attn: MultiHeadAttention::new(store, &format!("{n}.attn"), d, d, d, heads, rng),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d),
                    cross: MultiHeadAttention::new(
                        store,
                        &format!("{n}.cross"),
                        d,
                        wide,
                        d,
                        heads,
                        rng,
                    ),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d),
                    ff: FeedForward::new(store, &format!("{n}.ff"), d, ff, rng),
                    norm3: LayerNorm::new(store, &format!("{n}.norm3"), d),
                }
            })
            .collect();
        let out = Dense::new(store, &format!("{prefix}out"), d, vocab, rng);
        Ok(Translator {
            positions: sinusoidal_encoding(config.max_len, d),
            config,
            embed,
            encoder,
            decoder,
            out,
        })
    }

    pub fn config(&self) -> &TranslatorConfig {
        &self.config
    }

    fn check_len(&self, len: usize) -> Result<(), NetError> {
        if len == 0 {
            return Err(NetError::EmptySequence);
        }
        if len > self.config.max_len {
            return Err(NetError::TooLong {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    fn embed<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        ids: &[u32],
    ) -> Result<Var<'t>, NetError> {
        let d = self.config.d;
        let pos = Tensor::new(
            vec![ids.len(), d],
            self.positions.data()[..ids.len() * d].to_vec(),
        )?;
        let e = tape
            .param(store, self.embed)
            .embedding(ids)?
            .scale((d as f64).sqrt())?;
        Ok(e.add(tape.constant(pos))?)
    }

    /// Encoder pass on the tape; `px`/`py` are normalized property vectors.
    pub fn encode_on<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        ids: &[u32],
        px: &[f64; NUM_PROPERTIES],
        py: &[f64; NUM_PROPERTIES],
    ) -> Result<Var<'t>, NetError> {
        self.check_len(ids.len())?;
        let mut x = self.embed(tape, store, ids)?;
        for layer in &self.encoder {
            let a = layer.attn.forward(tape, store, x, x, false)?;
            x = layer.norm1.forward(tape, store, x.add(a)?)?;
            let f = layer.ff.forward(tape, store, x)?;
            x = layer.norm2.forward(tape, store, x.add(f)?)?;
        }
        let props: Vec<f64> = (0..ids.len())
            .flat_map(|_| px.iter().chain(py).copied())
            .collect();
        let props = tape.constant(Tensor::new(vec![ids.len(), 2 * NUM_PROPERTIES], props)?);
        Ok(tape.concat(&[x, props], 1)?)
    }

    /// Decoder logits `[prefix.len(), V]`, one row per prefix position.
    pub fn decode_on<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        enc: Var<'t>,
        prefix: &[u32],
    ) -> Result<Var<'t>, NetError> {
        self.check_len(prefix.len())?;
        if prefix[0] != BEGIN {
            return Err(NetError::BadPrefix);
        }
        let mut x = self.embed(tape, store, prefix)?;
        for layer in &self.decoder {
            let a = layer.attn.forward(tape, store, x, x, true)?;
            x = layer.norm1.forward(tape, store, x.add(a)?)?;
            let c = layer.cross.forward(tape, store, x, enc, false)?;
            x = layer.norm2.forward(tape, store, x.add(c)?)?;
            let f = layer.ff.forward(tape, store, x)?;
            x = layer.norm3.forward(tape, store, x.add(f)?)?;
        }
        Ok(self.out.forward(tape, store, x)?)
    }

    /// Teacher-forced logits for target `y` (`[BEGIN] … [END]`): the decoder
    /// reads `y[..n-1]` and row `j` predicts `y[j+1]`.
    pub fn teacher_forced<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: &[u32],
        px: &[f64; NUM_PROPERTIES],
        py: &[f64; NUM_PROPERTIES],
        y: &[u32],
    ) -> Result<Var<'t>, NetError> {
        if y.len() < 2 {
            return Err(NetError::EmptySequence);
        }
        let enc = self.encode_on(tape, store, x, px, py)?;
        self.decode_on(tape, store, enc, &y[..y.len() - 1])
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        ids: &[u32],
        px: &[f64; NUM_PROPERTIES],
        py: &[f64; NUM_PROPERTIES],
    ) -> Result<EncoderOutput, NetError> {
        let tape = Tape::new();
        let v = self.encode_on(&tape, store, ids, px, py)?;
        Ok(EncoderOutput { values: v.value() })
    }

    /// Next-token logits after `prefix`.
    pub fn decode_step(
        &self,
        store: &ParamStore,
        enc: &EncoderOutput,
        prefix: &[u32],
    ) -> Result<Vec<f64>, NetError> {
        let tape = Tape::new();
        let e = tape.constant(enc.values.clone());
        let logits = self.decode_on(&tape, store, e, prefix)?;
        let last = logits.value_ref();
        Ok(last.row(prefix.len() - 1).to_vec())
    }
}

/// Summed negative log-likelihood of `targets` under `logits`, skipping
/// `[PAD]` targets. Returns the sum and the number of counted positions.
pub fn nll_sum<'t>(logits: Var<'t>, targets: &[u32]) -> Result<(Var<'t>, usize), NetError> {
    let tape = logits.tape();
    let picked = logits.log_softmax(1)?.gather_rows(targets)?;
    let keep: Vec<f64> = targets
        .iter()
        .map(|&t| if t == PAD { 0.0 } else { 1.0 })
        .collect();
    let count = keep.iter().filter(|&&k| k > 0.0).count();
    let total = picked
        .mul(tape.constant(Tensor::vector(keep)))?
        .sum_all()?
        .scale(-1.0)?;
    Ok((total, count))
}

/// Mean cross-entropy over non-pad positions.
pub fn translation_loss<'t>(logits: Var<'t>, targets: &[u32]) -> Result<Var<'t>, NetError> {
    let (total, count) = nll_sum(logits, targets)?;
    if count == 0 {
        return Err(NetError::EmptySequence);
    }
    Ok(total.scale(1.0 / count as f64)?)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `(correct, counted)` argmax predictions against non-pad targets.
pub fn token_hits(logits: &Tensor, targets: &[u32]) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        total += 1;
        if argmax(logits.row(r)) == t as usize {
            hits += 1;
        }
    }
    (hits, total)
}

//! Small layer building blocks over the tape.

use rand::Rng;
use thiserror::Error;

use crate::config::ConfigError;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

/// Failures shared by the network modules.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("decoder prefix must start with the begin token")]
    BadPrefix,
}

/// Affine map `x·W + b` on row vectors.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Dense {
            w: store.register(format!("{name}.w"), Tensor::xavier(inputs, outputs, rng)),
            b: store.register(format!("{name}.b"), Tensor::zeros(&[outputs])),
            inputs,
            outputs,
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
    ) -> Result<Var<'t>, TensorError> {
        x.matmul(tape.param(store, self.w))?
            .add_row(tape.param(store, self.b))
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.register(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
    ) -> Result<Var<'t>, TensorError> {
        x.layer_norm(LAYER_NORM_EPS)?
            .mul_row(tape.param(store, self.gain))?
            .add_row(tape.param(store, self.bias))
    }
}

/// LSTM cell with gates ordered (input, forget, candidate, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        LstmCell {
            w: store.register(format!("{name}.w"), Tensor::xavier(inputs, 4 * hidden, rng)),
            u: store.register(format!("{name}.u"), Tensor::xavier(hidden, 4 * hidden, rng)),
            b: store.register(format!("{name}.b"), Tensor::zeros(&[4 * hidden])),
            hidden,
        }
    }

    /// `x·W + b` for every row of `x`; feed rows of the result to
    /// [`LstmCell::step_projected`].
    pub fn project<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
    ) -> Result<Var<'t>, TensorError> {
        x.matmul(tape.param(store, self.w))?
            .add_row(tape.param(store, self.b))
    }

    /// One step from a projected input `[B, 4·hidden]`; returns the new `(h, c)`.
    pub fn step_projected<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        zx: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), TensorError> {
        let d = self.hidden;
        let z = zx.add(h.matmul(tape.param(store, self.u))?)?;
        let i = z.slice(1, 0, d)?.sigmoid()?;
        let f = z.slice(1, d, d)?.sigmoid()?;
        let g = z.slice(1, 2 * d, d)?.tanh()?;
        let o = z.slice(1, 3 * d, d)?.sigmoid()?;
        let c_new = f.mul(c)?.add(i.mul(g)?)?;
        let h_new = o.mul(c_new.tanh()?)?;
        Ok((h_new, c_new))
    }

    /// One step on a raw `[B, inputs]` batch.
    pub fn step<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), TensorError> {
        let zx = self.project(tape, store, x)?;
        self.step_projected(tape, store, zx, h, c)
    }

    /// Runs over projected steps and returns the last hidden state.
    /// `masks[t]` (1 = real token, `[B, hidden]`) freezes rows that have ended.
    pub fn run_projected<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        steps: &[Var<'t>],
        masks: Option<&[Tensor]>,
    ) -> Result<Var<'t>, TensorError> {
        let batch = steps.first().map(|s| s.shape()[0]).unwrap_or(0);
        let mut h = tape.constant(Tensor::zeros(&[batch, self.hidden]));
        let mut c = tape.constant(Tensor::zeros(&[batch, self.hidden]));
        for (t, zx) in steps.iter().enumerate() {
            let (h_new, c_new) = self.step_projected(tape, store, *zx, h, c)?;
            match masks {
                Some(m) if m[t].data().iter().any(|&v| v != 1.0) => {
                    let keep = tape.constant(m[t].clone());
                    let hold = tape.constant(Tensor::new(
                        m[t].shape().to_vec(),
                        m[t].data().iter().map(|v| 1.0 - v).collect(),
                    )?);
                    h = h_new.mul(keep)?.add(h.mul(hold)?)?;
                    c = c_new.mul(keep)?.add(c.mul(hold)?)?;
                }
                _ => {
                    h = h_new;
                    c = c_new;
                }
            }
        }
        Ok(h)
    }

    /// [`LstmCell::run_projected`] on raw inputs.
    pub fn run<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        steps: &[Var<'t>],
        masks: Option<&[Tensor]>,
    ) -> Result<Var<'t>, TensorError> {
        let projected = steps
            .iter()
            .map(|x| self.project(tape, store, *x))
            .collect::<Result<Vec<_>, _>>()?;
        self.run_projected(tape, store, &projected, masks)
    }
}

/// `[B]` mask column broadcast to `[B, width]`.
pub fn mask_matrix(mask: &[bool], width: usize) -> Tensor {
    let data = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, width))
        .collect();
    Tensor::new(vec![mask.len(), width], data).expect("mask shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dense_shapes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "d", 3, 5, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let y = d.forward(&tape, &store, x).unwrap();
        assert_eq!(y.shape(), vec![2, 5]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_default_affine_is_plain_norm() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4);
        let tape = Tape::new();
        let x = tape.constant(
            Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]).unwrap(),
        );
        let a = ln.forward(&tape, &store, x).unwrap().value();
        let b = x.layer_norm(LAYER_NORM_EPS).unwrap().value();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_lstm_holds_state() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", 2, 3, &mut rng);
        let tape = Tape::new();
        let x1 = tape.constant(Tensor::new(vec![1, 2], vec![0.5, -0.2]).unwrap());
        let x2 = tape.constant(Tensor::new(vec![1, 2], vec![0.9, 0.4]).unwrap());
        let one = cell.run(&tape, &store, &[x1], None).unwrap().value();
        let masked = cell
            .run(
                &tape,
                &store,
                &[x1, x2],
                Some(&[mask_matrix(&[true], 3), mask_matrix(&[false], 3)]),
            )
            .unwrap()
            .value();
        assert_eq!(one, masked);
    }
}

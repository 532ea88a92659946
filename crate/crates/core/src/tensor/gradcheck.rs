//! Central finite-difference checks of tape gradients.

use super::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

/// Denominator floor for relative errors, so gradients that are zero on both
/// sides do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_error = self.max_rel_error.max(relative_error(analytic, numeric));
        self.checked += 1;
    }
}

fn scalar(v: Var<'_>) -> Result<f64, TensorError> {
    let t = v.value();
    if t.len() != 1 {
        return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Compares the gradient of `f` with respect to every entry of every input.
pub fn check_inputs<F, E>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheck, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &leaves)?;
        let grads = tape.backward(loss)?;
        leaves
            .iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    };
    let eval = |values: &[Tensor]| -> Result<f64, E> {
        let tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        Ok(scalar(f(&tape, &leaves)?)?)
    };
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (k, g) in analytic.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let base = inputs[k].data()[i];
            work[k].data_mut()[i] = base + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = base - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = base;
            report.record(g.data()[i], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Same check for selected `(parameter, flat index)` entries of a store.
pub fn check_params<F, E>(
    store: &mut ParamStore,
    entries: &[(ParamId, usize)],
    eps: f64,
    f: F,
) -> Result<GradCheck, E>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let grads: Vec<(ParamId, Tensor)> = {
        let tape = Tape::new();
        let loss = f(&tape, store)?;
        tape.backward(loss)?.param_grads()
    };
    let eval = |store: &ParamStore| -> Result<f64, E> {
        let tape = Tape::new();
        Ok(scalar(f(&tape, store)?)?)
    };
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
    };
    for &(id, i) in entries {
        let analytic = grads
            .iter()
            .find(|(p, _)| *p == id)
            .map_or(0.0, |(_, g)| g.data()[i]);
        let base = store.get(id).value.data()[i];
        store.get_mut(id).value.data_mut()[i] = base + eps;
        let plus = eval(store)?;
        store.get_mut(id).value.data_mut()[i] = base - eps;
        let minus = eval(store)?;
        store.get_mut(id).value.data_mut()[i] = base;
        report.record(analytic, (plus - minus) / (2.0 * eps));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let r =
            check_inputs::<_, TensorError>(&[x], 1e-5, |_, v| v[0].mul(v[0])?.sum_all()).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // clamp has zero gradient outside its range; a finite difference across the
        // boundary disagrees.
        let x = Tensor::vector(vec![1.0]);
        let r = check_inputs::<_, TensorError>(&[x], 1e-3, |_, v| v[0].clamp(-1.0, 1.0)?.sum_all())
            .unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-12);
    }
}

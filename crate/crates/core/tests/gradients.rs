//! Finite-difference checks of every differentiable operation and of the
//! full translation and composite losses.

use cmg_core::constraint::ConstraintConfig;
use cmg_core::tensor::gradcheck::{check_inputs, check_params, GradCheck};
use cmg_core::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use cmg_core::training::{cmg_loss, CmgModel, PairSample};
use cmg_core::translator::{translation_loss, TranslatorConfig};
use cmg_core::{PropertyScaler, PropertyVector, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const POINTS: u64 = 10;

type Op = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Uniform samples kept at least `gap` away from each point in `kinks`.
fn away_from(
    shape: &[usize],
    lo: f64,
    hi: f64,
    kinks: &[f64],
    gap: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts `out` with a fixed random weight tensor so every output entry
/// contributes a distinct coefficient.
fn weighted<'t>(tape: &'t Tape, out: Var<'t>) -> Result<Var<'t>, TensorError> {
    let shape = out.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let w = tape.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
    out.mul(w)?.sum_all()
}

fn assert_op(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, op: Op, tol: f64) {
    for point in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(0xfeed + point);
        let inputs = make(&mut rng);
        let r: GradCheck =
            check_inputs(&inputs, EPS, |tape, v| weighted(tape, op(tape, v)?)).unwrap();
        assert!(r.checked > 0, "{name}: nothing checked");
        assert!(
            r.max_rel_error < tol,
            "{name} point {point}: relative error {:.3e}",
            r.max_rel_error
        );
    }
}

#[test]
fn binary_elementwise() {
    let two = |rng: &mut ChaCha8Rng| {
        vec![
            random(&[3, 4], -2.0, 2.0, rng),
            random(&[3, 4], -2.0, 2.0, rng),
        ]
    };
    assert_op("add", two, |_, v| v[0].add(v[1]), 1e-4);
    assert_op("sub", two, |_, v| v[0].sub(v[1]), 1e-4);
    assert_op("mul", two, |_, v| v[0].mul(v[1]), 1e-4);
}

#[test]
fn matmul_and_transpose() {
    assert_op(
        "matmul",
        |rng| {
            vec![
                random(&[3, 5], -1.0, 1.0, rng),
                random(&[5, 2], -1.0, 1.0, rng),
            ]
        },
        |_, v| v[0].matmul(v[1]),
        1e-4,
    );
    assert_op(
        "transpose",
        |rng| vec![random(&[3, 5], -1.0, 1.0, rng)],
        |_, v| v[0].transpose(),
        1e-4,
    );
}

#[test]
fn row_broadcasts() {
    let make = |rng: &mut ChaCha8Rng| {
        vec![
            random(&[4, 3], -2.0, 2.0, rng),
            random(&[3], -2.0, 2.0, rng),
        ]
    };
    assert_op("add_row", make, |_, v| v[0].add_row(v[1]), 1e-4);
    assert_op("mul_row", make, |_, v| v[0].mul_row(v[1]), 1e-4);
}

#[test]
fn scalar_maps() {
    let one = |rng: &mut ChaCha8Rng| vec![random(&[3, 4], -2.0, 2.0, rng)];
    assert_op("affine", one, |_, v| v[0].affine(1.7, -0.3), 1e-4);
    assert_op("scale", one, |_, v| v[0].scale(-2.5), 1e-4);
    assert_op("sigmoid", one, |_, v| v[0].sigmoid(), 1e-4);
    assert_op("tanh", one, |_, v| v[0].tanh(), 1e-4);
    assert_op(
        "ln",
        |rng| vec![random(&[3, 4], 0.2, 3.0, rng)],
        |_, v| v[0].ln(),
        1e-4,
    );
    assert_op(
        "relu",
        |rng| vec![away_from(&[3, 4], -2.0, 2.0, &[0.0], 1e-3, rng)],
        |_, v| v[0].relu(),
        1e-4,
    );
    assert_op(
        "clamp",
        |rng| vec![away_from(&[3, 4], -2.0, 2.0, &[-1.0, 1.0], 1e-3, rng)],
        |_, v| v[0].clamp(-1.0, 1.0),
        1e-4,
    );
}

#[test]
fn normalizations() {
    let one = |rng: &mut ChaCha8Rng| vec![random(&[3, 5], -2.0, 2.0, rng)];
    assert_op("softmax rows", one, |_, v| v[0].softmax(1), 1e-4);
    assert_op("softmax cols", one, |_, v| v[0].softmax(0), 1e-4);
    assert_op("log_softmax", one, |_, v| v[0].log_softmax(1), 1e-4);
    assert_op("layer_norm", one, |_, v| v[0].layer_norm(1e-5), 1e-4);
}

#[test]
fn reductions() {
    let one = |rng: &mut ChaCha8Rng| vec![random(&[3, 5], -2.0, 2.0, rng)];
    assert_op("sum axis 0", one, |_, v| v[0].sum(0), 1e-4);
    assert_op("sum axis 1", one, |_, v| v[0].sum(1), 1e-4);
    assert_op("mean axis 0", one, |_, v| v[0].mean(0), 1e-4);
    assert_op("mean axis 1", one, |_, v| v[0].mean(1), 1e-4);
    assert_op("sum_all", one, |_, v| v[0].sum_all(), 1e-4);
}

#[test]
fn indexing() {
    assert_op(
        "concat rows",
        |rng| {
            vec![
                random(&[2, 3], -1.0, 1.0, rng),
                random(&[4, 3], -1.0, 1.0, rng),
            ]
        },
        |tape, v| tape.concat(v, 0),
        1e-4,
    );
    assert_op(
        "concat cols",
        |rng| {
            vec![
                random(&[3, 2], -1.0, 1.0, rng),
                random(&[3, 1], -1.0, 1.0, rng),
            ]
        },
        |tape, v| tape.concat(v, 1),
        1e-4,
    );
    let one = |rng: &mut ChaCha8Rng| vec![random(&[5, 4], -1.0, 1.0, rng)];
    assert_op("slice rows", one, |_, v| v[0].slice(0, 1, 3), 1e-4);
    assert_op("slice cols", one, |_, v| v[0].slice(1, 2, 2), 1e-4);
    // Repeated ids accumulate into the same table row.
    assert_op("embedding", one, |_, v| v[0].embedding(&[3, 0, 3, 4]), 1e-4);
    let rows = |rng: &mut ChaCha8Rng| vec![random(&[4, 5], -1.0, 1.0, rng)];
    assert_op(
        "gather_rows",
        rows,
        |_, v| v[0].gather_rows(&[2, 0, 4, 2]),
        1e-4,
    );
}

#[test]
fn composed_attention_block() {
    // softmax(QKᵀ/√d)V with a residual and layer norm, all inputs free.
    assert_op(
        "attention",
        |rng| {
            vec![
                random(&[3, 4], -1.0, 1.0, rng),
                random(&[5, 4], -1.0, 1.0, rng),
                random(&[5, 4], -1.0, 1.0, rng),
            ]
        },
        |_, v| {
            let scores = v[0].matmul(v[1].transpose()?)?.scale(0.5)?;
            let ctx = scores.softmax(1)?.matmul(v[2])?;
            ctx.add(v[0])?.layer_norm(1e-5)
        },
        1e-4,
    );
}

fn tiny_translator(vocab: usize) -> TranslatorConfig {
    TranslatorConfig {
        d: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff: 12,
        vocab,
        max_len: 16,
    }
}

fn tiny_model() -> (CmgModel, Vec<PairSample>) {
    let vocab = Vocabulary::standard();
    let n = vocab.len();
    let scaler = PropertyScaler::identity();
    let model = CmgModel::new(
        tiny_translator(n),
        ConstraintConfig::new(6, n),
        ConstraintConfig::new(6, n),
        scaler.clone(),
        3,
    )
    .unwrap();
    let p = |a, b, c| PropertyVector::new(a, b, c).unwrap();
    let batch = vec![
        PairSample::from_smiles(
            &vocab,
            16,
            &scaler,
            "CCO",
            &p(0.1, 0.4, 0.2),
            "CCN",
            &p(0.3, 0.5, 0.1),
        )
        .unwrap(),
        PairSample::from_smiles(
            &vocab,
            16,
            &scaler,
            "c1ccccc1",
            &p(-0.5, 0.6, 0.3),
            "c1ccncc1",
            &p(-0.2, 0.7, 0.4),
        )
        .unwrap(),
    ];
    (model, batch)
}

/// A few entries from each parameter tensor whose name starts with `prefix`.
fn sampled_entries(
    store: &ParamStore,
    prefix: &str,
    per_tensor: usize,
    seed: u64,
) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .flat_map(|(id, p)| {
            let len = p.value.len();
            (0..per_tensor.min(len))
                .map(|_| (id, rng.random_range(0..len)))
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn translation_loss_gradient() {
    let (mut model, batch) = tiny_model();
    let entries = sampled_entries(&model.store, "translator.", 3, 11);
    assert!(entries.len() > 30);
    let translator = model.translator.clone();
    let r = check_params(&mut model.store, &entries, EPS, |tape, store| {
        let mut total: Option<Var> = None;
        for s in &batch {
            let logits = translator.teacher_forced(tape, store, &s.x, &s.px, &s.py, &s.y)?;
            let l = translation_loss(logits, &s.y[1..])?;
            total = Some(match total {
                Some(t) => t.add(l)?,
                None => l,
            });
        }
        Ok::<_, cmg_core::nn::NetError>(total.expect("non-empty batch").scale(0.5)?)
    })
    .unwrap();
    assert!(
        r.max_rel_error < 1e-4,
        "relative error {:.3e}",
        r.max_rel_error
    );
}

#[test]
fn composite_loss_gradient() {
    let (mut model, batch) = tiny_model();
    let entries = sampled_entries(&model.store, "", 2, 12);
    // Freezing does not change the loss, so frozen constraint weights are
    // checked here as well.
    let snapshot = model.store.snapshot();
    let r = {
        let probe = model.clone();
        check_params(&mut model.store, &entries, EPS, |tape, store| {
            let mut m = probe.clone();
            m.store = store.clone();
            let loss = cmg_loss(tape, &m, &batch, 0.5, 0.5)?;
            Ok::<_, cmg_core::TrainError>(loss.total)
        })
        .unwrap()
    };
    assert_eq!(
        model.store.snapshot(),
        snapshot,
        "parameters restored after the check"
    );
    assert!(
        r.max_rel_error < 1e-3,
        "relative error {:.3e}",
        r.max_rel_error
    );
}

use cmg_core::eval::{
    metric_diversity, metric_improvement, metric_moo_success_rate, validity_rate, EmptyPolicy,
    ScoredInput, ScoredOutput,
};
use cmg_core::{MooCriteria, PropertyVector, TargetSpec};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pv(plogp: f64, qed: f64, drd2: f64) -> PropertyVector {
    PropertyVector::new(plogp, qed, drd2).unwrap()
}

#[test]
fn moo_truth_table() {
    let c = MooCriteria::default();
    let px = pv(0.0, 0.5, 0.1);
    for mask in 0..16u32 {
        let bit = |k: u32| mask & (1 << k) != 0;
        let sim = if bit(0) { 0.4 } else { 0.399 };
        let plogp = if bit(1) { 1.0 } else { 0.999 };
        let qed = if bit(2) { 0.9 } else { 0.899 };
        // The DRD2 bound is strict.
        let drd2 = if bit(3) { 0.501 } else { 0.5 };
        let py = pv(plogp, qed, drd2);
        assert_eq!(c.passes(sim, &px, &py), mask == 15, "mask {mask:04b}");
    }
}

fn output(smiles: &str, tanimoto: f64, p: PropertyVector) -> ScoredOutput {
    ScoredOutput {
        smiles: Some(smiles.into()),
        valid: true,
        tanimoto: Some(tanimoto),
        properties: Some(p),
    }
}

#[test]
fn improvement_by_hand() {
    let results = vec![
        ScoredInput {
            input: "CCO".into(),
            properties: Some(pv(1.0, 0.5, 0.2)),
            outputs: vec![
                output("CCN", 0.5, pv(2.5, 0.6, 0.2)),
                output("CCC", 0.3, pv(9.0, 0.6, 0.2)),
                output("CCCl", 0.45, pv(1.5, 0.6, 0.2)),
            ],
        },
        ScoredInput {
            input: "c1ccccc1".into(),
            properties: Some(pv(0.0, 0.5, 0.2)),
            outputs: vec![output("c1ccncc1", 0.2, pv(5.0, 0.6, 0.2))],
        },
    ];
    // Best similar increments are 1.5 and none.
    let (m, s) = metric_improvement(&results, 0, 0.4, EmptyPolicy::Zero).unwrap();
    assert!((m - 0.75).abs() < 1e-12 && (s - 0.75).abs() < 1e-12);
    let (m, s) = metric_improvement(&results, 0, 0.4, EmptyPolicy::Drop).unwrap();
    assert!((m - 1.5).abs() < 1e-12 && s == 0.0);
    assert_eq!(
        metric_moo_success_rate(&results, &MooCriteria::default()),
        0.0
    );
    assert_eq!(validity_rate(&results), 1.0);
}

#[test]
fn missing_properties_never_succeed() {
    let mut ok = output("CCN", 0.9, pv(5.0, 0.95, 0.9));
    let passing = ScoredInput {
        input: "CCO".into(),
        properties: Some(pv(0.0, 0.5, 0.1)),
        outputs: vec![ok.clone()],
    };
    assert_eq!(
        metric_moo_success_rate(std::slice::from_ref(&passing), &MooCriteria::default()),
        100.0
    );
    ok.properties = None;
    let no_output_props = ScoredInput {
        outputs: vec![ok],
        ..passing.clone()
    };
    let no_input_props = ScoredInput {
        properties: None,
        ..passing.clone()
    };
    let rate = metric_moo_success_rate(
        &[passing, no_output_props, no_input_props],
        &MooCriteria::default(),
    );
    assert!((rate - 100.0 / 3.0).abs() < 1e-9);
}

#[test]
fn target_rules() {
    let t: TargetSpec = "plogp+1,qed=keep,drd2=0.6".parse().unwrap();
    let y = t.apply(&pv(2.0, 0.4, 0.1));
    assert_eq!((y.plogp, y.qed, y.drd2), (3.0, 0.4, 0.6));
    // Omitted properties are kept.
    let y = "drd2-0.5"
        .parse::<TargetSpec>()
        .unwrap()
        .apply(&pv(2.0, 0.4, 0.75));
    assert_eq!((y.plogp, y.qed, y.drd2), (2.0, 0.4, 0.25));
    assert!("plogp+1,plogp=2".parse::<TargetSpec>().is_err());
    assert!("logp+1".parse::<TargetSpec>().is_err());
    assert!("plogp*2,qed=keep,drd2=keep".parse::<TargetSpec>().is_err());
}

const POOL: &[&str] = &[
    "CCO", "CCN", "CCCO", "CCCN", "c1ccccc1", "c1ccncc1", "CC(=O)O", "CCOC", "NCCO", "OCCO",
];

fn scored_input() -> impl Strategy<Value = ScoredInput> {
    let out = (
        0..POOL.len(),
        any::<bool>(),
        0.0f64..1.0,
        -3.0f64..3.0,
        0.0f64..1.0,
        0.0f64..1.0,
    )
        .prop_map(|(i, valid, t, a, b, c)| ScoredOutput {
            smiles: Some(POOL[i].to_string()),
            valid,
            tanimoto: Some(t),
            properties: Some(pv(a, b, c)),
        });
    (
        0..POOL.len(),
        -3.0f64..3.0,
        0.0f64..1.0,
        0.0f64..1.0,
        prop::collection::vec(out, 0..6),
    )
        .prop_map(|(i, a, b, c, outputs)| ScoredInput {
            input: POOL[i].to_string(),
            properties: Some(pv(a, b, c)),
            outputs,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_order(results in prop::collection::vec(scored_input(), 1..8), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = results.clone();
        shuffled.shuffle(&mut rng);
        for r in &mut shuffled {
            r.outputs.shuffle(&mut rng);
        }
        let c = MooCriteria::default();
        for k in 0..3 {
            for policy in [EmptyPolicy::Zero, EmptyPolicy::Drop] {
                let (m1, s1) = metric_improvement(&results, k, 0.4, policy).unwrap();
                let (m2, s2) = metric_improvement(&shuffled, k, 0.4, policy).unwrap();
                prop_assert!((m1 - m2).abs() < 1e-9 && (s1 - s2).abs() < 1e-9);
            }
        }
        prop_assert!((metric_diversity(&results, 0.4) - metric_diversity(&shuffled, 0.4)).abs() < 1e-9);
        prop_assert_eq!(metric_moo_success_rate(&results, &c), metric_moo_success_rate(&shuffled, &c));
        prop_assert_eq!(validity_rate(&results), validity_rate(&shuffled));
    }
}

use cmg_core::constraint::ConstraintConfig;
use cmg_core::decoding::{generate, GenerateConfig};
use cmg_core::pipeline::{mine_pairs, MiningConfig};
use cmg_core::synth::synth_corpus;
use cmg_core::tensor::Tape;
use cmg_core::training::{
    assemble_cmg, cmg_loss, config_path, train_cmg, CmgModel, CmgTrainer, PairSample, PropNetModel,
    SimNetModel,
};
use cmg_core::translator::{nll_sum, TranslatorConfig};
use cmg_core::{MoleculeRecord, PropertyScaler, TrainConfig, Vocabulary};

const MAX_LEN: usize = 48;

fn translator(vocab: usize) -> TranslatorConfig {
    TranslatorConfig {
        d: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff: 24,
        vocab,
        max_len: MAX_LEN,
    }
}

fn samples(n: usize) -> (Vec<PairSample>, PropertyScaler) {
    let corpus: Vec<MoleculeRecord> = synth_corpus(80, 2)
        .unwrap()
        .into_iter()
        .map(|(s, p)| MoleculeRecord::new(s, p).unwrap())
        .collect();
    let scaler = PropertyScaler::fit(corpus.iter().map(|m| &m.properties)).unwrap();
    let (pairs, _) = mine_pairs(&corpus, &MiningConfig::default()).unwrap();
    let vocab = Vocabulary::standard();
    let out = pairs
        .iter()
        .take(n)
        .map(|p| {
            let (x, y) = (&corpus[p.x], &corpus[p.y]);
            PairSample::from_smiles(
                &vocab,
                MAX_LEN,
                &scaler,
                &x.smiles,
                &x.properties,
                &y.smiles,
                &y.properties,
            )
            .unwrap()
        })
        .collect();
    (out, scaler)
}

fn model(scaler: PropertyScaler) -> CmgModel {
    let v = Vocabulary::standard().len();
    let propnet = PropNetModel::new(ConstraintConfig::new(8, v), scaler, 4).unwrap();
    let simnet = SimNetModel::new(ConstraintConfig::new(8, v), 5).unwrap();
    assemble_cmg(translator(v), None, &propnet, &simnet, 6).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_epochs: 2,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn constraint_networks_stay_frozen() {
    let (train, scaler) = samples(12);
    let mut m = model(scaler);
    let frozen: Vec<_> = m
        .store
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(id, p)| (id, p.value.clone()))
        .collect();
    assert!(!frozen.is_empty());
    assert!(m
        .frozen_names()
        .iter()
        .all(|n| n.starts_with("propnet.") || n.starts_with("simnet.")));
    let before_translator = m
        .store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(_, p)| p.value.clone())
        .collect::<Vec<_>>();
    train_cmg(&mut m, &train, &train[..4], &config()).unwrap();
    for (id, v) in &frozen {
        assert_eq!(&m.store.get(*id).value, v, "{}", m.store.get(*id).name);
    }
    let after_translator = m
        .store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(_, p)| p.value.clone())
        .collect::<Vec<_>>();
    assert_ne!(before_translator, after_translator);
}

#[test]
fn zero_weights_reduce_to_translation_loss() {
    let (batch, scaler) = samples(6);
    let m = model(scaler);
    let tape = Tape::new();
    let loss = cmg_loss(&tape, &m, &batch, 0.0, 0.0).unwrap();
    let mut nll = 0.0;
    let mut positions = 0;
    for s in &batch {
        let logits = m
            .translator
            .teacher_forced(&tape, &m.store, &s.x, &s.px, &s.py, &s.y)
            .unwrap();
        let (v, n) = nll_sum(logits, &s.y[1..]).unwrap();
        nll += v.value().item();
        positions += n;
    }
    let total = loss.total.value().item();
    assert!((total - nll / positions as f64).abs() < 1e-12);
    assert!(loss.lp.value().item() > 0.0 && loss.ls.value().item() > 0.0);
}

#[test]
fn updates_do_not_depend_on_thread_count() {
    let (train, scaler) = samples(8);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let mut m = model(scaler.clone());
            let mut trainer = CmgTrainer::new(config()).unwrap();
            let refs: Vec<&PairSample> = train.iter().collect();
            for chunk in refs.chunks(4) {
                trainer.step(&mut m, chunk).unwrap();
            }
            m.store.snapshot()
        })
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn checkpoint_round_trip() {
    let (train, scaler) = samples(8);
    let mut m = model(scaler);
    train_cmg(&mut m, &train, &train[..2], &config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cmg.ckpt");
    m.save(&path).unwrap();
    let loaded = CmgModel::load(&path).unwrap();
    assert_eq!(loaded.store.snapshot(), m.store.snapshot());
    assert_eq!(loaded.frozen_names(), m.frozen_names());
    let corpus = synth_corpus(1, 2).unwrap();
    let (x, px) = &corpus[0];
    let cfg = GenerateConfig {
        beam_width: 3,
        ..GenerateConfig::default()
    };
    let a = generate(&m, x, px, px, &cfg, None).unwrap();
    let b = generate(&loaded, x, px, px, &cfg, None).unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));

    // A settings file that no longer matches the weights is refused.
    let cfg_file = config_path(&path);
    let text = std::fs::read_to_string(&cfg_file)
        .unwrap()
        .replace("d=16", "d=32");
    std::fs::write(&cfg_file, text).unwrap();
    assert!(CmgModel::load(&path).is_err());
}

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use cmg_core::chem::{mix64, parse_molecule_list, Vocabulary};
use cmg_core::config::content_hash;
use cmg_core::constraint::ConstraintConfig;
use cmg_core::decoding::{generation_tsv, DiversifyConfig};
use cmg_core::eval::{parse_generation, parse_triple, score_generation, summarize, EmptyPolicy};
use cmg_core::pipeline::{curate, leakage_audit, pairs_tsv, parse_pairs, PairRow};
use cmg_core::properties::{load_properties, surrogate_properties_smiles, write_properties};
use cmg_core::synth::synth_corpus;
use cmg_core::training::{
    assemble_cmg, pretrain_propnet, pretrain_simnet, tokenize_smiles, train_cmg, PairSample,
    PropertySample, SimilaritySample, PROPNET_PREFIX, SIMNET_PREFIX,
};
use cmg_core::{
    generate, CmgModel, CurateConfig, GenerateConfig, KeyValues, MoleculeRecord, MooCriteria,
    PropNetModel, PropertySource, PropertyVector, SimNetModel, TargetSpec, TrainConfig,
    TranslatorConfig,
};

use crate::args::*;
use crate::CliError;

/// Every key a settings file may contain.
fn known_keys() -> Vec<String> {
    let mut keys: Vec<String> = TranslatorConfig::KEYS
        .iter()
        .chain(&TrainConfig::KEYS)
        .chain(&CurateConfig::KEYS)
        .map(|k| k.to_string())
        .collect();
    for p in [PROPNET_PREFIX, SIMNET_PREFIX] {
        keys.push(format!("{p}d"));
        keys.push(format!("{p}vocab"));
    }
    for k in ["delta", "min_plogp_gain", "min_qed", "min_drd2"] {
        keys.push(format!("moo.{k}"));
    }
    keys
}

fn load_settings(common: &CommonArgs) -> Result<KeyValues, CliError> {
    let Some(path) = &common.config else {
        return Ok(KeyValues::new());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    let kv = KeyValues::parse(&text).map_err(|e| CliError::file(path, e))?;
    let keys = known_keys();
    let refs: Vec<&str> = keys.iter().map(String::as_str).collect();
    kv.check_known(&refs).map_err(|e| CliError::file(path, e))?;
    Ok(kv)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let kv = load_settings(&cli.common)?;
    let seed = cli.common.seed;
    match &cli.command {
        Command::Synth(a) => synth(a, seed),
        Command::Curate(a) => curate_cmd(a, &kv, seed),
        Command::PretrainPropnet(a) => pretrain_propnet_cmd(a, &kv, seed),
        Command::PretrainSimnet(a) => pretrain_simnet_cmd(a, &kv, seed),
        Command::Train(a) => train_cmd(a, &kv, seed),
        Command::Generate(a) => generate_cmd(a, seed),
        Command::Evaluate(a) => evaluate_cmd(a, &kv),
        Command::Report(a) => report_cmd(a),
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::file(path, e))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::file(path, e))
}

fn synth(a: &SynthArgs, seed: u64) -> Result<(), CliError> {
    let mols = synth_corpus(a.n, seed)?;
    let mut out = Vec::new();
    write_properties(&mut out, mols.iter().map(|(s, p)| (s.as_str(), p)))
        .map_err(|e| CliError::file(&a.out, e))?;
    fs::write(&a.out, out).map_err(|e| CliError::file(&a.out, e))?;
    println!("wrote {} molecules to {}", mols.len(), a.out.display());
    Ok(())
}

/// First tab field of each non-comment line, minus a `smiles` header.
fn read_smiles_column(path: &Path) -> Result<Vec<(usize, String)>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::file(path, e))?;
    let rows = parse_molecule_list(BufReader::new(file)).map_err(|e| CliError::file(path, e))?;
    Ok(rows
        .into_iter()
        .map(|(line, text)| {
            (
                line,
                text.split('\t').next().unwrap_or("").trim().to_string(),
            )
        })
        .filter(|(_, s)| !s.eq_ignore_ascii_case("smiles"))
        .collect())
}

fn property_table(path: &Path) -> Result<Vec<(String, PropertyVector)>, CliError> {
    let table = load_properties(path).map_err(|e| CliError::file(path, e))?;
    if table.duplicates > 0 {
        log::warn!(
            "{}: {} duplicate rows overwritten",
            path.display(),
            table.duplicates
        );
    }
    Ok(table
        .order
        .iter()
        .map(|s| (s.clone(), table.values[s]))
        .collect())
}

fn property_source(path: Option<&Path>) -> Result<PropertySource, CliError> {
    match path {
        None => Ok(PropertySource::Surrogate),
        Some(p) => Ok(PropertySource::Table(
            property_table(p)?.into_iter().collect(),
        )),
    }
}

fn curate_cmd(a: &CurateArgs, kv: &KeyValues, seed: u64) -> Result<(), CliError> {
    let cfg = CurateConfig::from_kv(kv, CurateConfig::default())?;
    let rows: Vec<(String, PropertyVector)> = if a.surrogate {
        read_smiles_column(&a.molecules)?
            .into_iter()
            .map(|(line, s)| {
                surrogate_properties_smiles(&s)
                    .map(|p| (s, p))
                    .map_err(|e| CliError::file(&a.molecules, format!("line {line}: {e}")))
            })
            .collect::<Result<_, _>>()?
    } else {
        property_table(&a.molecules)?
    };
    let mut corpus = Vec::with_capacity(rows.len());
    for (s, p) in rows {
        let rec = MoleculeRecord::new(s.clone(), p)
            .map_err(|e| CliError::file(&a.molecules, format!("{s}: {e}")))?;
        corpus.push(rec);
    }
    let mut holdout = HashSet::new();
    for h in &a.holdout {
        holdout.extend(read_smiles_column(h)?.into_iter().map(|(_, s)| s));
    }
    let out = curate(corpus, &holdout, &cfg, seed)?;
    let leaked = leakage_audit(
        out.pairs_train
            .iter()
            .chain(&out.pairs_dev)
            .chain(&out.simnet_train)
            .chain(&out.simnet_dev)
            .map(|r| (r.x.as_str(), r.y.as_str())),
        &holdout,
    );
    if !leaked.is_empty() {
        return Err(CliError::Data(format!(
            "holdout molecules leaked into pairs: {}",
            leaked.join(", ")
        )));
    }
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::file(&a.out_dir, e))?;
    let hash = cfg.hash();
    for (name, rows) in [
        ("pairs_train.tsv", &out.pairs_train),
        ("pairs_dev.tsv", &out.pairs_dev),
        ("simnet_train.tsv", &out.simnet_train),
        ("simnet_dev.tsv", &out.simnet_dev),
    ] {
        write(&a.out_dir.join(name), &pairs_tsv(rows, hash, seed))?;
    }
    for (name, mols) in [
        ("molecules_train.tsv", &out.molecules_train),
        ("molecules_dev.tsv", &out.molecules_dev),
    ] {
        let path = a.out_dir.join(name);
        let mut buf = format!("# config_hash={hash:016x} seed={seed}\n").into_bytes();
        write_properties(
            &mut buf,
            mols.iter().map(|m| (m.smiles.as_str(), &m.properties)),
        )
        .map_err(|e| CliError::file(&path, e))?;
        fs::write(&path, buf).map_err(|e| CliError::file(&path, e))?;
    }
    println!(
        "molecules {} (removed {}), pairs {}/{}, simnet pairs {}/{}, similarity evaluations {}",
        out.corpus.len(),
        out.removed,
        out.pairs_train.len(),
        out.pairs_dev.len(),
        out.simnet_train.len(),
        out.simnet_dev.len(),
        out.stats.evaluated
    );
    Ok(())
}

fn constraint_config(prefix: &str, kv: &KeyValues) -> Result<ConstraintConfig, CliError> {
    Ok(ConstraintConfig::from_kv(
        prefix,
        kv,
        ConstraintConfig::new(32, Vocabulary::standard().len()),
    )?)
}

fn pretrain_defaults(seed: u64, max_epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 32,
        max_epochs,
        patience,
        seed,
        ..TrainConfig::default()
    }
}

fn tokenize_row(
    vocab: &Vocabulary,
    s: &str,
    max_len: usize,
    path: &Path,
) -> Result<Vec<u32>, CliError> {
    tokenize_smiles(vocab, s, max_len).map_err(|e| CliError::file(path, format!("{s}: {e}")))
}

fn pretrain_propnet_cmd(
    a: &PretrainPropnetArgs,
    kv: &KeyValues,
    seed: u64,
) -> Result<(), CliError> {
    let cfg = TrainConfig::from_kv(kv, pretrain_defaults(seed, 30, 10))?;
    let net = constraint_config(PROPNET_PREFIX, kv)?;
    let max_len = TranslatorConfig::from_kv(kv)?.max_len;
    let vocab = Vocabulary::standard();
    let train = property_table(&a.train)?;
    let dev = property_table(&a.dev)?;
    let scaler = cmg_core::PropertyScaler::fit(train.iter().map(|(_, p)| p))
        .map_err(|e| CliError::file(&a.train, e))?;
    let samples =
        |rows: &[(String, PropertyVector)], path: &Path| -> Result<Vec<PropertySample>, CliError> {
            rows.iter()
                .map(|(s, p)| {
                    Ok(PropertySample {
                        ids: tokenize_row(&vocab, s, max_len, path)?,
                        target: scaler.normalize(p)?,
                    })
                })
                .collect()
        };
    let (train_s, dev_s) = (samples(&train, &a.train)?, samples(&dev, &a.dev)?);
    let (model, report) = pretrain_propnet(&train_s, &dev_s, net, scaler.clone(), &cfg)?;
    model.save(&a.out)?;
    if let Some(r) = &a.report {
        write(r, &report.to_tsv())?;
    }
    println!(
        "propnet: epoch {} kept, dev mse {:.6}",
        report.chosen_epoch, report.best_metric
    );
    Ok(())
}

fn labeled_pairs(
    path: &Path,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<SimilaritySample>, CliError> {
    let rows = read_pairs(path)?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let label = r.label.ok_or_else(|| {
                CliError::file(path, format!("row {}: missing label column", i + 1))
            })?;
            Ok(SimilaritySample {
                a: tokenize_row(vocab, &r.x, max_len, path)?,
                b: tokenize_row(vocab, &r.y, max_len, path)?,
                label,
            })
        })
        .collect()
}

fn read_pairs(path: &Path) -> Result<Vec<PairRow>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::file(path, e))?;
    parse_pairs(BufReader::new(file)).map_err(|e| CliError::file(path, e))
}

fn pretrain_simnet_cmd(a: &PretrainSimnetArgs, kv: &KeyValues, seed: u64) -> Result<(), CliError> {
    let cfg = TrainConfig::from_kv(kv, pretrain_defaults(seed, 100, 40))?;
    let net = constraint_config(SIMNET_PREFIX, kv)?;
    let max_len = TranslatorConfig::from_kv(kv)?.max_len;
    let vocab = Vocabulary::standard();
    let train = labeled_pairs(&a.train, &vocab, max_len)?;
    let dev = labeled_pairs(&a.dev, &vocab, max_len)?;
    let (model, report) = pretrain_simnet(&train, &dev, net, &cfg)?;
    model.save(&a.out)?;
    if let Some(r) = &a.report {
        write(r, &report.to_tsv())?;
    }
    println!(
        "simnet: epoch {} kept, dev accuracy {:.4}",
        report.chosen_epoch, report.best_metric
    );
    Ok(())
}

fn pair_samples(
    path: &Path,
    model: &CmgModel,
    limit: Option<usize>,
) -> Result<Vec<PairSample>, CliError> {
    let rows = read_pairs(path)?;
    let take = limit.unwrap_or(rows.len()).min(rows.len());
    rows[..take]
        .iter()
        .map(|r| {
            PairSample::from_smiles(
                &model.vocab,
                model.max_len(),
                &model.scaler,
                &r.x,
                &r.px,
                &r.y,
                &r.py,
            )
            .map_err(|e| CliError::file(path, format!("{} -> {}: {e}", r.x, r.y)))
        })
        .collect()
}

fn train_cmd(a: &TrainArgs, kv: &KeyValues, seed: u64) -> Result<(), CliError> {
    let cfg = TrainConfig::from_kv(
        kv,
        TrainConfig {
            seed,
            ..TrainConfig::default()
        },
    )?;
    let tcfg = TranslatorConfig::from_kv(kv)?;
    let propnet = PropNetModel::load(&a.propnet)?;
    let simnet = SimNetModel::load(&a.simnet)?;
    let mut model = assemble_cmg(tcfg, None, &propnet, &simnet, cfg.seed)?;
    let train = pair_samples(&a.train, &model, a.limit)?;
    let dev = pair_samples(&a.dev, &model, None)?;
    let report = train_cmg(&mut model, &train, &dev, &cfg)?;
    model.save(&a.out)?;
    if let Some(r) = &a.report {
        write(r, &report.to_tsv())?;
    }
    let acc = report
        .dev()
        .find(|r| r.epoch == report.chosen_epoch)
        .and_then(|r| r.accuracy);
    println!(
        "cmg: epoch {} kept, dev loss {:.6}, dev token accuracy {}",
        report.chosen_epoch,
        report.best_metric,
        acc.map_or("NA".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn generate_cmd(a: &GenerateArgs, seed: u64) -> Result<(), CliError> {
    let spec: TargetSpec = a
        .target
        .parse()
        .map_err(|e: cmg_core::EvalError| CliError::Usage(e.to_string()))?;
    let sigma = parse_triple(&a.sigma).map_err(|e| CliError::Usage(format!("--sigma: {e}")))?;
    if a.n == 0 || a.beam == 0 {
        return Err(CliError::Usage("--n and --beam must be positive".into()));
    }
    if !a.model.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            a.model.display()
        )));
    }
    let model = CmgModel::load(&a.model)?;
    let source = property_source(a.properties.as_deref())?;
    let inputs = read_smiles_column(&a.input)?;
    let mut results = Vec::with_capacity(inputs.len());
    for (i, (line, smiles)) in inputs.iter().enumerate() {
        let px = source.lookup(smiles).ok_or_else(|| {
            CliError::file(&a.input, format!("line {line}: no properties for {smiles}"))
        })?;
        let cfg = GenerateConfig {
            beam_width: a.beam,
            diversify: DiversifyConfig {
                sigma,
                n_samples: a.n,
            },
            length_normalize: a.length_normalize,
            seed: mix64(seed ^ i as u64),
        };
        let r = generate(&model, smiles, &px, &spec.apply(&px), &cfg, None)
            .map_err(|e| CliError::file(&a.input, format!("line {line}: {e}")))?;
        results.push(r);
    }
    let text = generation_tsv(&results);
    match &a.out {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, kv: &KeyValues) -> Result<(), CliError> {
    let criteria = MooCriteria::from_kv(kv, MooCriteria::default())?;
    let source = property_source(a.properties.as_deref())?;
    let file = fs::File::open(&a.generation).map_err(|e| CliError::file(&a.generation, e))?;
    let groups =
        parse_generation(BufReader::new(file)).map_err(|e| CliError::file(&a.generation, e))?;
    let scored = score_generation(groups, &source);
    let policy = if a.drop_empty {
        EmptyPolicy::Drop
    } else {
        EmptyPolicy::Zero
    };
    let summary = summarize(&scored, &criteria, policy)?;
    match a.mode {
        EvalMode::Moo => println!("MOO success: {:.2}%", summary.moo_success_rate),
        EvalMode::Soo => {
            let (m, sd) = summary.improvement[0];
            println!("plogp improvement: {m:.2} ± {sd:.2}");
            println!(
                "diversity (pairwise-distance proxy): {:.3}",
                summary.diversity
            );
        }
        EvalMode::All => print!("{}", summary.to_text()),
    }
    if let Some(out) = &a.out {
        write(out, &summary.to_tsv())?;
    }
    Ok(())
}

/// Last and best dev `lcmg` of a training loss table.
fn training_summary(path: &Path) -> Result<(usize, f64, f64), CliError> {
    let text = read(path)?;
    let mut epochs = 0;
    let (mut last, mut best) = (f64::NAN, f64::INFINITY);
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(CliError::file(
                path,
                format!("line {}: expected 6 fields", i + 1),
            ));
        }
        if f[5] != "dev" {
            continue;
        }
        let v: f64 = f[4]
            .parse()
            .map_err(|_| CliError::file(path, format!("line {}: bad loss {:?}", i + 1, f[4])))?;
        epochs += 1;
        last = v;
        best = best.min(v);
    }
    Ok((epochs, last, best))
}

fn report_cmd(a: &ReportArgs) -> Result<(), CliError> {
    let mut tsv = String::from("source\tmetric\tvalue\n");
    let mut text = String::new();
    for path in &a.metrics {
        let body = read(path)?;
        let name = path.file_name().map_or_else(
            || path.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        let _ = writeln!(text, "== {name}");
        for (i, line) in body.lines().enumerate().skip(1) {
            let (metric, value) = line.split_once('\t').ok_or_else(|| {
                CliError::file(path, format!("line {}: expected metric<TAB>value", i + 1))
            })?;
            let _ = writeln!(tsv, "{name}\t{metric}\t{value}");
            let _ = writeln!(text, "  {metric:<24} {value}");
        }
    }
    for path in &a.training {
        let name = path.file_name().map_or_else(
            || path.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        let (epochs, last, best) = training_summary(path)?;
        let _ = writeln!(tsv, "{name}\tdev_epochs\t{epochs}");
        let _ = writeln!(tsv, "{name}\tdev_loss_last\t{last:.6}");
        let _ = writeln!(tsv, "{name}\tdev_loss_best\t{best:.6}");
        let _ = writeln!(
            text,
            "== {name}\n  {epochs} epochs, dev loss last {last:.6}, best {best:.6}"
        );
    }
    text.push_str("\nDiversity is the mean pairwise Tanimoto distance among each input's valid, similar outputs.\n");
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::file(&a.out_dir, e))?;
    write(&a.out_dir.join("report.tsv"), &tsv)?;
    write(&a.out_dir.join("report.txt"), &text)?;
    println!("report hash {:016x}", content_hash(tsv.as_bytes()));
    Ok(())
}

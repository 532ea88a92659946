use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cmg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmg"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("in.txt"), "CCO\n").unwrap();
    let o = cmg(&["generate", "--input", "in.txt"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage:"), "{}", stderr(&o));

    let o = cmg(
        &["generate", "--model", "absent.ckpt", "--input", "in.txt"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("absent.ckpt") && stderr(&o).contains("Usage:"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn bad_target_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    for target in ["plogp*2", "logp+1", "qed=abc"] {
        let o = cmg(
            &[
                "generate", "--model", "m", "--input", "in.txt", "--target", target,
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(2), "{target}: {}", stderr(&o));
    }
    let o = cmg(
        &[
            "generate", "--model", "m", "--input", "in.txt", "--sigma", "0.1,0.2",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

const HEADER: &str =
    "input_smiles\tjitter_index\toutput_smiles\tvalid\ttanimoto\ts_beam\ts_pn\ts_sn";

#[test]
fn moo_with_no_passing_row_prints_zero() {
    let dir = tempfile::tempdir().unwrap();
    let gen = format!(
        "{HEADER}\nCCO\t0\tCCN\t1\t0.333333\t-1.0\t0.5\t0.5\nCCO\t1\tNA\t0\tNA\tNA\tNA\tNA\nc1ccccc1\t0\tc1ccncc1\t1\t0.2\t-2.0\t0.4\t0.3\n"
    );
    fs::write(dir.path().join("gen.tsv"), gen).unwrap();
    let o = cmg(
        &["evaluate", "--generation", "gen.tsv", "--mode", "moo"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "MOO success: 0.00%");
}

#[test]
fn evaluate_is_a_pure_function_of_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let gen = format!(
        "{HEADER}\nCCO\t0\tCCCO\t1\t0.5\t-1.0\t0.5\t0.5\nCCO\t1\tOCCO\t1\t0.45\t-1.5\t0.5\t0.5\n"
    );
    fs::write(dir.path().join("gen.tsv"), gen).unwrap();
    let mut runs = Vec::new();
    for name in ["a.tsv", "b.tsv"] {
        let o = cmg(
            &["evaluate", "--generation", "gen.tsv", "--out", name],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        runs.push((stdout(&o), fs::read(dir.path().join(name)).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn data_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("mols.tsv"),
        "smiles\tplogp\tqed\tdrd2\nCCO\t0.1\t0.5\t0.2\nCCN\t0.1\tx\t0.2\n",
    )
    .unwrap();
    let o = cmg(
        &["curate", "--molecules", "mols.tsv", "--out-dir", "out"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("mols.tsv") && stderr(&o).contains("line 3"),
        "{}",
        stderr(&o)
    );

    fs::write(
        dir.path().join("gen.tsv"),
        format!("{HEADER}\nCCO\t0\tCCN\n"),
    )
    .unwrap();
    let o = cmg(&["evaluate", "--generation", "gen.tsv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn unknown_setting_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "translator.depth = 3\n").unwrap();
    let o = cmg(
        &["--config", "run.cfg", "synth", "--n", "5", "--out", "m.tsv"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("translator.depth"), "{}", stderr(&o));
}

#[test]
fn curation_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "curate.simnet_size = 100\n").unwrap();
    let o = cmg(
        &["--seed", "4", "synth", "--n", "150", "--out", "mols.tsv"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    fs::write(
        dir.path().join("hold.txt"),
        fs::read_to_string(dir.path().join("mols.tsv"))
            .unwrap()
            .lines()
            .nth(1)
            .unwrap(),
    )
    .unwrap();
    let mut outputs = Vec::new();
    for (out, seed) in [("a", "9"), ("b", "9"), ("c", "10")] {
        let o = cmg(
            &[
                "--seed",
                seed,
                "--config",
                "run.cfg",
                "curate",
                "--molecules",
                "mols.tsv",
                "--holdout",
                "hold.txt",
                "--out-dir",
                out,
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("removed 1"), "{}", stdout(&o));
        let files: Vec<Vec<u8>> = [
            "pairs_train.tsv",
            "pairs_dev.tsv",
            "simnet_train.tsv",
            "simnet_dev.tsv",
            "molecules_train.tsv",
        ]
        .iter()
        .map(|f| fs::read(dir.path().join(out).join(f)).unwrap())
        .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_ne!(outputs[0], outputs[2]);
    let head = String::from_utf8(outputs[0][0].clone()).unwrap();
    assert!(head.starts_with("# config_hash="));
}

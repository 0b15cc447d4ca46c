use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nmtlab(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmtlab"))
        .args(args)
        .env("NMTLAB_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

#[test]
fn corpus_bpe_and_scoring_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(nmtlab(
        &["synth", "--out", "data", "--gold-pairs", "60", "--mono-lines", "20", "--parent-pairs", "40"],
        root,
    ));
    let data = root.join("data");
    assert!(data.join("gold.bar").is_file());

    let gold_bar = data.join("gold.bar");
    let gold_de = data.join("gold.de");
    let out = ok(nmtlab(
        &[
            "prepare",
            "--src",
            gold_bar.to_str().unwrap(),
            "--tgt",
            gold_de.to_str().unwrap(),
            "--src-lang",
            "bar",
            "--tgt-lang",
            "de",
            "--out-dir",
            "clean",
            "--k",
            "3",
        ],
        root,
    ));
    assert!(out.contains("fold sizes"), "{out}");
    let clean = root.join("clean");
    for f in ["clean.bar", "clean.de", "filter.json", "split.json"] {
        assert!(clean.join(f).is_file(), "{f} missing");
    }

    let clean_bar = clean.join("clean.bar");
    ok(nmtlab(
        &["bpe", "learn", "--input", clean_bar.to_str().unwrap(), clean.join("clean.de").to_str().unwrap(), "--merges", "50", "--out", "bpe/joint"],
        root,
    ));
    assert!(root.join("bpe/joint.merges").is_file());
    let seg = ok(nmtlab(
        &["bpe", "apply", "--model", root.join("bpe/joint").to_str().unwrap(), "--input", clean_bar.to_str().unwrap()],
        root,
    ));
    assert_eq!(seg.lines().count(), fs::read_to_string(&clean_bar).unwrap().lines().count());

    let bpe = root.join("bpe/joint");
    let bpe = bpe.to_str().unwrap();
    let clean_de = clean.join("clean.de");
    let tiny = ["--d-model", "8", "--heads", "2", "--ffn-dim", "8", "--max-positions", "64", "--steps", "4", "--batch-size", "8"];
    let mut args = vec!["train", "--src", clean_bar.to_str().unwrap(), "--tgt", clean_de.to_str().unwrap(), "--bpe", bpe, "--out", "m/fwd.ckpt"];
    args.extend(tiny);
    let log = ok(nmtlab(&args, root));
    assert!(log.contains("dev loss") || log.is_empty());
    let ckpt = root.join("m/fwd.ckpt");
    assert!(ckpt.is_file());

    let hyp = ok(nmtlab(
        &["translate", "--model", ckpt.to_str().unwrap(), "--bpe", bpe, "--input", clean_bar.to_str().unwrap(), "--max-len", "5"],
        root,
    ));
    assert_eq!(hyp.lines().count(), fs::read_to_string(&clean_bar).unwrap().lines().count());

    let mono = data.join("mono.de");
    ok(nmtlab(
        &[
            "backtranslate", "--model", ckpt.to_str().unwrap(), "--bpe", bpe, "--mono", mono.to_str().unwrap(), "--mono-lang", "de",
            "--source-lang", "bar", "--sample", "5", "--out-dir", "silver", "--max-len", "5",
        ],
        root,
    ));
    assert!(root.join("silver/silver.de").is_file());

    ok(nmtlab(
        &["transfer", "--parent", ckpt.to_str().unwrap(), "--bpe", bpe, "--out", "m/child.ckpt", "--fresh", "output.proj"],
        root,
    ));
    assert!(root.join("m/child.ckpt").is_file());
    assert!(root.join("m/child.ckpt.plan.json").is_file());
    let bad = nmtlab(&["transfer", "--parent", ckpt.to_str().unwrap(), "--bpe", bpe, "--out", "m/c2.ckpt", "--fresh", "no.such"], root);
    assert_eq!(bad.status.code(), Some(2));

    let score = ok(nmtlab(&["score", "--hyp", clean_bar.to_str().unwrap(), "--ref", clean_bar.to_str().unwrap()], root));
    assert!(score.contains("BLEU 100.0") && score.contains("TER 0.0"), "{score}");
}

#[test]
fn sigtest_and_bonferroni() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(nmtlab(&["sigtest", "--bonferroni", "0.0214,0,0"], tmp.path()));
    assert!(out.contains("0.0642\tFalse"), "{out}");
    let out = ok(nmtlab(
        &["sigtest", "--system", "Baseline=1,2,3", "--system", "BT=1,3,4", "--metric", "bleu"],
        tmp.path(),
    ));
    assert!(out.contains("Baseline") && out.contains("-2.0"), "{out}");
}

#[test]
fn exit_codes_separate_validation_from_runtime() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = nmtlab(&["sigtest", "--system", "A=1,2,x", "--system", "B=1,2,3"], tmp.path());
    assert_eq!(bad.status.code(), Some(2));

    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, "name = \"x\"\nk = 1\n").unwrap();
    assert_eq!(nmtlab(&["run", "--config", cfg.to_str().unwrap()], tmp.path()).status.code(), Some(2));

    let missing = tmp.path().join("nope.txt");
    let o = nmtlab(&["score", "--hyp", missing.to_str().unwrap(), "--ref", missing.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.txt"));
}

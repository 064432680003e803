use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn skipnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skipnet"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = skipnet(dir, args);
    assert!(
        out.status.success(),
        "skipnet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn failure(dir: &Path, args: &[&str]) -> String {
    let out = skipnet(dir, args);
    assert!(!out.status.success(), "skipnet {args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

const SMALL: &str = "\
[features]
fft_size = 512

[model]
input_features = 257
width = 8

[train]
epochs = 25
lr0 = 0.05
batch_size = 2

[decoder]
lm_order = 3
";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(dir.path(), &["synth-data", "--out", "data", "--seed", "3", "--num-utterances", "4"]);
    dir
}

#[test]
fn synth_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-data", "--out", "a", "--seed", "7", "--num-utterances", "3"]);
    ok(d, &["synth-data", "--out", "b", "--seed", "7", "--num-utterances", "3"]);
    for name in ["wav/utt0000.wav", "wav/utt0002.wav"] {
        assert_eq!(fs::read(d.join("a").join(name)).unwrap(), fs::read(d.join("b").join(name)).unwrap());
    }
    let manifest = |x: &str| fs::read_to_string(d.join(x).join("manifest.tsv")).unwrap();
    assert_eq!(manifest("a").replace("a/wav", "X"), manifest("b").replace("b/wav", "X"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = setup();
    let d = dir.path();
    let cfg = ["--config", "small.toml"];
    let with = |rest: &[&str]| -> Vec<String> { cfg.iter().chain(rest).map(|s| s.to_string()).collect() };
    let run = |rest: &[&str]| {
        let args = with(rest);
        ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    run(&["featurize", "--manifest", "data/manifest.tsv", "--out", "feats"]);
    assert!(d.join("feats/utt0000.feat").exists());
    assert!(d.join("feats/config.toml").exists());

    run(&["lm-train", "--manifest", "data/manifest.tsv", "--out", "lm"]);
    assert!(fs::read_to_string(d.join("lm/lm.arpa")).unwrap().contains("\\data\\"));

    run(&["train", "--manifest", "feats/manifest.tsv", "--out", "model", "--seed", "1"]);
    run(&["train", "--manifest", "feats/manifest.tsv", "--out", "model2", "--seed", "1"]);
    let strip = |p: &str| -> Vec<String> {
        fs::read_to_string(d.join(p))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    let metrics = strip("model/metrics.csv");
    assert_eq!(metrics[0], "epoch,split,loss,cer,wer,lr");
    assert_eq!(metrics.len(), 26);
    assert_eq!(metrics, strip("model2/metrics.csv"));
    assert!(d.join("model/best.ckpt").exists() && d.join("model/config.toml").exists());

    let decode = |out: &str, extra: &[&str]| {
        let mut rest = vec!["decode", "--checkpoint", "model/best.ckpt", "--manifest", "feats/manifest.tsv", "--out", out];
        rest.extend_from_slice(extra);
        run(&rest);
    };
    decode("greedy", &["--greedy"]);
    decode("beam", &["--lm", "lm/lm.arpa"]);
    decode("beam_again", &["--lm", "lm/lm.arpa"]);
    decode("beam1", &["--set", "decoder.beam_width=1", "--set", "decoder.lm_weight=0", "--set", "decoder.insertion_bonus=0"]);
    let beam = fs::read(d.join("beam/beam.hyp")).unwrap();
    assert_eq!(beam, fs::read(d.join("beam_again/beam.hyp")).unwrap());
    assert_eq!(String::from_utf8(beam).unwrap().lines().count(), 4);
    assert_eq!(
        fs::read_to_string(d.join("greedy/greedy.hyp")).unwrap(),
        fs::read_to_string(d.join("beam1/beam.hyp")).unwrap()
    );

    let summary = ok(d, &["evaluate", "--ref", "data/manifest.tsv", "--hyp", "data/manifest.tsv", "--out", "score"]);
    assert!(summary.lines().nth(1).unwrap().starts_with("4,0,0,"), "{summary}");
    assert!(d.join("score/scores.csv").exists());
}

#[test]
fn all_variants_writes_table() {
    let dir = setup();
    let d = dir.path();
    let out = ok(
        d,
        &[
            "--config",
            "small.toml",
            "--set",
            "paths.train_manifest=data/manifest.tsv",
            "--set",
            "train.epochs=2",
            "evaluate",
            "--all-variants",
            "--out",
            "runs",
        ],
    );
    let table = fs::read_to_string(d.join("runs/table.csv")).unwrap();
    assert_eq!(out.trim_end(), table.trim_end());
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "architecture,wer,cer,greedy_wer,greedy_cer,params,epochs,train_cer");
    let kinds: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(kinds, ["plain", "residual", "highway", "dense"]);
    for k in kinds {
        assert!(d.join("runs").join(k).join("beam.hyp").exists());
        assert!(d.join("runs").join(k).join("greedy.hyp").exists());
    }
    assert!(d.join("runs/lm.arpa").exists());
}

#[test]
fn errors_name_their_cause() {
    let dir = setup();
    let d = dir.path();
    let err = failure(d, &["train", "--manifest", "missing.tsv"]);
    assert!(err.contains("missing.tsv"), "{err}");

    let err = failure(d, &["--set", "model.widht=3", "train", "--manifest", "data/manifest.tsv"]);
    assert!(err.contains("widht"), "{err}");

    let err = failure(d, &["--set", "alphabet=abc", "train", "--manifest", "data/manifest.tsv"]);
    assert!(err.contains("alphabet_size"), "{err}");

    let err = failure(d, &["decode", "--checkpoint", "nothing.ckpt", "--manifest", "data/manifest.tsv"]);
    assert!(err.contains("nothing.ckpt"), "{err}");
}

#[test]
fn lm_alphabet_mismatch_is_rejected_before_decoding() {
    let dir = setup();
    let d = dir.path();
    let cfg = ["--config", "small.toml"];
    let mut train = cfg.to_vec();
    train.extend(["--set", "train.epochs=1", "train", "--manifest", "data/manifest.tsv", "--out", "m"]);
    ok(d, &train);
    fs::write(d.join("other.txt"), "xyz zy\nzz\n").unwrap();
    ok(d, &["lm-train", "--text", "other.txt", "--order", "2", "--out", "badlm"]);
    let mut decode = cfg.to_vec();
    decode.extend(["decode", "--checkpoint", "m/best.ckpt", "--manifest", "data/manifest.tsv", "--lm", "badlm/lm.arpa", "--out", "dec"]);
    let err = failure(d, &decode);
    assert!(err.contains("not in the alphabet"), "{err}");
    assert!(!d.join("dec/beam.hyp").exists());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--out", "g"]);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
    let csv = fs::read_to_string(dir.path().join("g/gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), out.lines().count() + 1);
}

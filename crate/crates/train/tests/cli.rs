use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mqnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mqnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mqnet")
}

fn ok(args: &[&str]) -> String {
    let out = mqnet(args);
    assert!(
        out.status.success(),
        "mqnet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn first_wav(dir: &Path) -> PathBuf {
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "wav"))
        .collect();
    wavs.sort();
    wavs.remove(0)
}

#[test]
fn every_subcommand_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let corpus = root.join("corpus");
    let transcripts = PathBuf::from(ok(&["make-toy-corpus", "--out", s(&corpus), "--count", "6", "--seed", "4"]).trim());
    assert!(transcripts.is_file());
    let wav_dir = corpus.join("wav");

    let feats = root.join("feats");
    let said = ok(&["featurize", "--input", s(&wav_dir), "--out", s(&feats)]);
    assert!(said.starts_with("featurized 6 files"), "{said}");

    let vocab = root.join("vocab.txt");
    ok(&["build-vocab", "--transcripts", s(&transcripts), "--out", s(&vocab)]);
    let lm = root.join("lm.arpa");
    ok(&["train-lm", "--transcripts", s(&transcripts), "--vocab", s(&vocab), "--out", s(&lm)]);
    assert!(lm.is_file());

    let ck = root.join("model.mqck");
    let metrics = root.join("metrics.jsonl");
    ok(&[
        "train", "--transcripts", s(&transcripts), "--data-dir", s(&wav_dir), "--vocab", s(&vocab),
        "--out", s(&ck), "--metrics", s(&metrics), "--epochs", "2", "--batch-size", "3", "--warmup", "1",
        "--lr", "0.01", "--weight-decay", "0.0001", "--reduction", "4",
    ]);
    assert_eq!(std::fs::read_to_string(&metrics).unwrap().lines().count(), 4);

    let wav = first_wav(&wav_dir);
    ok(&["decode", "--checkpoint", s(&ck), "--input", s(&wav), "--greedy"]);
    ok(&[
        "decode", "--checkpoint", s(&ck), "--input", s(&wav), "--lm", s(&lm), "--beam", "200", "--alpha", "1.8",
        "--beta", "3.5",
    ]);

    let report = root.join("report.json");
    ok(&[
        "eval", "--checkpoint", s(&ck), "--transcripts", s(&transcripts), "--data-dir", s(&wav_dir), "--lm",
        s(&lm), "--out", s(&report),
    ]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["utterances"].as_array().unwrap().len(), 6);
    assert!(json["beam_cer"].is_number());

    let counts = ok(&["count-params", "--config", "toy"]);
    assert!(counts.lines().any(|l| l.starts_with("total")));

    let dump = root.join("dump");
    let files = ok(&["dump-weights", "--checkpoint", s(&ck), "--input", s(&wav), "--out", s(&dump)]);
    assert!(files.lines().any(|l| l.ends_with("fusion.csv")), "{files}");
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let out = mqnet(&["count-params", "--config", "/no/such/config.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let out = mqnet(&["decode", "--checkpoint", "/no/such.mqck", "--input", "/no/such.wav"]);
    assert!(!out.status.success());
}

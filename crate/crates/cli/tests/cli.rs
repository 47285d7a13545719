use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moevc::eval::inference_mode;
use moevc::features::{read_feature_file, write_feature_file, F0Stats, FeatureSeq};
use moevc::metrics::{parse_sweep_csv, SWEEP_CSV_HEADER};
use moevc::model::Model;
use moevc::sparse::{frr, sparse_forward, FrrReport, FRR_CSV_HEADER};
use moevc::train::{padded_map, EpochLog, EPOCH_CSV_HEADER};

fn moevc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moevc"))
        .args(args)
        .env_remove("MOEVC_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = moevc(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_conf() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/tiny.conf")
        .display()
        .to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

/// Small corpus plus a tiny model trained on it for two epochs.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let corpus = dir.join("corpus");
    ok(&[
        "gen-corpus",
        "--out",
        s(&corpus),
        "--speakers",
        "2",
        "--utts",
        "10",
        "--frames",
        "64",
    ]);
    let model = dir.join("m.bin");
    ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--config",
        &tiny_conf(),
        "--out-model",
        s(&model),
    ]);
    (corpus, model)
}

fn first_file(corpus: &Path, speaker: &str) -> PathBuf {
    let manifest = std::fs::read_to_string(corpus.join("manifest.tsv")).unwrap();
    let line = manifest.lines().find(|l| l.starts_with(speaker)).unwrap();
    corpus.join(line.split('\t').nth(2).unwrap())
}

#[test]
fn gen_corpus_writes_eighty_files_deterministically() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    let msg = ok(&["gen-corpus", "--out", s(&a)]);
    assert!(msg.contains("80 files"), "{msg}");
    ok(&["gen-corpus", "--out", s(&b)]);
    let files = tree(&a);
    assert_eq!(
        files
            .keys()
            .filter(|p| p.extension().is_some_and(|e| e == "mfcb"))
            .count(),
        80
    );
    assert_eq!(files, tree(&b));
}

#[test]
fn single_speaker_corpus_is_a_usage_or_data_error() {
    let d = tempfile::tempdir().unwrap();
    let out = moevc(&[
        "gen-corpus",
        "--out",
        s(&d.path().join("c")),
        "--speakers",
        "1",
    ]);
    assert!(!out.status.success());
    assert!(matches!(out.status.code(), Some(1 | 2)));
}

#[test]
fn train_logs_one_row_per_epoch_and_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("corpus");
    ok(&[
        "gen-corpus",
        "--out",
        s(&corpus),
        "--speakers",
        "2",
        "--utts",
        "2",
        "--frames",
        "64",
    ]);
    let (m1, m2) = (d.path().join("1.bin"), d.path().join("2.bin"));
    ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--config",
        &tiny_conf(),
        "--out-model",
        s(&m1),
    ]);
    ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--config",
        &tiny_conf(),
        "--out-model",
        s(&m2),
    ]);
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
    let log = std::fs::read_to_string(d.path().join("1.bin.log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some(EPOCH_CSV_HEADER));
    let rows: Vec<EpochLog> = lines.map(|l| EpochLog::from_csv_row(l).unwrap()).collect();
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);

    ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--config",
        &tiny_conf(),
        "--out-model",
        s(&m1),
        "--resume",
    ]);
    assert_ne!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
}

#[test]
fn seed_env_var_overrides_the_config() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("corpus");
    ok(&[
        "gen-corpus",
        "--out",
        s(&corpus),
        "--speakers",
        "2",
        "--utts",
        "2",
        "--frames",
        "64",
    ]);
    let (m1, m2) = (d.path().join("1.bin"), d.path().join("2.bin"));
    ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--config",
        &tiny_conf(),
        "--out-model",
        s(&m1),
    ]);
    let out = Command::new(env!("CARGO_BIN_EXE_moevc"))
        .args([
            "train",
            "--corpus",
            s(&corpus),
            "--config",
            &tiny_conf(),
            "--out-model",
            s(&m2),
        ])
        .env("MOEVC_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_ne!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
}

#[test]
fn dense_and_sparse_conversion_agree() {
    let d = tempfile::tempdir().unwrap();
    let (corpus, model) = trained(d.path());
    let input = first_file(&corpus, "spk0");
    let (a, b) = (d.path().join("a.mfcb"), d.path().join("b.mfcb"));
    let report = ok(&[
        "convert",
        "--model",
        s(&model),
        "--input",
        s(&input),
        "--source-speaker",
        "spk0",
        "--target-speaker",
        "spk1",
        "--out",
        s(&a),
    ]);
    assert!(report.to_lowercase().contains("frr"), "{report}");
    ok(&[
        "convert",
        "--model",
        s(&model),
        "--input",
        s(&input),
        "--source-speaker",
        "spk0",
        "--target-speaker",
        "spk1",
        "--out",
        s(&b),
        "--dense",
    ]);
    let (a, b) = (
        read_feature_file(&a).unwrap(),
        read_feature_file(&b).unwrap(),
    );
    assert_eq!((a.len(), a.dim()), (b.len(), b.dim()));
    let worst = a
        .frames()
        .iter()
        .zip(b.frames())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(worst <= 1e-5, "{worst}");
}

#[test]
fn same_speaker_conversion_is_reconstruction() {
    let d = tempfile::tempdir().unwrap();
    let (corpus, model) = trained(d.path());
    let input = first_file(&corpus, "spk1");
    let out = d.path().join("r.mfcb");
    ok(&[
        "convert",
        "--model",
        s(&model),
        "--input",
        s(&input),
        "--source-speaker",
        "spk1",
        "--target-speaker",
        "spk1",
        "--out",
        s(&out),
    ]);
    let m = Model::<f32>::load(&model).unwrap();
    let seq = read_feature_file(&input).unwrap();
    let r = moevc::eval::convert(
        &m,
        &seq,
        1,
        1,
        &inference_mode(&m),
        moevc::eval::Engine::Sparse,
    )
    .unwrap();
    assert_eq!(read_feature_file(&out).unwrap().frames(), r.seq.frames());
}

#[test]
fn unknown_speaker_lists_the_known_ids() {
    let d = tempfile::tempdir().unwrap();
    let (corpus, model) = trained(d.path());
    let input = first_file(&corpus, "spk0");
    let out = moevc(&[
        "convert",
        "--model",
        s(&model),
        "--input",
        s(&input),
        "--source-speaker",
        "spk0",
        "--target-speaker",
        "nobody",
        "--out",
        s(&d.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        err.contains("nobody") && err.contains("spk0") && err.contains("spk1"),
        "{err}"
    );
}

#[test]
fn f0_stats_drive_the_converted_track() {
    let d = tempfile::tempdir().unwrap();
    let (corpus, model) = trained(d.path());
    let (src_in, tgt_in) = (first_file(&corpus, "spk0"), first_file(&corpus, "spk1"));
    let (src, tgt) = (d.path().join("src.f0"), d.path().join("tgt.f0"));
    ok(&["f0-stats", "--input", s(&src_in), "--out", s(&src)]);
    ok(&["f0-stats", "--input", s(&tgt_in), "--out", s(&tgt)]);
    let out = d.path().join("o.mfcb");
    ok(&[
        "convert",
        "--model",
        s(&model),
        "--input",
        s(&src_in),
        "--source-speaker",
        "spk0",
        "--target-speaker",
        "spk1",
        "--out",
        s(&out),
        "--f0-stats",
        s(&src),
        s(&tgt),
    ]);
    let got = read_feature_file(&out).unwrap();
    let stats = F0Stats::compute([got.f0().unwrap()]).unwrap();
    let want = F0Stats::compute([read_feature_file(&tgt_in).unwrap().f0().unwrap()]).unwrap();
    assert!((stats.log_mean - want.log_mean).abs() < 1e-5);
    assert!((stats.log_std - want.log_std).abs() < 1e-5);
}

#[test]
fn flops_csv_parses_and_matches_the_sparse_ledger() {
    let d = tempfile::tempdir().unwrap();
    let (corpus, model) = trained(d.path());
    let input = first_file(&corpus, "spk0");
    let csv = ok(&[
        "flops",
        "--model",
        s(&model),
        "--input",
        s(&input),
        "--target-speaker",
        "spk1",
        "--csv",
    ]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(FRR_CSV_HEADER));
    let row = lines.next().unwrap();
    let parsed = FrrReport::from_csv_row(row).unwrap();
    assert_eq!(parsed.to_csv_row(), row);

    let m = Model::<f32>::load(&model).unwrap();
    let seq: FeatureSeq = read_feature_file(&input).unwrap();
    let x = padded_map::<f32>(
        &m.stats.as_ref().unwrap().standardize(&seq).unwrap(),
        m.arch.time_factor(),
    );
    let sp = sparse_forward(
        &m,
        &x,
        &m.code(0).unwrap(),
        &m.code(1).unwrap(),
        &inference_mode(&m),
    )
    .unwrap();
    assert_eq!(
        frr(&sp.ledger, &sp.gates, &seq.utterance_id).to_csv_row(),
        row
    );

    let table = ok(&["flops", "--model", s(&model), "--frames", "64"]);
    assert!(
        table.contains("dense baseline") && table.contains("gating overhead"),
        "{table}"
    );
}

#[test]
fn sweep_writes_one_row_per_run() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("corpus");
    ok(&[
        "gen-corpus",
        "--out",
        s(&corpus),
        "--speakers",
        "2",
        "--utts",
        "10",
        "--frames",
        "64",
    ]);
    let out = d.path().join("sweep.csv");
    let summary = ok(&[
        "sweep",
        "--corpus",
        s(&corpus),
        "--config",
        &tiny_conf(),
        "--betas",
        "0,1,10",
        "--seeds",
        "0,1",
        "--out",
        s(&out),
    ]);
    assert!(summary.contains("FRR vs beta"), "{summary}");
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next(), Some(SWEEP_CSV_HEADER));
    let rows = parse_sweep_csv(&text).unwrap();
    assert_eq!(rows.len(), 6);
    for r in rows.iter().filter(|r| r.beta == 0.0) {
        assert!(r.zero_gate_frac < 0.05, "{r:?}");
    }
}

#[test]
fn gradcheck_passes_and_a_tampered_gradient_fails() {
    let out = ok(&["gradcheck"]);
    assert_eq!(
        out.lines().filter(|l| l.contains("PASS")).count(),
        4,
        "{out}"
    );
    assert!(out.contains("worst"));
    let bad = moevc(&["gradcheck", "--tamper"]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8(bad.stdout).unwrap().contains("FAIL"));
}

#[test]
fn exit_codes_follow_the_error_class() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(moevc(&["train"]).status.code(), Some(1));
    assert_eq!(moevc(&["no-such-command"]).status.code(), Some(1));

    let conf = d.path().join("bad.conf");
    std::fs::write(&conf, "optimizer.lr = 0.001\nno.such.key = 3\n").unwrap();
    let out = moevc(&["gradcheck", "--config", s(&conf)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("line 2"));

    let corrupt = d.path().join("bad.mfcb");
    std::fs::write(&corrupt, b"XXXX\x01rest").unwrap();
    let model = d.path().join("bad.bin");
    std::fs::write(&model, b"nope").unwrap();
    let out = moevc(&["flops", "--model", s(&model)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(
        moevc(&[
            "f0-stats",
            "--input",
            s(&corrupt),
            "--out",
            s(&d.path().join("f"))
        ])
        .status
        .code(),
        Some(2)
    );

    let seq = FeatureSeq::new(vec![1.0; 8], 4, 2)
        .unwrap()
        .with_f0(vec![0.0; 4])
        .unwrap();
    let unvoiced = d.path().join("u.mfcb");
    write_feature_file(&seq, &unvoiced).unwrap();
    let out = moevc(&[
        "f0-stats",
        "--input",
        s(&unvoiced),
        "--out",
        s(&d.path().join("g")),
    ]);
    assert!(!out.status.success());
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcnet"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, n: usize, size: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("covers{seed}"));
    ok(mcnet(&[
        "gen-synth",
        "--n",
        &n.to_string(),
        "--size",
        &size.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&out),
    ]));
    out
}

fn embedded(dir: &Path, covers: &Path, name: &str, payload: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["embed", "--cover-dir", s(covers), "--payload", payload, "--seed", "3", "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(mcnet(&args));
    out
}

const SMALL: &str = r#"
profile = "desk"
seed = 5

[model]
input_size = 32
branch_width = 4
head_channels = 32
depth = 3

[denoiser]
epochs = 2
pairs_per_batch = 4

[train]
epochs = 2
pairs_per_batch = 4

[finetune]
epochs = 2
pairs_per_batch = 4
select_from = 1
"#;

#[test]
fn gen_synth_writes_identical_p5_files_per_seed() {
    let t = TempDir::new().unwrap();
    let a = gen(t.path(), 8, 64, 11);
    let b = t.path().join("again");
    ok(mcnet(&["gen-synth", "--n", "8", "--size", "64", "--seed", "11", "--out", s(&b)]));
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 8);
    for n in &names {
        let bytes = fs::read(a.join(n)).unwrap();
        let header: Vec<&[u8]> = bytes[..13].split(|b| b.is_ascii_whitespace()).take(4).collect();
        assert_eq!(header, [&b"P5"[..], b"64", b"64", b"255"]);
        assert_eq!(bytes.len(), 13 + 64 * 64);
        assert_eq!(bytes, fs::read(b.join(n)).unwrap());
    }
}

#[test]
fn zero_images_is_a_usage_error() {
    let t = TempDir::new().unwrap();
    let o = mcnet(&["gen-synth", "--n", "0", "--out", s(t.path())]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&mcnet(&["no-such-command"])), 2);
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let t = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mcnet"))
        .args(["gen-synth", "--n", "1", "--size", "16", "--out", s(t.path())])
        .env("MCNET_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("MCNET_THREADS"));
}

#[test]
fn zero_payload_stegos_are_byte_identical() {
    let t = TempDir::new().unwrap();
    let covers = gen(t.path(), 6, 32, 1);
    let out = embedded(t.path(), &covers, "e0", "0", &[]);
    for e in fs::read_dir(&covers).unwrap() {
        let name = e.unwrap().file_name();
        let stego = out.join("stego").join("covers1").join(&name);
        assert_eq!(fs::read(covers.join(&name)).unwrap(), fs::read(stego).unwrap());
    }
}

#[test]
fn embedding_logs_the_achieved_payload_and_writes_a_manifest() {
    let t = TempDir::new().unwrap();
    let covers = gen(t.path(), 10, 64, 2);
    let out = t.path().join("e");
    let noise = t.path().join("noise");
    let o = ok(mcnet(&[
        "embed",
        "--cover-dir",
        s(&covers),
        "--payload",
        "0.4",
        "--out",
        s(&out),
        "--noise-out",
        s(&noise),
    ]));
    let line = stdout(&o);
    let achieved: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!((achieved - 0.4).abs() <= 1e-6, "{line}");
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert!(manifest.contains("inverse_variance"));
    assert_eq!(manifest.lines().filter(|l| l.contains(".pgm")).count(), 10);
    assert_eq!(fs::read_dir(noise.join("covers2")).unwrap().count(), 10);
}

#[test]
fn unknown_cost_model_lists_the_registered_ones() {
    let t = TempDir::new().unwrap();
    let covers = gen(t.path(), 2, 32, 3);
    let o = mcnet(&["embed", "--cover-dir", s(&covers), "--model", "nope", "--out", s(&t.path().join("x"))]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("nope") && err.contains("inverse_variance"), "{err}");
}

#[test]
fn paper_profile_echoes_its_schedule() {
    let t = TempDir::new().unwrap();
    let o = ok(mcnet(&["train", "--profile", "paper", "--run-dir", s(&t.path().join("r")), "--dry-run"]));
    let out = stdout(&o);
    assert!(out.contains("train: 400 epochs, 20 images per batch (10 pairs)"), "{out}");
    assert!(out.contains("256x256 input"));
    assert!(!t.path().join("r").exists());
}

#[test]
fn config_errors_name_the_line() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochs = \"many\"\n").unwrap();
    let o = mcnet(&["train", "--config", s(&cfg), "--run-dir", s(&t.path().join("r"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_and_empty_grid_fail() {
    let t = TempDir::new().unwrap();
    let o = mcnet(&["eval", "--checkpoint", "nowhere.mcnt", "--manifest", "m.csv"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nowhere.mcnt"));
    let grid = t.path().join("grid.toml");
    fs::write(&grid, "[axes]\n").unwrap();
    let o = mcnet(&["ablate", "--grid", s(&grid), "--out", s(&t.path().join("o.csv"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("empty grid"), "{}", stderr(&o));
}

#[test]
fn train_eval_and_resume_through_a_run_directory() {
    let t = TempDir::new().unwrap();
    let covers = gen(t.path(), 100, 32, 4);
    let data = embedded(t.path(), &covers, "a", "0.5", &["--dn-carve"]);
    let other = embedded(t.path(), &gen(t.path(), 20, 32, 6), "b", "0.5", &[]);
    let cfg = t.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let run = t.path().join("run");
    let manifest = data.join("manifest.csv");
    let base = ["--config", s(&cfg), "--run-dir", s(&run), "--manifest", s(&manifest)];

    ok(mcnet(&[&["train-dn"], &base[..]].concat()));
    ok(mcnet(&[&["train"], &base[..]].concat()));
    for f in [
        "config.toml",
        "manifest.csv",
        "logs/denoiser.csv",
        "logs/metrics.csv",
        "checkpoints/denoiser/best.mcnt",
        "checkpoints/mcnet/last.mcnt",
        "checkpoints/mcnet/best.mcnt",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert!(!run.join(".lock").exists());
    let log = fs::read_to_string(run.join("logs/metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");

    let again = mcnet(&[&["train"], &base[..]].concat());
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--resume"));
    ok(mcnet(&[&["train", "--resume"], &base[..]].concat()));

    let best = run.join("checkpoints/mcnet/best.mcnt");
    let reports = run.join("reports");
    let o = ok(mcnet(&[
        "eval",
        "--checkpoint",
        s(&best),
        "--manifest",
        s(&manifest),
        "--out",
        s(&reports),
    ]));
    assert!(stdout(&o).starts_with("metric,value\npe,"));
    assert!(fs::read_to_string(reports.join("roc.csv")).unwrap().starts_with("fpr,tpr\n"));
    // trained on one corpus, scored on another without retraining
    let o = ok(mcnet(&["eval", "--checkpoint", s(&best), "--manifest", s(&other.join("manifest.csv"))]));
    assert!(stdout(&o).contains("samples,20"), "{}", stdout(&o));

    let ft = t.path().join("ft");
    let low = embedded(t.path(), &covers, "low", "0.2", &[]);
    ok(mcnet(&[
        "finetune",
        "--config",
        s(&cfg),
        "--run-dir",
        s(&ft),
        "--manifest",
        s(&low.join("manifest.csv")),
        "--source",
        s(&best),
    ]));
    let log = fs::read_to_string(ft.join("logs/finetune.csv")).unwrap();
    assert!(log.lines().nth(1).unwrap().starts_with("0,,"), "{log}");

    let other_cfg = t.path().join("other.toml");
    fs::write(&other_cfg, SMALL.replace("seed = 5", "seed = 6")).unwrap();
    let o = mcnet(&["train", "--config", s(&other_cfg), "--run-dir", s(&run), "--manifest", s(&manifest)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("different configuration"));
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let t = TempDir::new().unwrap();
    let covers = gen(t.path(), 60, 32, 7);
    embedded(t.path(), &covers, "data", "0.5", &[]);
    fs::write(t.path().join("small.toml"), SMALL.replace("depth = 3\n", "depth = 3\npreprocessing = \"srm\"\n")).unwrap();
    let grid = t.path().join("grid.toml");
    fs::write(
        &grid,
        "config = \"small.toml\"\nmanifest = \"data/manifest.csv\"\n\n[axes]\n\"model.depth\" = [2, 3]\n",
    )
    .unwrap();
    let out = t.path().join("table.csv");
    ok(mcnet(&["ablate", "--grid", s(&grid), "--out", s(&out)]));
    let table = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    assert!(lines[0].starts_with("model.depth,test_manifest,samples,pe,"));
    assert!(lines[1].starts_with("2,") && lines[2].starts_with("3,"));
}

#[test]
fn verify_passes_and_catches_a_corrupted_checkpoint() {
    let o = ok(mcnet(&["verify"]));
    let out = stdout(&o);
    assert!(out.contains("0 failed"), "{out}");
    assert!(!out.contains("FAIL"));

    let t = TempDir::new().unwrap();
    let covers = gen(t.path(), 100, 32, 8);
    let data = embedded(t.path(), &covers, "a", "0.5", &[]);
    let cfg = t.path().join("small.toml");
    fs::write(&cfg, SMALL.replace("depth = 3\n", "depth = 3\npreprocessing = \"srm\"\n")).unwrap();
    let run = t.path().join("run");
    ok(mcnet(&[
        "train",
        "--config",
        s(&cfg),
        "--run-dir",
        s(&run),
        "--manifest",
        s(&data.join("manifest.csv")),
    ]));
    let ck = run.join("checkpoints/mcnet/last.mcnt");
    ok(mcnet(&["verify", "--only", "roundtrip.config", "--checkpoint", s(&ck)]));
    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(&ck, bytes).unwrap();
    let o = mcnet(&["verify", "--only", "roundtrip.config", "--checkpoint", s(&ck)]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("CRC mismatch"), "{}", stdout(&o));
}

#[test]
fn unknown_check_is_a_usage_error() {
    assert_eq!(code(&mcnet(&["verify", "--only", "nope"])), 2);
}

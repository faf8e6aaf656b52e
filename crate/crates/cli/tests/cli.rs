use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_segmenter");

const SPEC: &str =
    "n_images = 4\nheight = 16\nwidth = 16\nnum_classes = 3\nmax_size = 12\nseed = 5\n";

const MICRO: &str = "depth = 1\ntoken_size = 16\nheads = 2\npatch_size = 8\ncrop_size = 16\nnum_classes = 3\niterations = 4\nbatch_size = 2\neval_every = 0\n";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

/// Temp dir with `spec.txt`, `run.cfg` and a generated dataset under `data/`.
fn workspace(config: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "spec.txt", SPEC);
    write(dir.path(), "run.cfg", config);
    let out = run(
        dir.path(),
        &["gen-data", "--spec", "spec.txt", "--out", "data"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--config",
        "run.cfg",
        "--data",
        "data/manifest.txt",
    ];
    args.extend_from_slice(extra);
    run(dir, &args)
}

#[test]
fn gen_data_writes_pairs_and_manifest() {
    let dir = workspace(MICRO);
    let data = dir.path().join("data");
    for i in 0..4 {
        assert!(data.join(format!("images/{i:04}.ppm")).is_file());
        assert!(data.join(format!("labels/{i:04}.pgm")).is_file());
    }
    let manifest = fs::read_to_string(data.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.contains(".ppm")).count(), 4);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = workspace(MICRO);
    let out = run(
        dir.path(),
        &["gen-data", "--spec", "spec.txt", "--out", "again"],
    );
    assert_eq!(code(&out), 0);
    for sub in ["images/0002.ppm", "labels/0002.pgm", "images/0003.ppm"] {
        let a = fs::read(dir.path().join("data").join(sub)).unwrap();
        let b = fs::read(dir.path().join("again").join(sub)).unwrap();
        assert_eq!(a, b, "{sub}");
    }
}

#[test]
fn gen_data_rejects_too_many_classes() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "spec.txt", "n_images = 2\nnum_classes = 40\n");
    let out = run(
        dir.path(),
        &["gen-data", "--spec", "spec.txt", "--out", "data"],
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn train_writes_loadable_checkpoint() {
    let dir = workspace(MICRO);
    let out = train(dir.path(), &["--out", "m.ckpt"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("iter=4 "), "{text}");
    assert!(dir.path().join("m.ckpt.state").is_file());

    let out = run(
        dir.path(),
        &["eval", "--ckpt", "m.ckpt", "--data", "data/manifest.txt"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let miou_line = stdout(&out)
        .lines()
        .find(|l| l.starts_with("miou\t"))
        .map(str::to_owned);
    let value: f64 = miou_line
        .expect("miou line")
        .split('\t')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&value));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = workspace(MICRO);
    assert_eq!(
        code(&train(dir.path(), &["--out", "a.ckpt", "--seed", "9"])),
        0
    );
    assert_eq!(
        code(&train(dir.path(), &["--out", "b.ckpt", "--seed", "9"])),
        0
    );
    assert_eq!(
        code(&train(dir.path(), &["--out", "c.ckpt", "--seed", "10"])),
        0
    );
    let a = fs::read(dir.path().join("a.ckpt")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.ckpt")).unwrap());
    assert_ne!(a, fs::read(dir.path().join("c.ckpt")).unwrap());
}

#[test]
fn interrupted_and_resumed_run_matches_straight_run() {
    let dir = workspace(MICRO);
    assert_eq!(code(&train(dir.path(), &["--out", "full.ckpt"])), 0);
    let out = train(dir.path(), &["--out", "half.ckpt", "--until", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(!stdout(&out).contains("iter=3 "));
    let out = train(
        dir.path(),
        &["--out", "resumed.ckpt", "--resume", "half.ckpt"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(!stdout(&out).contains("iter=1 "));
    assert_eq!(
        fs::read(dir.path().join("full.ckpt")).unwrap(),
        fs::read(dir.path().join("resumed.ckpt")).unwrap()
    );
}

#[test]
fn diverging_run_exits_with_diagnostic_snapshot() {
    let dir = workspace(&format!("{MICRO}base_lr = 1e30\n"));
    let out = train(dir.path(), &["--out", "m.ckpt"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let all = format!("{}{}", stdout(&out), stderr(&out));
    assert!(all.contains("diagnostic snapshot"), "{all}");
    assert!(dir.path().join("m.nan.ckpt").is_file());
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn eval_rejects_class_count_mismatch() {
    let dir = workspace(MICRO);
    assert_eq!(code(&train(dir.path(), &["--out", "m.ckpt"])), 0);
    write(
        dir.path(),
        "spec5.txt",
        &SPEC.replace("num_classes = 3", "num_classes = 5"),
    );
    assert_eq!(
        code(&run(
            dir.path(),
            &["gen-data", "--spec", "spec5.txt", "--out", "five"]
        )),
        0
    );
    let out = run(
        dir.path(),
        &["eval", "--ckpt", "m.ckpt", "--data", "five/manifest.txt"],
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn infer_output_matches_input_size() {
    let dir = workspace(MICRO);
    assert_eq!(code(&train(dir.path(), &["--out", "m.ckpt"])), 0);
    write(
        dir.path(),
        "big.txt",
        &SPEC
            .replace("height = 16", "height = 27")
            .replace("width = 16", "width = 21"),
    );
    assert_eq!(
        code(&run(
            dir.path(),
            &["gen-data", "--spec", "big.txt", "--out", "big"]
        )),
        0
    );
    let out = run(
        dir.path(),
        &[
            "infer",
            "--ckpt",
            "m.ckpt",
            "--image",
            "big/images/0000.ppm",
            "--out",
            "pred.pgm",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let pgm = fs::read(dir.path().join("pred.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
    let header: Vec<&[u8]> = pgm.split(|b| b.is_ascii_whitespace()).take(3).collect();
    assert_eq!(header[1], b"21");
    assert_eq!(header[2], b"27");
    let body = &pgm[pgm.len() - 21 * 27..];
    assert!(body.iter().all(|&c| c < 3));
}

#[test]
fn analyze_reports_attention_and_class_embeddings() {
    let dir = workspace(MICRO);
    assert_eq!(code(&train(dir.path(), &["--out", "m.ckpt"])), 0);
    let out = run(
        dir.path(),
        &[
            "analyze",
            "--ckpt",
            "m.ckpt",
            "attention",
            "--data",
            "data/manifest.txt",
            "--limit",
            "2",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows: Vec<String> = stdout(&out)
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("layer"))
        .map(str::to_owned)
        .collect();
    assert_eq!(rows.len(), 2, "one row per head");

    let out = run(dir.path(), &["analyze", "--ckpt", "m.ckpt", "classemb"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = stdout(&out)
        .lines()
        .filter(|l| l.split('\t').count() == 4)
        .count();
    assert_eq!(rows, 4, "header plus one row per class");
}

#[test]
fn classemb_needs_mask_decoder() {
    let dir = workspace(&format!("{MICRO}decoder = linear\n"));
    assert_eq!(code(&train(dir.path(), &["--out", "m.ckpt"])), 0);
    let out = run(dir.path(), &["analyze", "--ckpt", "m.ckpt", "classemb"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn bench_from_config() {
    let dir = workspace(MICRO);
    let out = run(
        dir.path(),
        &[
            "bench",
            "--config",
            "run.cfg",
            "--resolution",
            "32x24",
            "--repeat",
            "2",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let row = text
        .lines()
        .find(|l| l.starts_with("reference\t"))
        .expect("reference row");
    let cols: Vec<&str> = row.split('\t').collect();
    assert_eq!(cols[2], "32x24");
    assert!(cols[4].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn checkpoint_inspect_lists_parameters() {
    let dir = workspace(MICRO);
    assert_eq!(code(&train(dir.path(), &["--out", "m.ckpt"])), 0);
    let out = run(dir.path(), &["checkpoint-inspect", "--ckpt", "m.ckpt"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    for name in [
        "encoder.patch_embed.weight",
        "encoder.pos_embed",
        "decoder.cls_emb",
    ] {
        assert!(
            text.lines().any(|l| l.starts_with(&format!("{name}\t"))),
            "{name} missing:\n{text}"
        );
    }
    assert!(text.contains("iteration = 4"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&run(dir.path(), &["train", "--bogus"])), 1);
    assert_eq!(code(&run(dir.path(), &["bench", "--resolution", "32"])), 1);
    assert_eq!(
        code(&run(
            dir.path(),
            &["bench", "--config", "x", "--resolution", "3x"]
        )),
        1
    );
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
}

#[test]
fn missing_input_is_an_io_failure() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["checkpoint-inspect", "--ckpt", "nope.ckpt"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

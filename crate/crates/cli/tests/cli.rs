use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_deocc");

const SMALL_CONFIG: &str = "\
# tiny settings so the whole workflow runs in seconds
resolution = 32
arch.gen_channels = 4, 8
arch.disc_channels = 4, 4
train.batch_size = 2
train.stage1_epochs = 1
train.stage2_epochs = 1
train.checkpoint_interval = 1
dataset.train_count = 4
dataset.test_count = 4
";

fn deocc(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("DEOCC_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = deocc(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SUBCOMMANDS: [&str; 9] = [
    "gen-model",
    "fit",
    "render",
    "build-dataset",
    "train",
    "deocclude",
    "refine",
    "evaluate",
    "edit",
];

#[test]
fn help_on_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let top = ok(dir.path(), &["--help"]);
    let text = String::from_utf8_lossy(&top.stdout);
    for sub in SUBCOMMANDS {
        assert!(text.contains(sub), "top-level help lacks {sub}");
        let out = ok(dir.path(), &[sub, "--help"]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["fit", "--bogus"],
        &["fit"],
        &["deocclude", "--checkpoint", "c", "--image", "i", "--out", "o"],
        &["deocclude", "--checkpoint", "c", "--image", "i", "--out", "o", "--fit", "f", "--landmarks", "l"],
    ] {
        let out = deocc(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn missing_landmarks_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = deocc(dir.path(), &["fit", "--landmarks", "nowhere/lm.txt", "--out", "fit.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/lm.txt"));
    assert!(!dir.path().join("fit.txt").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "resolution = 32\ntrain.speed = 11\n").unwrap();
    let out = deocc(dir.path(), &["--config", "bad.cfg", "gen-model", "--out", "m.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.speed"));

    // Same through the environment variable.
    let out = Command::new(BIN)
        .args(["gen-model", "--out", "m.txt"])
        .current_dir(dir.path())
        .env("DEOCC_CONFIG", "bad.cfg")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = deocc(dir.path(), &["--set", "nope=1", "gen-model", "--out", "m.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("m.txt").exists());
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.cfg"), "model.seed = 5\n").unwrap();
    ok(dir.path(), &["--config", "a.cfg", "gen-model", "--out", "a.txt"]);
    ok(dir.path(), &["--config", "a.cfg", "--set", "model.seed=6", "gen-model", "--out", "b.txt"]);
    ok(dir.path(), &["--config", "a.cfg", "--set", "model.seed=6", "gen-model", "--out", "c.txt", "--seed", "5"]);
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_ne!(read("a.txt"), read("b.txt"));
    assert_eq!(read("a.txt"), read("c.txt"));
}

fn first_test_stem(dataset: &Path) -> String {
    let mut names: Vec<String> = fs::read_dir(dataset.join("test"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with("_occluded.png"))
        .collect();
    names.sort();
    format!("dataset/test/{}", names[0].trim_end_matches("_occluded.png"))
}

/// Runs every subcommand once inside `dir`.
fn workflow(dir: &Path) {
    fs::write(dir.join("small.cfg"), SMALL_CONFIG).unwrap();
    let c = ["--config", "small.cfg"];
    let run = |args: &[&str]| ok(dir, &[&c[..], args].concat());

    run(&["gen-model", "--out", "model.txt", "--sprites-out", "sprites"]);
    let m = ["--set", "model_path=model.txt", "--set", "sprites_dir=sprites"];
    let run = |args: &[&str]| ok(dir, &[&c[..], &m[..], args].concat());

    run(&["build-dataset", "--out", "dataset", "--eval-classes"]);
    let stem = first_test_stem(&dir.join("dataset"));
    let (occluded, landmarks) = (format!("{stem}_occluded.png"), format!("{stem}_landmarks.txt"));

    run(&["fit", "--image", &occluded, "--landmarks", &landmarks, "--out", "out/fit.txt"]);
    run(&["render", "--fit", "out/fit.txt", "--out", "out/render.png", "--mask-out", "out/mask.png"]);
    run(&["train", "--dataset", "dataset", "--out", "run"]);
    run(&["train", "--dataset", "dataset", "--out", "resumed", "--resume", "run/checkpoint_epoch_0001.ckpt"]);
    run(&["deocclude", "--checkpoint", "run/model.ckpt", "--image", &occluded, "--landmarks", &landmarks, "--out", "out/deocc_lm.png"]);
    run(&["deocclude", "--checkpoint", "run/model.ckpt", "--image", &occluded, "--fit", "out/fit.txt", "--out", "out/deocc.png", "--synthesis-out", "out/synthesis.png", "--fit-out", "out/fit2.txt"]);
    run(&["refine", "--image", "out/deocc.png", "--fit", "out/fit.txt", "--out", "out/refine"]);
    run(&["evaluate", "--dataset", "dataset", "--checkpoint", "run/model.ckpt", "--out", "out/report.tsv"]);

    let fit_text = fs::read_to_string(dir.join("out/fit.txt")).unwrap();
    let beta_line = fit_text.lines().find(|l| l.starts_with("beta:")).unwrap();
    let beta: Vec<&str> = beta_line["beta:".len()..].split_whitespace().collect();
    run(&["edit", "--checkpoint", "run/model.ckpt", "--image", &occluded, "--fit", "out/fit.txt", &format!("--beta={}", beta.join(",")), "--out", "out/edit_noop.png"]);
    let mut changed: Vec<String> = beta.iter().map(|s| s.to_string()).collect();
    changed[0] = "-0.05".into();
    run(&["edit", "--checkpoint", "run/model.ckpt", "--image", &occluded, "--fit", "out/fit.txt", &format!("--beta={}", changed.join(",")), "--out", "out/edit.png", "--synthesis-out", "out/edit_synthesis.png"]);
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn full_workflow_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    workflow(a.path());
    workflow(b.path());

    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{} differs between runs", k.display());
    }

    let get = |n: &str| &sa[Path::new(n)];
    // The no-op edit reproduces plain de-occlusion; a changed expression
    // changes the synthesis.
    assert_eq!(get("out/edit_noop.png"), get("out/deocc.png"));
    assert_ne!(get("out/edit_synthesis.png"), get("out/synthesis.png"));
    assert_eq!(get("out/synthesis.png"), get("out/render.png"));
    // Fitting the landmarks again inside deocclude gives the same result.
    assert_eq!(get("out/deocc_lm.png"), get("out/deocc.png"));
    assert_eq!(get("out/fit2.txt"), get("out/fit.txt"));
    // Resuming from the stage-1 checkpoint reproduces the uninterrupted run.
    assert_eq!(get("resumed/model.ckpt"), get("run/model.ckpt"));

    for f in ["depth.txt", "normals.txt", "albedo.txt", "lighting.txt", "face.obj", "depth.png"] {
        assert!(sa.contains_key(&Path::new("out/refine").join(f)), "{f}");
    }
    let report = String::from_utf8(get("out/report.tsv").clone()).unwrap();
    assert!(report.starts_with("category\tpsnr\tssim"));
    assert!(report.lines().any(|l| l.starts_with("overall\t")));
    assert!(report.contains("# control\t99.0000\t1.0000"));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_secotrans");

const TINY: &str = r#"
[train]
epochs = 1
batch_size = 2
image_size = [32, 32]
checkpoint_every = 1

[network]
base_channels = 2
disc_channels = 2
disc_downsamplings = 1

[interpolate]
pairs = 1
"#;

fn secotrans(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).env_remove("SECOTRANS_DEVICE").output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Tiny toy dataset plus a trained checkpoint under `dir/run`.
fn trained(dir: &Path) {
    fs::write(dir.join("run.toml"), TINY).unwrap();
    ok(&secotrans(dir, &["gen-toy", "--seed", "3", "--count", "4", "--image-size", "32x32", "--out", "toy"]));
    ok(&secotrans(dir, &["--config", "run.toml", "--data-a", "toy/a", "--data-b", "toy/b", "--out", "run", "train"]));
}

#[test]
fn gen_toy_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["one", "two"] {
        ok(&secotrans(dir.path(), &["gen-toy", "--seed", "1", "--count", "8", "--out", name]));
    }
    let (one, two) = (dir.path().join("one"), dir.path().join("two"));
    let listing = files(&one);
    assert_eq!(listing, files(&two));
    assert_eq!(listing.len(), 3 * 8 + 1);
    for f in &listing {
        assert_eq!(fs::read(one.join(f)).unwrap(), fs::read(two.join(f)).unwrap(), "{}", f.display());
    }
}

#[test]
fn unknown_direction_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = secotrans(dir.path(), &["translate", "--direction", "b2c", "--checkpoint", "x.ckpt"]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("b2c"));
}

#[test]
fn zero_epochs_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[train]\nepochs = 0\n").unwrap();
    let out = secotrans(dir.path(), &["--config", "c.toml", "train"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("train.epochs"), "{}", stderr(&out));
    // the command line wins over the file
    let out = secotrans(dir.path(), &["--config", "c.toml", "--epochs", "0", "train"]);
    assert!(stderr(&out).contains("train.epochs"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[loss]\nlambda4 = 1.0\n").unwrap();
    let out = secotrans(dir.path(), &["--config", "c.toml", "gen-toy", "--out", "t"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("lambda4"), "{}", stderr(&out));
}

#[test]
fn missing_checkpoint_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = secotrans(dir.path(), &["--data-a", ".", "--direction", "a2b", "translate"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--checkpoint"));
    let out = secotrans(dir.path(), &["--data-a", ".", "--direction", "a2b", "--checkpoint", "nope.ckpt", "translate"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nope.ckpt"));
}

#[test]
fn unsupported_device_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .current_dir(dir.path())
        .args(["gen-toy", "--out", "t", "--count", "1"])
        .env("SECOTRANS_DEVICE", "tpu")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("SECOTRANS_DEVICE"));
}

#[test]
fn train_translate_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    for f in ["config.json", "losses.csv", "latest.ckpt", "checkpoints/step_00000002.ckpt"] {
        assert!(dir.join("run").join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(dir.join("run/losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let base = ["--config", "run.toml", "--checkpoint", "run/latest.ckpt"];
    let with = |extra: &[&'static str]| -> Vec<&str> { base.iter().copied().chain(extra.iter().copied()).collect() };

    ok(&secotrans(dir, &with(&["--data-a", "toy/a", "--direction", "a2b", "--out", "ab", "translate"])));
    let names: Vec<_> = files(&dir.join("ab"));
    assert_eq!(names, files(&dir.join("toy/a")));
    let img = image::open(dir.join("ab/0000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));

    ok(&secotrans(dir, &with(&["--data-a", "toy/a", "--data-b", "toy/b", "--out", "content", "eval-content"])));
    let emb = fs::read_to_string(dir.join("content/embeddings.csv")).unwrap();
    assert!(emb.starts_with("id,origin,v0,"));
    assert_eq!(emb.lines().count(), 1 + 4 * 4);
    let scores: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("content/content_scores.json")).unwrap()).unwrap();
    assert!(scores["nn_ab"].as_f64().is_some() && scores["nn_ba"].as_f64().is_some());

    ok(&secotrans(dir, &with(&["--out", "cons", "eval-consistency", "--toy", "toy"])));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("cons/consistency.json")).unwrap()).unwrap();
    assert_eq!(report["a2b"]["entries"].as_array().unwrap().len(), 4);
    let iou = report["b2a"]["mean_iou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&iou));

    ok(&secotrans(dir, &with(&["--data-a", "toy/a", "--out", "interp", "interpolate"])));
    let strips = files(&dir.join("interp"));
    assert_eq!(strips.len(), 2);
    let strip = image::open(dir.join("interp").join(&strips[0])).unwrap();
    assert_eq!((strip.width(), strip.height()), (5 * 32, 32));
}

#[test]
fn resume_refuses_a_different_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let args = ["--config", "run.toml", "--data-a", "toy/a", "--data-b", "toy/b", "--out", "run"];
    let resume = |extra: &[&str]| {
        let mut v: Vec<&str> = args.to_vec();
        v.extend_from_slice(extra);
        secotrans(dir, &v)
    };
    // a different seed changes the trajectory
    let out = resume(&["--seed", "9", "--checkpoint", "run/latest.ckpt", "train"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("digest"), "{}", stderr(&out));
    // more epochs only extends the schedule
    ok(&resume(&["--epochs", "2", "--checkpoint", "run/latest.ckpt", "train"]));
    let csv = fs::read_to_string(dir.join("run/losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

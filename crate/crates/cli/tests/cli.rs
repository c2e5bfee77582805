use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "--set",
    "synthetic.num_movies=2",
    "--set",
    "synthetic.clips_per_movie=12",
    "--set",
    "synthetic.channels=8",
    "--set",
    "synthetic.frames=4",
];

const SMALL_MODEL: &[&str] = &[
    "--set",
    "ema.frames=2",
    "--set",
    "ema.latents=2",
    "--set",
    "ema.bases=4",
    "--set",
    "ema.ff_hidden=8",
    "--set",
    "decoder.width=16",
    "--set",
    "decoder.ff_hidden=32",
    "--set",
    "decoder.layers=1",
    "--set",
    "train.window=4",
    "--set",
    "train.batch_size=4",
    "--set",
    "generate.max_len=6",
];

fn adnarrate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adnarrate"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = adnarrate(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn corpus(root: &Path) -> PathBuf {
    let dir = root.join("data");
    let mut args = vec!["gen-synthetic", "--out", s(&dir)];
    args.extend(TINY);
    ok(&args);
    dir.join("corpus.dadf")
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend(SMALL_MODEL);
    args.extend(extra);
    ok(&args)
}

#[test]
fn gen_synthetic_is_reproducible_and_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let a = corpus(&tmp.path().join("a"));
    let b = corpus(&tmp.path().join("b"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let m = manifest(a.parent().unwrap());
    assert!(m["finished_unix_ms"].is_u64());
    assert_eq!(m["outputs"]["corpus.dadf"], manifest(b.parent().unwrap())["outputs"]["corpus.dadf"]);
    assert!(std::fs::read_to_string(a.with_file_name("vocab.txt")).unwrap().starts_with("<pad>"));

    let bad = adnarrate(&["gen-synthetic", "--out", s(&tmp.path().join("c")), "--noise", "-1"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("synthetic.noise"));

    let unknown = adnarrate(&["gen-synthetic", "--out", s(&tmp.path().join("d")), "--set", "nope=1"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("nope"));

    let range = adnarrate(&["gen-synthetic", "--out", s(&tmp.path().join("e")), "--set", "synthetic.name_pool=999"]);
    assert_eq!(range.status.code(), Some(2));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny\nsynthetic.num_movies = 1\nsynthetic.clips_per_movie = 9\nseed = 5\n").unwrap();
    let out = tmp.path().join("o");
    ok(&["gen-synthetic", "--config", s(&cfg), "--seed", "6", "--out", s(&out)]);
    let m = manifest(&out);
    assert_eq!(m["seed"], 6);
    assert_eq!(m["config"]["synthetic.clips_per_movie"], "9");

    std::fs::write(&cfg, "bogus = 1\n").unwrap();
    let bad = adnarrate(&["gen-synthetic", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn adapt_outputs_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(tmp.path());
    let out = tmp.path().join("adapt");
    ok(&["adapt", "--data", s(&data), "--out", s(&out), "--epochs", "2", "--gamma", "1.0"]);
    let csv = std::fs::read_to_string(out.join("adapt_loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,step,L_g,L_f,L_I"));
    for l in lines {
        let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v[2], v[4], "gamma 1 trains on L_g alone");
    }

    let zero = tmp.path().join("zero");
    ok(&["adapt", "--data", s(&data), "--out", s(&zero), "--epochs", "0"]);
    assert!(zero.join("adapter.ckpt").exists());
    assert_eq!(std::fs::read_to_string(zero.join("adapt_loss.csv")).unwrap(), "epoch,step,L_g,L_f,L_I\n");

    let bad = adnarrate(&["adapt", "--data", s(&data), "--out", s(&zero), "--gamma", "2"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn io_and_format_errors_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = adnarrate(&["adapt", "--data", "/definitely/missing.dadf", "--out", s(tmp.path())]);
    assert_eq!(missing.status.code(), Some(4));
    let junk = tmp.path().join("junk.dadf");
    std::fs::write(&junk, b"not a container").unwrap();
    let bad = adnarrate(&["adapt", "--data", s(&junk), "--out", s(tmp.path())]);
    assert_eq!(bad.status.code(), Some(4));
    let nodata = adnarrate(&["adapt", "--out", s(tmp.path())]);
    assert_eq!(nodata.status.code(), Some(2));
}

#[test]
fn train_is_deterministic_and_snapshots_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    train(&data, &a, &["--epochs", "2"]);
    train(&data, &b, &["--epochs", "2"]);
    for f in ["model.ckpt", "train_loss.csv", "vocab.txt", "names.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = std::fs::read_to_string(a.join("train_loss.csv")).unwrap();
    assert!(csv.starts_with("epoch,step,L_auto,L_dist,L_II\n"));

    let replay = tmp.path().join("replay");
    ok(&["train", "--config", s(&a.join("config.txt")), "--out", s(&replay)]);
    let (ma, mr) = (manifest(&a), manifest(&replay));
    for f in ["model.ckpt", "train_loss.csv", "config.txt"] {
        assert_eq!(ma["outputs"][f], mr["outputs"][f], "{f}");
    }
}

#[test]
fn ablation_flags_map_to_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(tmp.path());
    let a0 = tmp.path().join("a0");
    train(&data, &a0, &["--epochs", "0", "--no-ema", "--no-dist"]);
    let c = &manifest(&a0)["config"];
    assert_eq!((c["ema.alpha"].as_str(), c["ema.beta"].as_str()), (Some("0"), Some("0")));
    assert_eq!(c["train.distinctive"], "false");

    let x = tmp.path().join("x");
    train(&data, &x, &["--epochs", "1", "--no-xattn", "--nonconsecutive"]);
    let c = &manifest(&x)["config"];
    assert_eq!((c["ema.alpha"].as_str(), c["ema.beta"].as_str()), (Some("3"), Some("0")));
    assert_eq!(c["train.consecutive"], "false");
}

#[test]
fn eval_of_untrained_model_and_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(tmp.path());
    let model = tmp.path().join("m");
    train(&data, &model, &["--epochs", "0"]);
    let ev = tmp.path().join("ev");
    let mut args = vec!["eval", "--data", s(&data), "--model", s(&model), "--out", s(&ev)];
    args.extend(["--set", "generate.max_len=6"]);
    ok(&args);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert!(m["cider"].as_f64().unwrap() < 2.0);
    assert!(m["rouge_l"].as_f64().unwrap() < 0.5);
    assert!(m["recall"]["R@5/16"].is_f64());
    let per_clip = std::fs::read_to_string(ev.join("per_clip.csv")).unwrap();
    assert_eq!(per_clip.lines().count(), 25);

    let rescored = tmp.path().join("rescored");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--generations",
        s(&ev.join("generations.jsonl")),
        "--out",
        s(&rescored),
    ]);
    assert_eq!(
        std::fs::read(ev.join("metrics.json")).unwrap(),
        std::fs::read(rescored.join("metrics.json")).unwrap()
    );
    let none = adnarrate(&["eval", "--data", s(&data), "--out", s(&rescored)]);
    assert_eq!(none.status.code(), Some(2));

    let an = tmp.path().join("an");
    ok(&["analyze", "--data", s(&data), "--model", s(&model), "--out", s(&an)]);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(an.join("redundancy.json")).unwrap()).unwrap();
    assert!(r["redundancy_contrast"].as_f64().unwrap() > 0.0);
    let branches = std::fs::read_to_string(an.join("branches.csv")).unwrap();
    assert!(branches.starts_with("branch,index,c0,"));
    for tag in ["H,", "H_hat,", "H_tilde,"] {
        assert_eq!(branches.lines().filter(|l| l.starts_with(tag)).count(), 8, "{tag}");
    }
}

#[test]
fn gradcheck_suite_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--instances", "1", "--out", s(tmp.path())]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("7 of 7 checks passed"), "{text}");
    assert!(tmp.path().join("gradcheck.txt").exists());
}

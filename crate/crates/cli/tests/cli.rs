use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use normgen::training::CONFIG_KEYS;

const SPECS: &str = "\
sphere cx=32 cy=32 r=20
torus cx=32 cy=32 major=16 minor=8 axis=0.2,0,1
sphere cx=30 cy=33 r=14
torus cx=31 cy=32 major=15 minor=9
";

fn normgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_normgen"))
        .args(args)
        .env_remove("NORMGEN_SEED")
        .output()
        .expect("spawn normgen")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn dataset(dir: &Path) -> PathBuf {
    let specs = dir.join("specs.txt");
    fs::write(&specs, SPECS).unwrap();
    let data = dir.join("data");
    assert_ok(&normgen(&["dataset", "--specs", p(&specs), "--out", p(&data), "--seed", "5"]));
    data
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn help_lists_every_key_and_exit_code() {
    for args in [&["--help"][..], &["train", "--help"][..]] {
        let out = normgen(args);
        assert_ok(&out);
        let text = String::from_utf8_lossy(&out.stdout);
        for (key, _) in CONFIG_KEYS {
            let default = normgen::training::TrainConfig::default().get(key).unwrap();
            assert!(
                text.lines().any(|l| l.trim_start().starts_with(key) && l.contains(&default)),
                "{key} = {default} missing from {args:?} help"
            );
        }
        for code in 0..=8 {
            assert!(text.contains(&format!("\n  {code}  ")), "exit code {code} undocumented");
        }
    }
}

#[test]
fn dataset_writes_a_reproducible_tree() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    assert!(data.join("manifest.tsv").exists());
    let first = tree(&data);
    assert_eq!(first.keys().filter(|k| k.starts_with("normals")).count(), 4);
    assert_ok(&normgen(&[
        "dataset",
        "--specs",
        p(&dir.path().join("specs.txt")),
        "--out",
        p(&data),
        "--seed",
        "5",
    ]));
    assert_eq!(tree(&data), first);
}

#[test]
fn dataset_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let out = normgen(&["dataset", "--specs", p(&missing), "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("nope.txt"));

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "sphere cx=32 cy=32 r=20\ncube cx=1\n").unwrap();
    let out = normgen(&["dataset", "--specs", p(&bad), "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("bad.txt:2"));

    let big = dir.path().join("big.txt");
    fs::write(&big, "sphere cx=32 cy=32 r=40\n").unwrap();
    let out = normgen(&["dataset", "--specs", p(&big), "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(5));

    let out = normgen(&["dataset", "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn random_dataset_respects_env_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_normgen"))
            .args(["dataset", "--random", "3", "--out", p(&dir.path().join(name))])
            .env("NORMGEN_SEED", seed)
            .output()
            .unwrap();
        assert_ok(&out);
        tree(&dir.path().join(name))
    };
    let (a, b, c) = (run("a", "7"), run("b", "7"), run("c", "8"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn mask_writes_hints_and_previews() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let normal = data.join("normals/pair_0001.png");
    let out_png = dir.path().join("m.png");
    let out = normgen(&[
        "mask",
        "--normal",
        p(&normal),
        "--out",
        p(&out_png),
        "--keep-prob",
        "1",
        "--curvature",
        p(&dir.path().join("k.png")),
        "--band",
        p(&dir.path().join("b.png")),
    ]);
    assert_ok(&out);
    for f in ["m.png", "m.txt", "k.png", "b.png"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    // keep_prob 1 keeps the whole band.
    assert_eq!(fs::read(dir.path().join("m.png")).unwrap(), fs::read(dir.path().join("b.png")).unwrap());

    let out = normgen(&["mask", "--normal", p(&normal), "--out", p(&out_png), "--keep-prob", "0"]);
    assert_eq!(out.status.code(), Some(5));
    let out = normgen(&["mask", "--normal", p(&normal), "--out", p(&out_png), "--t-hi", "100", "--t-lo", "120"]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn train_infer_eval_bookkeeping() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "base_channels = 4\nseed = 3\nmax_iterations = 5\n").unwrap();
    let run = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_normgen"))
        .args(["train", "--data", p(&data), "--run", p(&run), "--config", p(&cfg)])
        .args(["--max-iterations", "1", "--critic-steps-per-gen", "2"])
        .env("NORMGEN_SEED", "99")
        .output()
        .unwrap();
    assert_ok(&out);
    assert!(run.join("ckpt_1/generator.nck").exists());
    let losses = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 2, "{losses}");
    assert!(losses.lines().nth(1).unwrap().starts_with("1,"));

    // Effective config: flag > file > env > default, and it parses back.
    let effective = fs::read_to_string(run.join("config.txt")).unwrap();
    for line in [
        "max_iterations = 1  # flag",
        "critic_steps_per_gen = 2  # flag",
        "seed = 3  # file",
        "base_channels = 4  # file",
        "lambda_l1 = 100  # default",
    ] {
        assert!(effective.contains(line), "{line} not in\n{effective}");
    }
    let kv = normgen::kv::KvFile::parse(&effective, Path::new("config.txt")).unwrap();
    assert_eq!(kv.get("seed"), Some("3"));

    let rerun = dir.path().join("rerun");
    let out = Command::new(env!("CARGO_BIN_EXE_normgen"))
        .args(["train", "--data", p(&data), "--run", p(&rerun), "--base-channels", "4"])
        .args(["--max-iterations", "1", "--critic-steps-per-gen", "2"])
        .env("NORMGEN_SEED", "99")
        .output()
        .unwrap();
    assert_ok(&out);
    assert!(fs::read_to_string(rerun.join("config.txt")).unwrap().contains("seed = 99  # env"));

    // Single-sketch inference keeps the input size.
    let png = dir.path().join("y.png");
    let sketch = data.join("sketches/pair_0000.png");
    assert_ok(&normgen(&[
        "infer",
        "--checkpoint",
        p(&run.join("ckpt_1")),
        "--sketch",
        p(&sketch),
        "--no-mask",
        "--out",
        p(&png),
    ]));
    let img = normgen::geometry::NormalMapImage::load(&png).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
    let with_mask = dir.path().join("ym.png");
    assert_ok(&normgen(&[
        "infer",
        "--checkpoint",
        p(&run.join("ckpt_1/generator.nck")),
        "--sketch",
        p(&sketch),
        "--mask",
        p(&data.join("masks/pair_0000.png")),
        "--out",
        p(&with_mask),
    ]));

    let gen = dir.path().join("gen");
    assert_ok(&normgen(&[
        "infer",
        "--checkpoint",
        p(&run.join("ckpt_1")),
        "--manifest",
        p(&data),
        "--split",
        "validation",
        "--out-dir",
        p(&gen),
    ]));
    let report = dir.path().join("report");
    let out = normgen(&[
        "eval",
        "--manifest",
        p(&data),
        "--split",
        "validation",
        "--method",
        &format!("ours={}", p(&gen)),
        "--out",
        p(&report),
        "--error-maps",
        p(&dir.path().join("maps")),
    ]);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("ours"));
    assert!(report.join("report.tsv").exists() && report.join("report.txt").exists());
    assert!(dir.path().join("maps/ours/pair_0003.png").exists());

    // Every pair, but only the validation pair was generated.
    let out = normgen(&["eval", "--manifest", p(&data), "--method", &format!("ours={}", p(&gen)), "--out", p(&report)]);
    assert_eq!(out.status.code(), Some(8));
    assert!(stderr(&out).contains("pair_0000"));
}

#[test]
fn train_and_infer_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let run = dir.path().join("run");
    let bad_cfg = dir.path().join("bad.cfg");
    fs::write(&bad_cfg, "seed = 1\nlambda_l1 = lots\n").unwrap();
    let out = normgen(&["train", "--data", p(&data), "--run", p(&run), "--config", p(&bad_cfg)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("bad.cfg:2"), "{}", stderr(&out));

    let out = normgen(&["train", "--data", p(&data), "--run", p(&run), "--noise-mode", "loud"]);
    assert_eq!(out.status.code(), Some(3));
    let out = normgen(&["train", "--data", p(&dir.path().join("missing")), "--run", p(&run)]);
    assert_eq!(out.status.code(), Some(4));

    let sketch = data.join("sketches/pair_0000.png");
    let out = normgen(&["infer", "--checkpoint", p(&run), "--sketch", p(&sketch), "--no-mask", "--out", "x.png"]);
    assert_eq!(out.status.code(), Some(4));
    let junk = dir.path().join("junk.nck");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let out = normgen(&["infer", "--checkpoint", p(&junk), "--sketch", p(&sketch), "--no-mask", "--out", "x.png"]);
    assert_eq!(out.status.code(), Some(6));
    let out = normgen(&["infer", "--checkpoint", p(&junk), "--sketch", p(&sketch), "--out", "x.png"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_of_ground_truth_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let report = dir.path().join("report");
    let out = normgen(&[
        "eval",
        "--manifest",
        p(&data),
        "--method",
        &format!("truth={}", p(&data.join("normals"))),
        "--out",
        p(&report),
    ]);
    assert_ok(&out);
    let tsv = fs::read_to_string(report.join("report.tsv")).unwrap();
    assert!(tsv.contains("truth\tMEAN\t0.000000\t0.000000\t0.000000"), "{tsv}");
    let out = normgen(&["eval", "--manifest", p(&data), "--method", "truth", "--out", p(&report)]);
    assert_eq!(out.status.code(), Some(3));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ddbridge(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddbridge"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
[data]
n = 12
volumeSide = 8
nCandidates = 20

[net]
patchSide = 4
embedDim = 12
nBlocks = 1
nHeads = 2

[train]
maxIters = 6
valEvery = 3
valNStep = 4

[sampler]
nStep = 5
emFraction = 0.0

[eval]
split = "all"
stepList = [3, 4]
variables = ["all", "mmse"]
"#;

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("c.toml"),
        "[data]\nn = 60\nvolumeSide = 8\nnCandidates = 50\n",
    )
    .unwrap();
    for out in ["a", "b"] {
        ok(&ddbridge(
            &[
                "gen-data",
                "--config",
                "c.toml",
                "--seed",
                "7",
                "--out",
                out,
                "--threads",
                "1",
            ],
            tmp.path(),
        ));
    }
    let a = files_under(&tmp.path().join("a"));
    let b = files_under(&tmp.path().join("b"));
    assert_eq!(a, b);
    let manifest = fs::read_to_string(tmp.path().join("a/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 60);
    assert!(tmp.path().join("a/effective_config.toml").is_file());
    assert!(tmp.path().join("a/split.json").is_file());
}

#[test]
fn invalid_class_mix_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("c.toml"),
        "[data]\nclassMix = [0.4, 0.4, 0.1]\n",
    )
    .unwrap();
    let o = ddbridge(
        &["gen-data", "--config", "c.toml", "--out", "x"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.classMix"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), "[sampler]\nsteps = 10\n").unwrap();
    let o = ddbridge(
        &["gen-data", "--config", "c.toml", "--out", "x"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("config error"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_fails_at_runtime() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), SMALL).unwrap();
    ok(&ddbridge(
        &["gen-data", "--config", "c.toml", "--out", "data"],
        tmp.path(),
    ));
    let o = ddbridge(
        &[
            "sample",
            "--config",
            "c.toml",
            "--manifest",
            "data/manifest.jsonl",
            "--checkpoint",
            "nope.ckpt",
            "--out",
            "s",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).starts_with("missing checkpoint"),
        "{}",
        stderr(&o)
    );
    let o = ddbridge(
        &[
            "train",
            "--config",
            "c.toml",
            "--manifest",
            "absent.jsonl",
            "--out",
            "t",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).starts_with("manifest/volume mismatch"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn micro_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("c.toml"), SMALL).unwrap();
    let base = ["--config", "c.toml", "--threads", "1"];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = extra.iter().chain(base.iter()).copied().collect();
        ddbridge(&args, d)
    };
    ok(&run(&["gen-data", "--out", "data"]));
    ok(&run(&[
        "train",
        "--manifest",
        "data/manifest.jsonl",
        "--out",
        "train",
    ]));
    let log = fs::read_to_string(d.join("train/metrics.csv")).unwrap();
    assert!(log.starts_with("iter,trainLossEMA,valMAE,valPSNR,valSSIM,wallClockSec"));
    assert_eq!(log.lines().count(), 4);
    for f in [
        "best.ckpt",
        "last.ckpt",
        "conditioning.json",
        "summary.json",
        "effective_config.toml",
    ] {
        assert!(d.join("train").join(f).is_file(), "{f}");
    }

    let sample = |out: &str| {
        run(&[
            "sample",
            "--manifest",
            "data/manifest.jsonl",
            "--checkpoint",
            "train/best.ckpt",
            "--out",
            out,
        ])
    };
    ok(&sample("s1"));
    ok(&sample("s2"));
    assert_eq!(files_under(&d.join("s1")), files_under(&d.join("s2")));
    assert_eq!(
        fs::read_to_string(d.join("s1/samples.jsonl"))
            .unwrap()
            .lines()
            .count(),
        12
    );

    ok(&run(&[
        "evaluate",
        "--manifest",
        "data/manifest.jsonl",
        "--predictions",
        "s1/samples.jsonl",
        "--out",
        "ev",
    ]));
    let csv = fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(fs::read_to_string(d.join("ev/metrics.json"))
        .unwrap()
        .contains("class:CN"));

    // Scoring the true volumes against themselves.
    let ids: Vec<String> = fs::read_to_string(d.join("data/manifest.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            l.split("\"id\":\"")
                .nth(1)
                .unwrap()
                .split('"')
                .next()
                .unwrap()
                .to_string()
        })
        .collect();
    let identity: String = ids
        .iter()
        .map(|id| format!("{{\"id\":\"{id}\",\"path\":\"volumes/{id}_function.vol\"}}\n"))
        .collect();
    fs::write(d.join("data/identity.jsonl"), identity).unwrap();
    ok(&run(&[
        "evaluate",
        "--manifest",
        "data/manifest.jsonl",
        "--predictions",
        "data/identity.jsonl",
        "--out",
        "ev0",
    ]));
    let csv = fs::read_to_string(d.join("ev0/metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[4], "0", "{line}");
        assert_eq!(cols[6], "inf", "{line}");
    }

    ok(&run(&[
        "sweep-steps",
        "--manifest",
        "data/manifest.jsonl",
        "--checkpoint",
        "train/best.ckpt",
        "--out",
        "sw",
    ]));
    assert_eq!(
        fs::read_to_string(d.join("sw/sweep.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    ok(&run(&[
        "ablate-aux",
        "--manifest",
        "data/manifest.jsonl",
        "--checkpoint",
        "train/best.ckpt",
        "--out",
        "ab",
    ]));
    let ab = fs::read_to_string(d.join("ab/ablation.csv")).unwrap();
    assert!(ab.contains("\nall,0,0,0\n"), "{ab}");

    fs::write(
        d.join("adapt.toml"),
        format!("{SMALL}\n[adapt]\nftIters = 3\nlocalTrainFraction = 0.5\n"),
    )
    .unwrap();
    let o = ddbridge(
        &[
            "adapt",
            "--config",
            "adapt.toml",
            "--manifest",
            "data/manifest.jsonl",
            "--checkpoint",
            "train/best.ckpt",
            "--out",
            "ad",
        ],
        d,
    );
    ok(&o);
    let cond = fs::read_to_string(d.join("ad/conditioning.json")).unwrap();
    assert!(cond.contains("grayMatter"));
    assert!(!cond.contains("\"mmse\""));
}

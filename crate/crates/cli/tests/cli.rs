use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn larmoe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_larmoe"))
        .args(args)
        .current_dir(cwd)
        .env("LARMOE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> serde_json::Value {
    let out = larmoe(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        stdout.lines().count(),
        1,
        "stdout must be one JSON line: {stdout}"
    );
    serde_json::from_str(stdout.trim()).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    let out = larmoe(args, cwd);
    assert!(out.stdout.is_empty(), "failures print nothing to stdout");
    out.status.code().unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

/// gen + pretrain + train with tiny budgets in `dir`.
fn pipeline(dir: &Path, extra: &[&str]) -> PathBuf {
    ok(
        &[
            "gen",
            "--count",
            "6",
            "--seed",
            "1",
            "--out",
            "data/demos.json",
        ],
        dir,
    );
    ok(
        &[
            "pretrain",
            "--data",
            "data/demos.json",
            "--out",
            "pre",
            "--set",
            "pretrain_epochs=2",
        ],
        dir,
    );
    let mut args = vec![
        "train",
        "--data",
        "data/demos.json",
        "--from",
        "pre/pretrain.ckpt.json",
        "--out",
        "post",
        "--set",
        "posttrain_epochs=2",
    ];
    args.extend_from_slice(extra);
    ok(&args, dir);
    dir.join("post")
}

#[test]
fn gen_is_byte_deterministic_and_validates_count() {
    let dir = tempfile::tempdir().unwrap();
    let summary = ok(
        &[
            "gen",
            "--count",
            "5",
            "--seed",
            "3",
            "--out",
            "a/demos.json",
        ],
        dir.path(),
    );
    assert_eq!(summary["episodes"], 5);
    ok(
        &[
            "gen",
            "--count",
            "5",
            "--seed",
            "3",
            "--out",
            "b/demos.json",
        ],
        dir.path(),
    );
    for f in ["demos.json", "demos.phases.json"] {
        assert_eq!(
            read(dir.path().join("a").join(f)),
            read(dir.path().join("b").join(f))
        );
    }
    assert_eq!(
        code(&["gen", "--count", "0", "--out", "c.json"], dir.path()),
        2
    );
    assert_eq!(code(&["gen"], dir.path()), 2);
    assert_eq!(code(&["frobnicate"], dir.path()), 2);
}

#[test]
fn pipeline_outputs_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let post = pipeline(d, &[]);
    assert!(d.join("pre/pretrain.ckpt.json").is_file());
    assert!(d.join("pre/pretrain_log.csv").is_file());
    assert!(post.join("posttrain.ckpt.json").is_file());
    assert_eq!(
        String::from_utf8(read(post.join("posttrain_log.csv")))
            .unwrap()
            .lines()
            .count(),
        3
    );

    // Stage guard, missing inputs, bad overrides.
    let train = |from: &str, data: &str, set: &str| {
        code(
            &[
                "train", "--data", data, "--from", from, "--out", "x", "--set", set,
            ],
            d,
        )
    };
    assert_eq!(
        train("post/posttrain.ckpt.json", "data/demos.json", "seed=0"),
        4
    );
    assert_eq!(
        train("pre/pretrain.ckpt.json", "data/nope.json", "seed=0"),
        3
    );
    assert_eq!(train("pre/nope.json", "data/demos.json", "seed=0"), 3);
    assert_eq!(
        train("pre/pretrain.ckpt.json", "data/demos.json", "no_such_key=1"),
        2
    );
    assert_eq!(
        train("pre/pretrain.ckpt.json", "data/demos.json", "num_experts=0"),
        2
    );
    assert_eq!(
        code(
            &[
                "eval",
                "--checkpoint",
                "pre/pretrain.ckpt.json",
                "--out",
                "e"
            ],
            d
        ),
        4
    );
    std::fs::write(d.join("broken.json"), b"{").unwrap();
    assert_eq!(
        code(&["eval", "--checkpoint", "broken.json", "--out", "e"], d),
        3
    );
}

#[test]
fn eval_writes_every_artifact_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d, &[]);
    let args = |out: &'static str| {
        [
            "eval",
            "--checkpoint",
            "post/posttrain.ckpt.json",
            "--data",
            "data/demos.json",
            "--out",
            out,
        ]
    };
    let a = ok(&args("e1"), d);
    let b = ok(&args("e2"), d);
    assert_eq!(a, b);
    assert_eq!(a["total"], 50);
    assert_eq!(
        std::fs::read_dir(d.join("e1/episodes")).unwrap().count(),
        50
    );
    assert_eq!(
        std::fs::read_dir(d.join("e1/heatmaps")).unwrap().count(),
        20
    );
    for f in [
        "summary.json",
        "grid.csv",
        "demo_alignment.json",
        "episodes/episode_049.json",
        "heatmaps/episode_019.csv",
    ] {
        assert_eq!(
            read(d.join("e1").join(f)),
            read(d.join("e2").join(f)),
            "{f}"
        );
    }
    let nmi = a["mean_nmi"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&nmi));
}

#[test]
fn zero_lambdas_reproduce_the_unregularized_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let zero = pipeline(
        d,
        &[
            "--set",
            "lambda_dc=0",
            "--set",
            "lambda_h=0",
            "--set",
            "lambda_g=0",
            "--set",
            "freeze_student=false",
        ],
    );
    let zero_log = read(zero.join("posttrain_log.csv"));
    ok(
        &[
            "train",
            "--data",
            "data/demos.json",
            "--from",
            "pre/pretrain.ckpt.json",
            "--out",
            "base",
            "--set",
            "posttrain_epochs=2",
            "--set",
            "regularize=false",
            "--set",
            "freeze_student=false",
        ],
        d,
    );
    assert_eq!(zero_log, read(d.join("base/posttrain_log.csv")));
}

#[test]
fn ablate_writes_one_row_per_cell_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &["gen", "--count", "4", "--seed", "2", "--out", "demos.json"],
        d,
    );
    let run = |out: &'static str| {
        ok(
            &[
                "ablate",
                "--preset",
                "freeze-regularize",
                "--seeds",
                "0,1",
                "--data",
                "demos.json",
                "--out",
                out,
                "--set",
                "pretrain_epochs=1",
                "--set",
                "posttrain_epochs=1",
            ],
            d,
        )
    };
    let a = run("a1");
    assert_eq!(a["rows"], 8);
    run("a2");
    let table = read(d.join("a1/ablation.csv"));
    assert_eq!(table, read(d.join("a2/ablation.csv")));
    let text = String::from_utf8(table).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "config-hash,F,R,N,seed,success_rate,nmi,mean_entropy"
    );
    assert_eq!(text.lines().count(), 9);
    assert_eq!(
        code(&["ablate", "--data", "demos.json", "--out", "x"], d),
        2,
        "grid or preset required"
    );
}

#[test]
fn training_commands_never_read_phase_labels() {
    for (file, text) in [
        ("pretrain.rs", include_str!("../src/pretrain.rs")),
        ("train.rs", include_str!("../src/train.rs")),
        ("common.rs", include_str!("../src/common.rs")),
    ] {
        for needle in ["labels::", "read_phase_labels", "PhaseLabels", "sidecar"] {
            assert!(!text.contains(needle), "{file} mentions {needle}");
        }
    }
}

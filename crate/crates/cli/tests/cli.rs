use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "phantom.image_size=64",
    "--set",
    "phantom.cells_per_image=[3, 5]",
    "--set",
    "train.iterations=20",
    "--set",
    "train.crop_size=48",
    "--set",
    "mixer.crop_size=48",
    "--set",
    "eval.window=48",
    "--set",
    "eval.stride=24",
];

fn cellmixer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellmixer"))
        .current_dir(dir)
        .env_remove("CELLMIXER_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = cellmixer(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(SMALL).copied().collect()
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        cellmixer(dir.path(), &["no-such-command"]).status.code(),
        Some(1)
    );
    assert_eq!(
        cellmixer(dir.path(), &["phantom", "--class", "1"])
            .status
            .code(),
        Some(1)
    );
    let bad = cellmixer(
        dir.path(),
        &["validate-config", "--set", "train.learning_rate=-1"],
    );
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("learning_rate"));
    assert_eq!(cellmixer(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = cellmixer(
        dir.path(),
        &[
            "infer",
            "--model",
            "nope.json",
            "--image",
            "x.png",
            "--out",
            "y.png",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let render = |name: &str, seed_env: Option<&str>, seed_flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_cellmixer"));
        cmd.current_dir(d).env_remove("CELLMIXER_SEED");
        if let Some(s) = seed_env {
            cmd.env("CELLMIXER_SEED", s);
        }
        cmd.args(["phantom", "--class", "2", "--count", "1", "--out", name])
            .args(SMALL);
        if let Some(s) = seed_flag {
            cmd.args(["--seed", s]);
        }
        assert!(cmd.status().unwrap().success());
        fs::read(d.join(name).join("class2_0000.png")).unwrap()
    };
    let env5 = render("a", Some("5"), None);
    let flag5 = render("b", None, Some("5"));
    let both = render("c", Some("5"), Some("6"));
    let flag6 = render("d", None, Some("6"));
    assert_eq!(env5, flag5);
    assert_eq!(both, flag6);
    assert_ne!(env5, flag6);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &with_small(&["phantom", "--class", "1", "--count", "2", "--out", "p1"]),
    );
    ok(
        d,
        &with_small(&["phantom", "--class", "2", "--count", "2", "--out", "p2"]),
    );
    let manifest = [
        fs::read_to_string(d.join("p1/manifest.jsonl"))
            .unwrap()
            .replace("\"class1", "\"p1/class1"),
        fs::read_to_string(d.join("p2/manifest.jsonl"))
            .unwrap()
            .replace("\"class2", "\"p2/class2"),
    ]
    .concat();
    fs::write(d.join("all.jsonl"), manifest).unwrap();
    let mut args = with_small(&[
        "train",
        "--mode",
        "cellmixer",
        "--manifest",
        "all.jsonl",
        "--out",
        "m.json",
    ]);
    args.extend([
        "--set",
        "train.learning_rate=1.0",
        "--set",
        "train.weight_decay=1e308",
        "--set",
        "train.momentum=0.0",
    ]);
    let out = cellmixer(d, &args);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn stage_by_stage_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for c in ["1", "2", "3"] {
        ok(
            d,
            &with_small(&[
                "phantom",
                "--class",
                c,
                "--count",
                "4",
                "--out",
                &format!("p{c}"),
            ]),
        );
    }
    let manifest: String = ["1", "2", "3"]
        .iter()
        .map(|c| {
            fs::read_to_string(d.join(format!("p{c}/manifest.jsonl")))
                .unwrap()
                .replace(&format!("\"class{c}"), &format!("\"p{c}/class{c}"))
        })
        .collect();
    fs::write(d.join("all.jsonl"), manifest).unwrap();

    ok(
        d,
        &with_small(&[
            "split",
            "--manifest",
            "all.jsonl",
            "--val-fraction",
            "0.25",
            "--out",
            "split.jsonl",
        ]),
    );
    let split = fs::read_to_string(d.join("split.jsonl")).unwrap();
    assert_eq!(split.matches("\"val\"").count(), 3);

    let out = ok(
        d,
        &with_small(&["extract", "--manifest", "split.jsonl", "--out", "ex"]),
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["processed"], 12);
    assert!(d.join("ex/sidecar.json").exists());

    ok(
        d,
        &with_small(&[
            "mix",
            "--manifest",
            "ex/manifest.jsonl",
            "--count",
            "3",
            "--out",
            "mixed",
        ]),
    );
    assert_eq!(
        fs::read_to_string(d.join("mixed/manifest.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    for mode in ["baseline", "cellmixer"] {
        ok(
            d,
            &with_small(&[
                "train",
                "--mode",
                mode,
                "--manifest",
                "ex/manifest.jsonl",
                "--out",
                &format!("{mode}.json"),
            ]),
        );
    }
    ok(
        d,
        &with_small(&[
            "phantom-mix",
            "--mix",
            "1:0.5,3:0.5",
            "--count",
            "2",
            "--out",
            "tm",
        ]),
    );
    ok(
        d,
        &with_small(&[
            "infer",
            "--model",
            "cellmixer.json",
            "--image",
            "tm/mixture_0000.png",
            "--out",
            "pred.png",
        ]),
    );
    ok(
        d,
        &[
            "overlay",
            "--image",
            "tm/mixture_0000.png",
            "--labels",
            "pred.png",
            "--out",
            "ov.png",
        ],
    );
    let out = ok(
        d,
        &with_small(&[
            "eval",
            "--model",
            "baseline.json",
            "--model",
            "cellmixer.json",
            "--manifest",
            "tm/manifest.jsonl",
            "--name",
            "true-mixture",
            "--out",
            "eval.json",
        ]),
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("fg mIoU"));
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["reports"].as_array().unwrap().len(), 2);
    assert_eq!(eval["comparison"]["datasets"][0]["dataset"], "true-mixture");

    for artifact in [
        "baseline.json",
        "pred.png",
        "ov.png",
        "eval.json",
        "split.jsonl",
    ] {
        let sidecar: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(d.join(format!("{artifact}.sidecar.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(sidecar["seed"], 0);
        assert_eq!(sidecar["config_hash"].as_str().unwrap().len(), 64);
        assert_eq!(sidecar["artifacts"][0], artifact);
    }
}

#[test]
fn validate_config_output_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(
        d,
        &[
            "validate-config",
            "--seed",
            "11",
            "--set",
            "train.iterations=7",
        ],
    );
    fs::write(d.join("c.toml"), &out.stdout).unwrap();
    let again = ok(d, &["validate-config", "--config", "c.toml"]);
    assert_eq!(out.stdout, again.stdout);
    let info = ok(d, &["info", "--config", "c.toml"]);
    assert!(String::from_utf8_lossy(&info.stdout).contains("seed 11"));
}

#[test]
fn experiment_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = |out: &'static str| {
        with_small(&[
            "run-experiment",
            "--out",
            out,
            "--seed",
            "3",
            "--set",
            "experiment.images_per_class=10",
            "--set",
            "experiment.true_mixtures=3",
            "--set",
            "experiment.artificial_mixtures=3",
            "--set",
            "experiment.overlays=1",
        ])
    };
    ok(d, &args("a"));
    ok(d, &args("b"));
    for f in ["report.json", "report.txt", "models/cellmixer.json"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(d.join("a/overlays/scene_000_truth.png").exists());
    assert!(d.join("a/sidecar.json").exists());
}

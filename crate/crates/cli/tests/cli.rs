use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
[stage1]
steps = 3
batch = 1
min_corpus = 5

[stage2]
steps = 2
batch = 1

[eval]
max_videos = 2
sample_steps = 1
";

fn motionrag(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motionrag"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = motionrag(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(dir: &Path, args: &[&str], needle: &str) {
    let out = motionrag(dir, args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(!out.status.success(), "{args:?} should fail");
    assert!(stderr.contains(needle), "{args:?}: {stderr}");
}

#[test]
fn printed_config_is_accepted_back() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["config"]);
    assert!(text.contains("top_k = 9"));
    std::fs::write(dir.path().join("run.toml"), text).unwrap();
    ok(
        dir.path(),
        &["build-corpus", "--out", "corpus", "--count", "4"],
    );
    let indexed = ok(
        dir.path(),
        &["build-index", "--config", "run.toml", "--all"],
    );
    assert!(indexed.starts_with("indexed 4 captions"), "{indexed}");
}

#[test]
fn full_workflow_on_a_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();
    let run = ["--config", "run.toml"];
    let with = |cmd: &'static str, extra: &[&'static str]| -> Vec<&'static str> {
        [&[cmd][..], &run[..], extra].concat()
    };

    ok(
        d,
        &[
            "build-corpus",
            "--out",
            "corpus",
            "--count",
            "20",
            "--seed",
            "3",
        ],
    );
    fails_with(
        d,
        &with("train-stage2", &["--stage1", "s1.mrc", "--out", "s2.mrc"]),
        "error:",
    );

    let indexed = ok(d, &with("build-index", &[]));
    assert!(indexed.starts_with("indexed 18 captions"), "{indexed}");
    let hits = ok(
        d,
        &[
            "query",
            "--index",
            "index.mri",
            "--text",
            "a red disk",
            "--k",
            "3",
        ],
    );
    assert_eq!(hits.lines().count(), 3);

    ok(d, &with("train-stage1", &["--out", "s1.mrc"]));
    ok(
        d,
        &with("train-stage2", &["--stage1", "s1.mrc", "--out", "s2.mrc"]),
    );
    let system = ["--stage1", "s1.mrc", "--stage2", "s2.mrc"];

    let infer = ok(
        d,
        &with(
            "infer",
            &[
                &system[..],
                &[
                    "--image",
                    "v00000",
                    "--prompt",
                    "a blue square",
                    "--out",
                    "out.mrv",
                ],
            ]
            .concat(),
        ),
    );
    assert!(infer.contains("examples:"), "{infer}");
    assert!(d.join("out.mrv").exists());

    let table = ok(
        d,
        &with(
            "eval",
            &[&system[..], &["--strategies", "NoMotion,MCT-3"]].concat(),
        ),
    );
    assert!(table.contains("MCT-3"), "{table}");

    fails_with(
        d,
        &with(
            "eval",
            &[&system[..], &["--strategies", "Bogus-2"]].concat(),
        ),
        "unknown strategy",
    );
    fails_with(
        d,
        &with(
            "infer",
            &[
                "--stage1", "s1.mrc", "--image", "v00000", "--prompt", "x", "--out", "o.mrv",
            ],
        ),
        "error:",
    );
}

#[test]
fn missing_index_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    fails_with(
        dir.path(),
        &["query", "--index", "nope.mri", "--text", "x"],
        "nope.mri",
    );
}

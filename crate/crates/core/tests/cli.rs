use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn grounding(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grounding"))
        .current_dir(dir)
        .env_remove("GROUNDING_VLM_ENDPOINT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(dir: &Path, name: &str) {
    let o = grounding(
        dir,
        &["simulate", "--builtin", name, "--seed", "7", "--out", "."],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn simulate_writes_four_files_reproducibly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate(a.path(), "sorting_2P_R");
    simulate(b.path(), "sorting_2P_R");
    for ext in [
        "events.jsonl",
        "frames.jsonl",
        "objects.json",
        "oracle.json",
    ] {
        let name = format!("sorting_2P_R.{ext}");
        assert_eq!(
            fs::read(a.path().join(&name)).unwrap(),
            fs::read(b.path().join(&name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn unknown_builtin_lists_names() {
    let dir = tempfile::tempdir().unwrap();
    let o = grounding(dir.path(), &["simulate", "--builtin", "juggling_3P"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sorting_example_s3"));
}

#[test]
fn bad_flags_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        grounding(dir.path(), &["frobnicate"]).status.code(),
        Some(2)
    );
    assert_eq!(
        grounding(dir.path(), &["eval", "--gt", "x"]).status.code(),
        Some(2)
    );
    let o = grounding(
        dir.path(),
        &["eval", "--gt", "a", "--gt", "b", "--pred", "c"],
    );
    assert_eq!(o.status.code(), Some(2));
    let o = grounding(
        dir.path(),
        &["eval", "--gt", "a", "--pred", "b", "--delta", "0"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn backend_configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "sorting_1P");
    let base = [
        "run",
        "--frames",
        "sorting_1P.frames.jsonl",
        "--objects",
        "sorting_1P.objects.json",
        "--out",
        "p.jsonl",
    ];
    let o = grounding(dir.path(), &[&base[..], &["--backend", "remote"]].concat());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("GROUNDING_VLM_ENDPOINT"));
    let o = grounding(dir.path(), &base);
    assert_eq!(o.status.code(), Some(2), "scripted backend without oracle");
    let o = grounding(
        dir.path(),
        &[
            &base[..],
            &[
                "--backend",
                "fault",
                "--oracle",
                "sorting_1P.oracle.json",
                "--p-flag",
                "2",
            ],
        ]
        .concat(),
    );
    assert_eq!(o.status.code(), Some(2));
    let o = grounding(
        dir.path(),
        &[
            &base[..],
            &["--oracle", "sorting_1P.oracle.json", "--min-hold", "0"],
        ]
        .concat(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "sorting_1P");
    let o = grounding(
        dir.path(),
        &[
            "run",
            "--frames",
            "missing.jsonl",
            "--objects",
            "sorting_1P.objects.json",
            "--oracle",
            "sorting_1P.oracle.json",
            "--out",
            "p.jsonl",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    fs::write(dir.path().join("bad.jsonl"), "{\"frame\":0,\"time\":1.0,\"actions\":{},\"person_crops\":{}}\n{\"frame\":1,\"time\":0.5,\"actions\":{},\"person_crops\":{}}\n").unwrap();
    let o = grounding(
        dir.path(),
        &[
            "run",
            "--frames",
            "bad.jsonl",
            "--objects",
            "sorting_1P.objects.json",
            "--oracle",
            "sorting_1P.oracle.json",
            "--out",
            "p.jsonl",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn run_eval_ablate_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "handover_1P_R");
    let o = grounding(
        d,
        &[
            "run",
            "--frames",
            "handover_1P_R.frames.jsonl",
            "--objects",
            "handover_1P_R.objects.json",
            "--oracle",
            "handover_1P_R.oracle.json",
            "--out",
            "pred.jsonl",
            "--stats",
            "stats.json",
            "--diagnostics",
            "diag.jsonl",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let stats: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["tuples"], 6);
    assert_eq!(stats["calls"], stats["triggers"]);
    assert!(stats["calls"].as_u64().unwrap() * 10 < stats["frames"].as_u64().unwrap());
    assert!(fs::read_to_string(d.join("diag.jsonl")).unwrap().is_empty());

    let o = grounding(
        d,
        &[
            "eval",
            "--gt",
            "handover_1P_R.events.jsonl",
            "--pred",
            "pred.jsonl",
            "--delta",
            "5",
            "--per-role",
            "--json",
            "r.json",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for col in [" x ", " o ", " r ", " i "] {
        assert!(text.contains(col), "{text}");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["overall"]["gs"], 1.0);

    // Ground truth scored against itself.
    let o = grounding(
        d,
        &[
            "eval",
            "--gt",
            "handover_1P_R.events.jsonl",
            "--pred",
            "handover_1P_R.events.jsonl",
            "--per-role",
            "--json",
            "self.json",
        ],
    );
    assert!(o.status.success());
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("self.json")).unwrap()).unwrap();
    for cell in report["cells"].as_array().unwrap() {
        assert_eq!(cell["overall"]["gs"], 1.0);
        for role in ["action", "object", "relation", "flag"] {
            assert_eq!(cell["roles"][role]["gs"], 1.0);
        }
    }

    let o = grounding(
        d,
        &[
            "ablate",
            "--gt",
            "handover_1P_R.events.jsonl",
            "--pred",
            "pred.jsonl",
            "--deltas",
            "1,3,5",
        ],
    );
    assert!(o.status.success());
    let header = stdout(&o).lines().next().unwrap().to_string();
    assert!(
        header.contains("1s") && header.contains("3s") && header.contains("5s"),
        "{header}"
    );
}

#[test]
fn frame_by_frame_baseline_calls_every_frame() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "sorting_1P");
    let o = grounding(
        d,
        &[
            "run",
            "--frames",
            "sorting_1P.frames.jsonl",
            "--objects",
            "sorting_1P.objects.json",
            "--oracle",
            "sorting_1P.oracle.json",
            "--out",
            "pred.jsonl",
            "--stats",
            "stats.json",
            "--frame-by-frame",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let stats: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["calls"], stats["frames"]);
    assert_eq!(stats["triggers"], 0);
}

#[test]
fn script_files_name_outputs_by_stem() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = grounding(d, &["scripts", "--out", "scripts"]);
    assert!(o.status.success());
    assert_eq!(fs::read_dir(d.join("scripts")).unwrap().count(), 17);
    fs::copy(d.join("scripts/pouring_2P.json"), d.join("my.json")).unwrap();
    let o = grounding(d, &["simulate", "--script", "my.json", "--out", "out"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("out/my.frames.jsonl").exists());
    fs::write(d.join("broken.json"), "{\"name\":1}").unwrap();
    assert_eq!(
        grounding(d, &["simulate", "--script", "broken.json"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn suite_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = grounding(dir.path(), &["suite", "--json", "suite.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("Overall GS 1.000"), "{text}");
    assert!(text.contains("16 recordings"));
    let v: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("suite.json")).unwrap()).unwrap();
    assert_eq!(v["runs"].as_array().unwrap().len(), 16);
}

#[test]
fn help_documents_file_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let o = grounding(dir.path(), &["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for needle in [
        "frames.jsonl",
        "objects.json",
        "events.jsonl",
        "oracle.json",
        "Exit codes",
    ] {
        assert!(text.contains(needle), "{needle}");
    }
}

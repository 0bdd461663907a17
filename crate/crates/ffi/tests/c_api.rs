use std::ffi::{CStr, CString};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use grounding_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn take(p: *mut std::ffi::c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { grd_string_free(p) };
    s
}

fn last_error() -> String {
    let p = grd_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Sim {
    _dir: tempfile::TempDir,
    events: String,
    frames: String,
    objects: String,
    oracle: String,
}

fn simulate(name: &str) -> Sim {
    let dir = tempfile::tempdir().unwrap();
    let st = unsafe {
        grd_simulate_builtin(
            c(name).as_ptr(),
            3,
            c(dir.path().to_str().unwrap()).as_ptr(),
        )
    };
    assert_eq!(st, GrdStatus::Ok);
    let read = |ext: &str| fs::read_to_string(dir.path().join(format!("{name}.{ext}"))).unwrap();
    Sim {
        events: read("events.jsonl"),
        frames: read("frames.jsonl"),
        objects: read("objects.json"),
        oracle: read("oracle.json"),
        _dir: dir,
    }
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(grd_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn scripted_run_reproduces_ground_truth() {
    let sim = simulate("sorting_example_s3");
    let mut out = ptr::null_mut();
    let st = unsafe {
        grd_run_scripted(
            c(&sim.frames).as_ptr(),
            c(&sim.objects).as_ptr(),
            c(&sim.oracle).as_ptr(),
            2,
            &mut out,
        )
    };
    assert_eq!(st, GrdStatus::Ok, "{}", last_error());
    let preds = take(out);
    assert_eq!(preds.lines().count(), 3);

    let mut summary = GrdMatchSummary::default();
    let st = unsafe {
        grd_match_events(
            c(&sim.events).as_ptr(),
            c(&preds).as_ptr(),
            5.0,
            &mut summary,
        )
    };
    assert_eq!(st, GrdStatus::Ok, "{}", last_error());
    assert_eq!(
        (
            summary.true_positives,
            summary.false_positives,
            summary.false_negatives
        ),
        (3, 0, 0)
    );
    assert_eq!(summary.gs, 1.0);

    let mut report = ptr::null_mut();
    let st = unsafe {
        grd_score_report(
            c(&sim.events).as_ptr(),
            c(&preds).as_ptr(),
            5.0,
            &mut report,
        )
    };
    assert_eq!(st, GrdStatus::Ok, "{}", last_error());
    let report: serde_json::Value = serde_json::from_str(&take(report)).unwrap();
    assert_eq!(report["overall"]["gs"], 1.0);
}

#[test]
fn empty_prediction_scores_zero() {
    let sim = simulate("sorting_example_s3");
    let mut s = GrdMatchSummary::default();
    let st = unsafe { grd_match_events(c(&sim.events).as_ptr(), c("").as_ptr(), 5.0, &mut s) };
    assert_eq!(st, GrdStatus::Ok);
    assert_eq!((s.true_positives, s.false_negatives), (0, 3));
    assert_eq!((s.precision, s.recall, s.gs), (1.0, 0.0, 0.0));
}

#[test]
fn memory_round_trips_through_snapshot() {
    let sim = simulate("sorting_example_s3");
    let mem = grd_memory_new();
    unsafe {
        for actor in ["person_1", "person_2", "robot_1"] {
            let st = grd_memory_insert_actor(
                mem,
                c(actor).as_ptr(),
                c(&format!("{actor}.png")).as_ptr(),
                0.0,
            );
            assert_eq!(st, GrdStatus::Ok, "{}", last_error());
        }
        for k in 1..=3u32 {
            let mut idx = 0;
            let st = grd_memory_register_object(
                mem,
                c(&format!("object_{k}.png")).as_ptr(),
                0.0,
                &mut idx,
            );
            assert_eq!(st, GrdStatus::Ok);
            assert_eq!(idx, k);
        }
        for line in sim.events.lines().skip(1) {
            assert_eq!(
                grd_memory_append_event(mem, c(line).as_ptr()),
                GrdStatus::Ok,
                "{}",
                last_error()
            );
        }
        let mut n = 0;
        assert_eq!(grd_memory_event_count(mem, &mut n), GrdStatus::Ok);
        assert_eq!(n, 3);

        let mut events = ptr::null_mut();
        assert_eq!(grd_memory_events(mem, &mut events), GrdStatus::Ok);
        let events = take(events);
        let expected: Vec<&str> = sim.events.lines().skip(1).collect();
        assert_eq!(events.lines().collect::<Vec<_>>(), expected);

        let mut snap = ptr::null_mut();
        assert_eq!(grd_memory_snapshot(mem, &mut snap), GrdStatus::Ok);
        let snap = take(snap);
        let mut copy = ptr::null_mut();
        assert_eq!(
            grd_memory_load(c(&snap).as_ptr(), &mut copy),
            GrdStatus::Ok,
            "{}",
            last_error()
        );
        let mut snap2 = ptr::null_mut();
        assert_eq!(grd_memory_snapshot(copy, &mut snap2), GrdStatus::Ok);
        assert_eq!(take(snap2), snap);

        grd_memory_free(copy);
        grd_memory_free(mem);
    }
}

#[test]
fn memory_rejects_bad_input() {
    let mem = grd_memory_new();
    unsafe {
        let st = grd_memory_insert_actor(mem, c("ghost_1").as_ptr(), c("x.png").as_ptr(), 0.0);
        assert_eq!(st, GrdStatus::InvalidInput);
        assert!(last_error().contains("ghost_1"));

        let tuple = r#"{"actor":"person_9","action":"grasp","object":"object_1","relation":null,"robot_interaction":false,"time":1.0}"#;
        assert_eq!(
            grd_memory_append_event(mem, c(tuple).as_ptr()),
            GrdStatus::InvalidInput
        );
        assert_eq!(
            grd_memory_append_event(mem, c("{").as_ptr()),
            GrdStatus::Parse
        );

        assert_eq!(
            grd_memory_insert_actor(
                ptr::null_mut(),
                c("person_1").as_ptr(),
                c("a").as_ptr(),
                0.0
            ),
            GrdStatus::NullArgument
        );
        assert_eq!(
            grd_memory_insert_actor(mem, ptr::null(), c("a").as_ptr(), 0.0),
            GrdStatus::NullArgument
        );
        assert_eq!(
            grd_memory_load(c("not json").as_ptr(), &mut ptr::null_mut()),
            GrdStatus::Parse
        );

        let bad = [0xffu8, 0];
        assert_eq!(
            grd_memory_insert_actor(mem, bad.as_ptr().cast(), c("a").as_ptr(), 0.0),
            GrdStatus::InvalidUtf8
        );

        assert_eq!(
            grd_memory_insert_actor(mem, c("person_1").as_ptr(), c("a").as_ptr(), 0.0),
            GrdStatus::Ok
        );
        assert!(grd_last_error().is_null(), "success clears the error");
        grd_memory_free(mem);
        grd_memory_free(ptr::null_mut());
        grd_string_free(ptr::null_mut());
    }
}

#[test]
fn trigger_fires_once_per_stable_change() {
    let sim = simulate("sorting_example_s3");
    let mut trig = ptr::null_mut();
    unsafe {
        assert_eq!(grd_trigger_new(0, &mut trig), GrdStatus::InvalidInput);
        assert_eq!(grd_trigger_new(2, &mut trig), GrdStatus::Ok);
        let mut fired = Vec::new();
        for line in sim.frames.lines() {
            let mut out = ptr::null_mut();
            assert_eq!(
                grd_trigger_observe(trig, c(line).as_ptr(), &mut out),
                GrdStatus::Ok,
                "{}",
                last_error()
            );
            let arr: Vec<serde_json::Value> = serde_json::from_str(&take(out)).unwrap();
            fired.extend(arr);
        }
        assert_eq!(fired.len(), 3);
        assert_eq!(fired[0]["actor"], "person_1");
        assert_eq!(fired[0]["action"], "handover");

        assert_eq!(grd_trigger_reset(trig), GrdStatus::Ok);
        let mut out = ptr::null_mut();
        assert_eq!(
            grd_trigger_observe(trig, c("{}").as_ptr(), &mut out),
            GrdStatus::Parse
        );
        assert!(out.is_null());
        grd_trigger_free(trig);
    }
}

#[test]
fn unknown_builtin_and_bad_delta() {
    let dir = tempfile::tempdir().unwrap();
    let st = unsafe {
        grd_simulate_builtin(
            c("nope").as_ptr(),
            0,
            c(dir.path().to_str().unwrap()).as_ptr(),
        )
    };
    assert_eq!(st, GrdStatus::InvalidInput);
    assert!(last_error().contains("nope"));
    let mut s = GrdMatchSummary::default();
    let st = unsafe { grd_match_events(c("").as_ptr(), c("").as_ptr(), -1.0, &mut s) };
    assert_eq!(st, GrdStatus::InvalidInput);
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/grounding.h")
}

#[test]
fn header_declares_every_export() {
    let h = fs::read_to_string(header()).unwrap();
    let src = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 20);
    for name in exports {
        assert!(
            h.contains(&format!("{name}(")),
            "{name} missing from header"
        );
    }
    for ty in [
        "GrdStatus",
        "GrdMatchSummary",
        "GrdMemory",
        "GrdTrigger",
        "GRD_STATUS_PANIC = 7",
    ] {
        assert!(h.contains(ty), "{ty} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    let out = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(header())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|cc| {
            Command::new(cc)
                .arg("--version")
                .output()
                .is_ok_and(|o| o.status.success())
        })
        .ok_or(())
}

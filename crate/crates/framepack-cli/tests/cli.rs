//! Black-box tests of the `framepack` binary: output shapes, golden
//! manifests, and the exit-code contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use framepack::vision::{write_frame_binary, Frame};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_framepack"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(output: &Output) -> serde_json::Value {
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    serde_json::from_slice(&output.stdout).expect("stdout is JSON")
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

/// Shared fixture tree in the library crate.
fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .parent()
        .unwrap()
        .join("framepack/tests/fixtures")
}

fn golden(rel: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .parent()
        .unwrap()
        .join("framepack/tests/golden")
        .join(rel);
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn plan_budget_presets() {
    let plan = stdout_json(&run(&["plan-budget", "--preset", "llama2"]));
    assert_eq!(plan["max_frames"], 45);
    assert_eq!(plan["context_window"], 4096);
    assert_eq!(plan["subtitle_budget"], 1000);

    let plan = stdout_json(&run(&["plan-budget", "--preset", "mistral"]));
    assert_eq!(plan["max_frames"], 90);
    assert_eq!(plan["context_window"], 8192);
}

#[test]
fn plan_budget_explicit_fields() {
    let plan = stdout_json(&run(&[
        "plan-budget", "--context", "130", "--tpf", "64", "--sub", "32", "--out", "33",
    ]));
    assert_eq!(plan["max_frames"], 1);
}

#[test]
fn plan_budget_override_recomputes_preset() {
    // Touching any field drops mistral's pinned count and recomputes.
    let plan = stdout_json(&run(&["plan-budget", "--preset", "mistral", "--sub", "1000"]));
    assert_eq!(plan["max_frames"], (8192 - 1000 - 1432) / 64);
}

#[test]
fn plan_budget_exit_codes() {
    let out = run(&["plan-budget", "--context", "64", "--tpf", "64", "--sub", "32", "--out", "33"]);
    assert_eq!(exit_code(&out), 2, "infeasible budget");

    let out = run(&["plan-budget", "--context", "130"]);
    assert_eq!(exit_code(&out), 64, "missing fields");

    let out = run(&["plan-budget", "--preset", "gpt7"]);
    assert_eq!(exit_code(&out), 64, "unknown preset");

    let out = run(&["plan-budget", "--help"]);
    assert_eq!(exit_code(&out), 0, "help is not an error");

    let out = run(&["no-such-command"]);
    assert_eq!(exit_code(&out), 64);
}

#[test]
fn sample_frames_centered_spacing() {
    let plan = stdout_json(&run(&["sample-frames", "--total", "100", "--max", "4"]));
    assert_eq!(plan["indices"], serde_json::json!([12, 37, 62, 87]));
    assert_eq!(plan["total_frames"], 100);

    let plan = stdout_json(&run(&["sample-frames", "--total", "10", "--max", "3", "--fps", "2"]));
    assert_eq!(plan["timestamps_ms"], serde_json::json!([500, 2500, 4000]));
}

#[test]
fn parse_subs_emits_cue_array() {
    let path = fixtures().join("subs/basic.srt");
    let cues = stdout_json(&run(&["parse-subs", "--format", "srt", path.to_str().unwrap()]));
    let cues = cues.as_array().unwrap();
    assert_eq!(cues.len(), 3);
    assert_eq!(cues[0]["start_ms"], 1000);
    assert_eq!(cues[0]["text"], "Hello there.");
}

#[test]
fn parse_subs_exit_codes() {
    let bad = fixtures().join("subs/bad_timecode.srt");
    let out = run(&["parse-subs", "--format", "srt", bad.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 65, "malformed data");
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = run(&["parse-subs", "--format", "srt", "/nonexistent/x.srt"]);
    assert_eq!(exit_code(&out), 66, "missing file");
}

#[test]
#[cfg(unix)]
fn closed_stdout_pipe_is_not_a_panic() {
    // `framepack ... | head` closes stdout early; the process must die on
    // SIGPIPE without a panic message, leaving head's exit code at 0. The
    // index list is megabytes long, so the writer cannot finish before head
    // exits and the pipe buffer fills.
    let pipeline = format!(
        "{} sample-frames --total 1000000 --max 100000 | head -c 16",
        env!("CARGO_BIN_EXE_framepack"),
    );
    let out = Command::new("sh")
        .args(["-c", &pipeline])
        .output()
        .expect("shell runs");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(0), "stderr: {stderr}");
    assert!(!stderr.contains("panicked"), "stderr: {stderr}");
}

#[test]
fn pack_matches_frozen_golden() {
    let frames = fixtures().join("frames");
    let subs = fixtures().join("two_frame.srt");
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = dir.path().join("manifest.json");

    let out = run(&[
        "pack",
        "--frames-dir", frames.to_str().unwrap(),
        "--subs", subs.to_str().unwrap(),
        "--preset", "llama2",
        "--instruction", "Briefly describe these video",
        "--encoder-seed", "7",
        "--projector-seed", "9",
        "--out", manifest_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let expected = golden("manifest_2frame.json");
    assert_eq!(String::from_utf8_lossy(&out.stdout), expected);
    assert_eq!(std::fs::read_to_string(manifest_path).unwrap(), expected);
}

#[test]
fn pack_embedding_sidecar_layout() {
    let frames = fixtures().join("frames");
    let dir = tempfile::tempdir().unwrap();
    let sidecar = dir.path().join("embeddings.bin");

    let out = run(&[
        "pack",
        "--frames-dir", frames.to_str().unwrap(),
        "--preset", "llama2",
        "--instruction", "x",
        "--embeddings", sidecar.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let bytes = std::fs::read(sidecar).unwrap();
    // Header (frames, rows, cols) + 2 frames of 64x32 f64.
    assert_eq!(bytes.len(), 12 + 2 * 64 * 32 * 8);
    assert_eq!(u32::from_le_bytes(bytes[0..4].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 64);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 32);
}

#[test]
fn pack_sampled_instruction_is_deterministic() {
    let frames = fixtures().join("frames");
    let args = ["pack", "--frames-dir", frames.to_str().unwrap(), "--preset", "llama2"];
    let first = run(&args);
    let second = run(&args);
    assert!(first.status.success());
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn pack_rejects_one_frame_too_many() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..46 {
        let path = dir.path().join(format!("frame_{i:04}.frame"));
        write_frame_binary(&path, &Frame::constant(0.25, 0)).unwrap();
    }
    let out = run(&[
        "pack",
        "--frames-dir", dir.path().to_str().unwrap(),
        "--preset", "llama2",
        "--instruction", "x",
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("45"));
}

#[test]
fn pack_error_exit_codes() {
    let out = run(&["pack", "--frames-dir", "/nonexistent", "--preset", "llama2"]);
    assert_eq!(exit_code(&out), 66, "missing directory");

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("broken.frame"), b"short").unwrap();
    let out = run(&["pack", "--frames-dir", dir.path().to_str().unwrap(), "--preset", "llama2"]);
    assert_eq!(exit_code(&out), 65, "malformed frame file");

    let empty = tempfile::tempdir().unwrap();
    let out = run(&["pack", "--frames-dir", empty.path().to_str().unwrap(), "--preset", "llama2"]);
    assert_eq!(exit_code(&out), 65, "no frames");

    write_frame_binary(&empty.path().join("f.frame"), &Frame::constant(0.1, 0)).unwrap();
    std::fs::write(empty.path().join("subs.txt"), "whatever").unwrap();
    let out = run(&[
        "pack",
        "--frames-dir", empty.path().to_str().unwrap(),
        "--preset", "llama2",
        "--subs", empty.path().join("subs.txt").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 64, "unknown subtitle extension");
}

#[test]
fn gradcheck_passes_and_reports() {
    let report = stdout_json(&run(&["gradcheck"]));
    assert_eq!(report["seeds"], 20);
    assert_eq!(report["pass"], true);
    assert!(report["projector_max_error"].as_f64().unwrap() < 1e-4);
    assert!(report["lora_max_error"].as_f64().unwrap() < 1e-4);

    // An impossible threshold flips the exit code without changing errors.
    let out = run(&["gradcheck", "--threshold", "1e-30"]);
    assert_eq!(exit_code(&out), 1);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pass"], false);
}

#[test]
fn lora_demo_preset_numbers() {
    let report = stdout_json(&run(&["lora-demo", "--d-model", "4"]));
    assert_eq!(report["r"], 64);
    assert_eq!(report["scaling"], 0.25);
    // Census across both adapters of the layer (queries and values).
    assert_eq!(report["trainable_params"], 2 * (64 * 4 + 4 * 64));
    assert!(report["merge_residual"].as_f64().unwrap() < 1e-10);
}

#[test]
fn judge_parse_round_trip() {
    let parsed = stdout_json(&run(&["judge-parse", "{'pred': 'yes', 'score': 4.8}"]));
    assert_eq!(parsed["pred"], "yes");
    assert_eq!(parsed["score"], 4.8);

    let out = run(&["judge-parse", "no dictionary here"]);
    assert_eq!(exit_code(&out), 65);
}

#[test]
fn eval_stub_metrics_and_parallelism() {
    let dataset = fixtures().join("eval/dataset4.json");
    let script = format!("stub:{}", fixtures().join("eval/stub_script.json").display());

    let report = stdout_json(&run(&[
        "eval", "--dataset", dataset.to_str().unwrap(), "--judge", &script,
        "--parallelism", "1",
    ]));
    assert_eq!(report["n"], 4);
    assert_eq!(report["accuracy"], 75.0);
    assert_eq!(report["mean_score"], 3.0);
    assert_eq!(report["failures"], 0);

    let parallel = stdout_json(&run(&[
        "eval", "--dataset", dataset.to_str().unwrap(), "--judge", &script,
        "--parallelism", "8",
    ]));
    assert_eq!(report, parallel);
}

#[test]
fn eval_flaky_script_recovers_via_retries() {
    let dataset = fixtures().join("eval/dataset4.json");
    let script = format!("stub:{}", fixtures().join("eval/stub_flaky.json").display());
    let report = stdout_json(&run(&[
        "eval", "--dataset", dataset.to_str().unwrap(), "--judge", &script,
    ]));
    assert_eq!(report["accuracy"], 75.0);
    assert_eq!(report["failures"], 0);
}

#[test]
fn eval_writes_report_file() {
    let dataset = fixtures().join("eval/dataset4.json");
    let script = format!("stub:{}", fixtures().join("eval/stub_script.json").display());
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("report.json");
    let out = run(&[
        "eval", "--dataset", dataset.to_str().unwrap(), "--judge", &script,
        "--out", out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_path).unwrap()).unwrap();
    assert_eq!(report["accuracy"], 75.0);
    assert_eq!(report["per_item"].as_array().unwrap().len(), 4);
}

#[test]
fn eval_mcq_without_judge() {
    let dataset = fixtures().join("eval/dataset_mcq.json");
    let report = stdout_json(&run(&["eval", "--dataset", dataset.to_str().unwrap()]));
    assert_eq!(report["n"], 3);
    let accuracy = report["accuracy"].as_f64().unwrap();
    assert!((accuracy - 200.0 / 3.0).abs() < 1e-9);
    assert_eq!(report["mean_score"], serde_json::Value::Null);
}

#[test]
fn eval_exit_codes() {
    let eval_dir = fixtures().join("eval");
    let script = format!("stub:{}", eval_dir.join("stub_script.json").display());
    let dataset4 = eval_dir.join("dataset4.json");

    let allfail = format!("stub:{}", eval_dir.join("stub_allfail.json").display());
    let out = run(&["eval", "--dataset", dataset4.to_str().unwrap(), "--judge", &allfail]);
    assert_eq!(exit_code(&out), 69, "judge unreachable for every item");
    // The report is still produced; failure detail lives in per_item.
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["failures"], 4);

    let mixed = eval_dir.join("dataset_mixed.json");
    let out = run(&["eval", "--dataset", mixed.to_str().unwrap(), "--judge", &script]);
    assert_eq!(exit_code(&out), 65, "mixed dataset");

    let bad = eval_dir.join("dataset_bad.json");
    let out = run(&["eval", "--dataset", bad.to_str().unwrap(), "--judge", &script]);
    assert_eq!(exit_code(&out), 65, "schema error");

    let out = run(&["eval", "--dataset", "/nonexistent/d.json", "--judge", &script]);
    assert_eq!(exit_code(&out), 66, "missing dataset");

    let out = run(&["eval", "--dataset", dataset4.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 64, "open-ended items need a judge");

    let out = run(&["eval", "--dataset", dataset4.to_str().unwrap(), "--judge", "telnet"]);
    assert_eq!(exit_code(&out), 64, "unknown judge kind");

    let out = run(&[
        "eval", "--dataset", dataset4.to_str().unwrap(), "--judge", &script,
        "--parallelism", "0",
    ]);
    assert_eq!(exit_code(&out), 64, "zero parallelism");
}

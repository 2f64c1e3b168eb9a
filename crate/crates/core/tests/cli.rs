use std::path::Path;
use std::process::Command;

use domlens::cli::{run_with, EXIT_IO, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION};

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(dir: &Path, args: &[&str]) -> Run {
    let mut argv = vec!["domlens".to_string()];
    argv.extend(args.iter().map(|a| {
        if a.ends_with(".json") || a.ends_with(".jsonl") || a.ends_with("_dir") {
            dir.join(a).to_string_lossy().into_owned()
        } else {
            a.to_string()
        }
    }));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(argv, &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn setup(dir: &Path, maps: bool) {
    let r = run(
        dir,
        &[
            "model",
            "new",
            "--layers",
            "4",
            "--hidden",
            "16",
            "--heads",
            "2",
            "--ffn",
            "16",
            "--vocab-size",
            "40",
            "--grid-h",
            "2",
            "--grid-w",
            "2",
            "--seed",
            "5",
            "--out",
            "model.json",
        ],
    );
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let mut args = vec![
        "trace",
        "generate",
        "--model",
        "model.json",
        "--max-new",
        "6",
        "--topk",
        "5",
        "--out",
        "trace.jsonl",
    ];
    if !maps {
        args.push("--no-attention-maps");
    }
    let r = run(dir, &args);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
}

#[test]
fn validate_prints_ok() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path(), true);
    let r = run(d.path(), &["trace", "validate", "--trace", "trace.jsonl"]);
    assert_eq!((r.code, r.stdout.as_str()), (EXIT_OK, "OK\n"));
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["trace", "validate"],
        &["correct", "--trace", "x.jsonl", "--validation", "bogus"],
    ] {
        let r = run(d.path(), args);
        assert_eq!(r.code, EXIT_USAGE, "{args:?}");
        assert!(!r.stderr.is_empty());
    }
    let r = run(d.path(), &["--help"]);
    assert_eq!(r.code, EXIT_OK);
    assert!(r.stdout.contains("decode-vdc"));
}

#[test]
fn missing_file_exits_three() {
    let d = tempfile::tempdir().unwrap();
    let r = run(d.path(), &["trace", "validate", "--trace", "absent.jsonl"]);
    assert_eq!(r.code, EXIT_IO);
    assert!(r.stderr.starts_with("error:"));
}

#[test]
fn invalid_trace_exits_two() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path(), true);
    let text = std::fs::read_to_string(d.path().join("trace.jsonl")).unwrap();
    let broken = text.replacen("\"version\":1", "\"version\":2", 1);
    std::fs::write(d.path().join("v2.jsonl"), broken).unwrap();
    let r = run(d.path(), &["trace", "validate", "--trace", "v2.jsonl"]);
    assert_eq!(r.code, EXIT_VALIDATION);
    assert!(r.stderr.contains('2'), "{}", r.stderr);

    let truncated = &text[..text.len() - 20];
    std::fs::write(d.path().join("cut.jsonl"), truncated).unwrap();
    let r = run(d.path(), &["trace", "validate", "--trace", "cut.jsonl"]);
    assert_eq!(r.code, EXIT_VALIDATION);
    assert!(r.stderr.contains("truncated"), "{}", r.stderr);
}

#[test]
fn gate_heatmaps_need_grids() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path(), false);
    let r = run(d.path(), &["analyze", "gate", "--trace", "trace.jsonl"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let v: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["ratios"]["rows"], 4);
    let r = run(
        d.path(),
        &["analyze", "gate", "--trace", "trace.jsonl", "--heatmaps"],
    );
    assert_eq!(r.code, EXIT_VALIDATION);
    assert!(r.stderr.contains("grid"), "{}", r.stderr);
}

#[test]
fn stage_override_is_checked() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path(), true);
    let ok = run(
        d.path(),
        &[
            "analyze",
            "gate",
            "--trace",
            "trace.jsonl",
            "--heatmaps",
            "--stages",
            "A:1-2,B:3-4",
        ],
    );
    assert_eq!(ok.code, EXIT_OK, "{}", ok.stderr);
    let v: serde_json::Value = serde_json::from_str(&ok.stdout).unwrap();
    assert_eq!(v["inter_stage"].as_array().unwrap().len(), 1);
    let bad = run(
        d.path(),
        &[
            "analyze",
            "gate",
            "--trace",
            "trace.jsonl",
            "--stages",
            "A:1-2,B:4-4",
        ],
    );
    assert_eq!(bad.code, EXIT_VALIDATION);
}

#[test]
fn skip_layers_must_be_below_depth() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path(), true);
    for cmd in [
        &["correct", "--trace", "trace.jsonl"][..],
        &["analyze", "sad", "--trace", "trace.jsonl"],
    ] {
        let mut args = cmd.to_vec();
        args.extend(["--skip-layers", "4"]);
        assert_eq!(run(d.path(), &args).code, EXIT_VALIDATION, "{args:?}");
        args.pop();
        args.push("3");
        assert_eq!(run(d.path(), &args).code, EXIT_OK, "{args:?}");
    }
}

#[test]
fn sad_and_correct_agree() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path(), true);
    let sad = run(
        d.path(),
        &[
            "analyze",
            "sad",
            "--trace",
            "trace.jsonl",
            "--skip-layers",
            "1",
        ],
    );
    let cor = run(
        d.path(),
        &[
            "correct",
            "--trace",
            "trace.jsonl",
            "--skip-layers",
            "1",
            "--validation",
            "attn-ffn",
        ],
    );
    let sad: serde_json::Value = serde_json::from_str(&sad.stdout).unwrap();
    let cor: serde_json::Value = serde_json::from_str(&cor.stdout).unwrap();
    for (s, c) in sad.as_array().unwrap().iter().zip(cor.as_array().unwrap()) {
        assert_eq!(
            s["sad_flag"].as_bool().unwrap(),
            !c["validated"].as_bool().unwrap()
        );
        assert_eq!(
            c["validated"].as_bool().unwrap(),
            c["replacement"].is_null()
        );
    }
}

#[test]
fn explicit_prompt_and_layer_only_validation() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path(), true);
    let prompt = "1,2,3,4,5,6,7,8,9";
    let g = run(
        d.path(),
        &[
            "trace",
            "generate",
            "--model",
            "model.json",
            "--prompt",
            prompt,
            "--max-new",
            "5",
            "--topk",
            "5",
        ],
    );
    assert_eq!(g.code, EXIT_OK, "{}", g.stderr);
    let trace = domlens::read_trace(g.stdout.as_bytes()).unwrap();
    assert_eq!(trace.segments.instruction.len(), 3);
    let v = run(
        d.path(),
        &[
            "decode-vdc",
            "--model",
            "model.json",
            "--prompt",
            prompt,
            "--max-new",
            "5",
            "--topk",
            "5",
            "--validation",
            "layer",
        ],
    );
    assert_eq!(v.code, EXIT_OK, "{}", v.stderr);
    let out: serde_json::Value = serde_json::from_str(&v.stdout).unwrap();
    let ids: Vec<usize> = out["corrected_ids"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap() as usize)
        .collect();
    assert_eq!(ids, trace.emitted_ids());

    let short = run(
        d.path(),
        &[
            "trace",
            "generate",
            "--model",
            "model.json",
            "--prompt",
            "1,2,3",
        ],
    );
    assert_eq!(short.code, EXIT_VALIDATION);
}

#[test]
fn chair_from_files() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("lex.json"),
        r#"{"apple":["apple"],"dog":["dog","puppy"]}"#,
    )
    .unwrap();
    std::fs::write(
        d.path().join("corpus.jsonl"),
        "{\"caption\":\"An apple and a puppy\",\"objects\":[\"apple\"]}\n{\"caption\":\"a dog\",\"objects\":[\"dog\"]}\n",
    )
    .unwrap();
    let r = run(
        d.path(),
        &[
            "eval",
            "chair",
            "--corpus",
            "corpus.jsonl",
            "--lexicon",
            "lex.json",
        ],
    );
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let v: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["chair_s"], 0.5);
    assert_eq!(v["chair_i"].as_f64().unwrap(), 1.0 / 3.0);

    std::fs::write(d.path().join("bad.json"), "{}").unwrap();
    let r = run(
        d.path(),
        &[
            "eval",
            "chair",
            "--corpus",
            "corpus.jsonl",
            "--lexicon",
            "bad.json",
        ],
    );
    assert_eq!(r.code, EXIT_VALIDATION);
}

#[test]
fn report_lists_written_files() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path(), true);
    let r = run(
        d.path(),
        &["report", "--trace", "trace.jsonl", "--out-dir", "out_dir"],
    );
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let summary: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    let files = summary["files"].as_array().unwrap();
    for f in files {
        assert!(
            d.path().join("out_dir").join(f.as_str().unwrap()).is_file(),
            "{f}"
        );
    }
    assert!(
        files.iter().any(|f| f == "stage_avg_1_global.csv"),
        "{files:?}"
    );
    assert!(summary["skipped"].as_array().unwrap().is_empty());
    let ratios = std::fs::read_to_string(d.path().join("out_dir/ratios.csv")).unwrap();
    assert!(ratios.starts_with("layer,system,vision,instruction,output\n1,"));
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_domlens");
    let st = Command::new(bin).arg("--version").output().unwrap();
    assert!(st.status.success());
    assert!(String::from_utf8_lossy(&st.stdout).starts_with("domlens "));
    let st = Command::new(bin)
        .args(["trace", "validate", "--trace", "/nonexistent/x.jsonl"])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(EXIT_IO));
    let st = Command::new(bin).arg("nope").output().unwrap();
    assert_eq!(st.status.code(), Some(EXIT_USAGE));
}

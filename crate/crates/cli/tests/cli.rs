use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_attnprof"));
    c.env_remove("ATTNPROF_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const QUICK: [&str; 4] = ["--iters", "3", "--reported", "2"];

#[test]
fn list_models_prints_the_roster() {
    let o = run(&["list-models"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 7);
    for archetype in ["BERT-like", "Longformer-like", "Nystromformer-like", "HuBERT-like", "L-HuBERT-like", "ViT-like", "Swin-like"] {
        assert!(text.contains(archetype), "{archetype} missing");
    }
}

#[test]
fn cost_piped_into_tipping_point() {
    let cost = run(&["cost", "--models", "text-full,text-sliding", "--metric", "flops", "--grid", "62:3362:60"]);
    assert!(cost.status.success(), "{}", stderr(&cost));
    let sweep: serde_json::Value = serde_json::from_slice(&cost.stdout).unwrap();
    assert_eq!(sweep["records"].as_array().unwrap().len(), 2 * 56);
    assert!(sweep["records"].as_array().unwrap().iter().all(|r| r["source"] == "analytic"));

    let mut child = bin()
        .arg("tipping-point")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(&cost.stdout).unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    let line = stdout(&o);
    let point: f64 = line.trim().rsplit(' ').next().unwrap().parse().unwrap_or_else(|_| panic!("{line}"));
    assert!(point > 512.0 && point <= 3362.0, "{line}");
}

#[test]
fn usage_errors_exit_with_two() {
    let o = run(&["cost", "--metric", "flops"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));

    let o = run(&["sweep", "--models", "text-ful"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("did you mean: text-full"), "{}", stderr(&o));

    let o = run(&["cost", "--models", "text-full", "--metric", "latncy"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("latency"));

    let o = run(&["cost", "--models", "text-full", "--metric", "latency"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["cost", "--models", "text-full,vision-full", "--grid", "1:2:1"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_writes_results_manifest_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let mut args = vec!["sweep", "--models", "text-full,text-nystrom", "--grid", "62:122:60", "--metrics", "latency,memory", "--out", out_s, "--seed", "7"];
    args.extend(QUICK);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("8 new record(s)"));
    let sweep = json(&out.join("sweep.json"));
    assert_eq!(sweep["records"].as_array().unwrap().len(), 8);
    assert!(out.join("sweep.csv").exists());

    let manifest = json(&out.join("run.json"));
    assert_eq!(manifest["command"], "sweep");
    assert_eq!(manifest["models"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["models"][0]["d_model"], 256);
    assert_eq!(manifest["grids"][0]["nominal_tokens"], serde_json::json!([62, 122]));
    assert_eq!(manifest["settings"]["env"]["seed"], 7);
    assert_eq!(manifest["settings"]["env"]["protocol"]["total_iters"], 3);

    let again = run(&args);
    assert!(again.status.success());
    assert!(stderr(&again).contains("0 new record(s), 8 already present"), "{}", stderr(&again));
    assert_eq!(json(&out.join("sweep.json")), sweep);
}

#[test]
fn thread_variable_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let mut args = vec!["profile", "--models", "text-full", "--at", "30", "--metrics", "latency", "--threads", "3", "--out", out.to_str().unwrap()];
    args.extend(QUICK);
    let o = bin().args(&args).env("ATTNPROF_THREADS", "1").output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let rec = &json(&out.join("profile.json"))["records"][0];
    assert_eq!(rec["env"]["threads"], 1);
    assert_eq!(rec["tokens"], 30);

    let o = bin().args(&args).env("ATTNPROF_THREADS", "many").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn measurement_failures_exit_with_one_and_are_kept() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let mut args = vec!["sweep", "--models", "speech-full", "--grid", "0.01:0.51:0.5", "--metrics", "memory", "--out", out.to_str().unwrap()];
    args.extend(QUICK);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let records = json(&out.join("sweep.json"))["records"].as_array().unwrap().clone();
    assert_eq!(records.len(), 2);
    assert!(records[0]["error"].as_str().unwrap().contains("shorter"));
    assert!(records[1].get("error").is_none());
}

#[test]
fn report_from_cost_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cost_dir = dir.path().join("cost");
    let o = run(&["cost", "--models", "speech-full,speech-sliding", "--metrics", "flops,memory", "--grid", "1:20:1", "--out", cost_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let input = cost_dir.join("cost.json");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let rep = dir.path().join(name);
        let o = run(&["report", "--input", input.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(rep);
    }
    let mut svgs = 0;
    for entry in std::fs::read_dir(&outputs[0]).unwrap() {
        let name = entry.unwrap().file_name();
        if name == "run.json" {
            continue;
        }
        let a = std::fs::read(outputs[0].join(&name)).unwrap();
        assert_eq!(a, std::fs::read(outputs[1].join(&name)).unwrap(), "{name:?}");
        if name.to_string_lossy().ends_with(".svg") {
            svgs += 1;
            roxmltree::Document::parse(std::str::from_utf8(&a).unwrap()).unwrap();
        }
    }
    assert!(svgs >= 2);
    let chart = std::fs::read_to_string(outputs[0].join("line_flops_speech_inference_analytic.svg")).unwrap();
    assert!(chart.contains(r#"data-dataset="Librispeech" data-x="615""#));
    let summary = std::fs::read_to_string(outputs[0].join("summary.txt")).unwrap();
    assert!(summary.contains("speech-sliding vs speech-full"));
}

#[test]
fn manifest_argv_regenerates_the_same_output() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let o = run(&["cost", "--models", "vision-full,vision-swin", "--metrics", "flops,params", "--grid", "32:256:32", "--out", first.to_str().unwrap()]);
    assert!(o.status.success());
    let manifest = json(&first.join("run.json"));
    let argv: Vec<String> = manifest["argv"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    let second = dir.path().join("second");
    let mut replay: Vec<String> = argv[1..].to_vec();
    let at = replay.iter().position(|a| a == "--out").unwrap();
    replay[at + 1] = second.to_str().unwrap().to_string();
    let o = bin().args(&replay).output().unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(first.join("cost.json")).unwrap(), std::fs::read(second.join("cost.json")).unwrap());
}

#[test]
fn layerwise_shares_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lw");
    let o = run(&["layerwise", "--models", "text-full", "--at", "100,1000", "--metric", "flops", "--analytic", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let shares = json(&out.join("layerwise_shares.json"));
    let rows = shares.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let total: f64 = r["shares"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    let o = run(&["layerwise", "--at", "100"]);
    assert_eq!(o.status.code(), Some(2));
}

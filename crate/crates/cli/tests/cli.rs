//! End-to-end exercises of the binary: generate, transform, simulate,
//! analyze, compare, and the documented exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mpcmin"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gen_toy(dir: &Path) -> (String, String) {
    let out_dir = dir.join("toy");
    run_ok(bin().args([
        "gen-model",
        "--layers",
        "2",
        "--heads",
        "4",
        "--head-dim",
        "2",
        "--vocab",
        "32",
        "--seed",
        "3",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]));
    (
        out_dir.join("config.json").display().to_string(),
        out_dir.join("weights.mrlw").display().to_string(),
    )
}

#[test]
fn simulate_writes_verified_report_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (config, weights) = gen_toy(dir.path());
    let report1 = dir.path().join("a.json");
    let report2 = dir.path().join("b.json");
    for report in [&report1, &report2] {
        run_ok(bin().args([
            "simulate",
            "--model-config",
            &config,
            "--weights",
            &weights,
            "--backend",
            "rep3pc",
            "--tokens",
            "3",
            "--prompt",
            "1,2,3",
            "--seed",
            "9",
            "--report",
            report.to_str().unwrap(),
        ]));
    }
    let a = std::fs::read(&report1).unwrap();
    let b = std::fs::read(&report2).unwrap();
    assert_eq!(a, b, "identical scenario + seed must be byte-identical");
    let parsed: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(parsed["verified_against_functionality"], true);
    assert_eq!(parsed["scenario"]["backend"], "rep3pc");
    assert!(parsed["cost"]["prefill"]["triple_mults"].as_u64().unwrap() > 0);
}

#[test]
fn transform_flags_echoed_in_report_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (config, weights) = gen_toy(dir.path());
    let report = dir.path().join("r.json");
    run_ok(bin().args([
        "simulate",
        "--model-config",
        &config,
        "--weights",
        &weights,
        "--freeze",
        "1/2",
        "--head-merge",
        "2",
        "--grouping",
        "similar",
        "--lora-rank",
        "2",
        "--tokens",
        "2",
        "--report",
        report.to_str().unwrap(),
    ]));
    let parsed: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let manifest = &parsed["scenario"]["manifest"];
    assert_eq!(manifest["freeze"], "1/2");
    assert_eq!(manifest["head_merge"]["m"], 2);
    assert_eq!(manifest["head_merge"]["grouping"], "similar");
    assert_eq!(manifest["lora"]["rank"], 2);
    assert_eq!(parsed["scenario"]["resolved_config"]["num_heads"], 2);
}

#[test]
fn explicit_permutation_grouping_accepted_and_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let (config, weights) = gen_toy(dir.path());
    let perm = dir.path().join("perm.json");
    std::fs::write(&perm, "[3,1,2,0]").unwrap();
    let report = dir.path().join("r.json");
    run_ok(bin().args([
        "simulate",
        "--model-config",
        &config,
        "--weights",
        &weights,
        "--head-merge",
        "2",
        "--grouping",
        &format!("file:{}", perm.display()),
        "--tokens",
        "2",
        "--report",
        report.to_str().unwrap(),
    ]));
    let parsed: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(
        parsed["scenario"]["manifest"]["head_merge"]["grouping"]["explicit"],
        serde_json::json!([3, 1, 2, 0])
    );
}

#[test]
fn transform_then_simulate_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (config, weights) = gen_toy(dir.path());
    let tdir = dir.path().join("transformed");
    run_ok(bin().args([
        "transform",
        "--model-config",
        &config,
        "--weights",
        &weights,
        "--freeze",
        "1/2",
        "--head-merge",
        "2",
        "--lora-rank",
        "2",
        "--out-dir",
        tdir.to_str().unwrap(),
    ]));
    for f in ["config.json", "weights.mrlw", "manifest.json"] {
        assert!(tdir.join(f).exists(), "missing {f}");
    }
    // pre-transformed weights: pass only the partition, not the transforms
    let report = dir.path().join("r.json");
    run_ok(bin().args([
        "simulate",
        "--model-config",
        tdir.join("config.json").to_str().unwrap(),
        "--weights",
        tdir.join("weights.mrlw").to_str().unwrap(),
        "--freeze",
        "1/2",
        "--tokens",
        "2",
        "--report",
        report.to_str().unwrap(),
    ]));
    let parsed: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(parsed["verified_against_functionality"], true);
}

#[test]
fn analyze_heads_emits_distances_and_grouping() {
    let dir = tempfile::tempdir().unwrap();
    let (config, weights) = gen_toy(dir.path());
    let out = dir.path().join("analysis");
    run_ok(bin().args([
        "analyze-heads",
        "--model-config",
        &config,
        "--weights",
        &weights,
        "--merge",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]));
    let distances: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("distances.json")).unwrap())
            .unwrap();
    let layers = distances.as_array().unwrap();
    assert_eq!(layers.len(), 2);
    assert_eq!(layers[0]["heads"], 4);
    let groupings: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("groupings.json")).unwrap())
            .unwrap();
    assert_eq!(groupings.as_array().unwrap().len(), 2);
    assert_eq!(groupings[0]["merge_factor"], 2);
}

#[test]
fn self_compare_is_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let (config, weights) = gen_toy(dir.path());
    let report = dir.path().join("r.json");
    run_ok(bin().args([
        "simulate",
        "--model-config",
        &config,
        "--weights",
        &weights,
        "--tokens",
        "2",
        "--report",
        report.to_str().unwrap(),
    ]));
    let out_json = dir.path().join("imp.json");
    run_ok(bin().args([
        "compare",
        report.to_str().unwrap(),
        report.to_str().unwrap(),
        "--out",
        out_json.to_str().unwrap(),
    ]));
    let imp: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_json).unwrap()).unwrap();
    for (_, ratios) in imp["stages"].as_object().unwrap() {
        for (_, r) in ratios.as_object().unwrap() {
            assert_eq!(r["value"], 1.0);
            assert_eq!(r["infinite"], false);
        }
    }
}

#[test]
fn exit_codes_for_bad_inputs() {
    // unknown flag: clap reports usage errors with exit code 2
    let out = bin().args(["simulate", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // missing files are configuration errors
    let out = bin()
        .args([
            "simulate",
            "--model-config",
            "/nonexistent/config.json",
            "--weights",
            "/nonexistent/weights.mrlw",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // out-of-vocabulary prompt tokens fail at runtime
    let dir = tempfile::tempdir().unwrap();
    let (config, weights) = gen_toy(dir.path());
    let out = bin()
        .args([
            "simulate",
            "--model-config",
            &config,
            "--weights",
            &weights,
            "--prompt",
            "999",
            "--report",
            dir.path().join("r.json").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab"));
}

#[test]
fn bundled_cost_table_profile_parses_and_applies() {
    let dir = tempfile::tempdir().unwrap();
    let (config, weights) = gen_toy(dir.path());
    let table = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../assets/cost_tables/plain2pc.json");
    let report = dir.path().join("r.json");
    run_ok(bin().args([
        "simulate",
        "--model-config",
        &config,
        "--weights",
        &weights,
        "--cost-table",
        table.to_str().unwrap(),
        "--tokens",
        "2",
        "--report",
        report.to_str().unwrap(),
    ]));
    let parsed: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(parsed["scenario"]["cost_table"]["open_bytes_per_element"]["plain2pc"]
        .as_f64()
        .unwrap()
        > 0.0);
}

#[test]
fn bundled_demo_scenario_verifies() {
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/demo");
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("demo.json");
    run_ok(bin().args([
        "simulate",
        "--model-config",
        demo.join("config.json").to_str().unwrap(),
        "--weights",
        demo.join("weights.mrlw").to_str().unwrap(),
        "--freeze",
        "1/2",
        "--head-merge",
        "2",
        "--tokens",
        "3",
        "--report",
        report.to_str().unwrap(),
    ]));
    let parsed: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(parsed["verified_against_functionality"], true);
    assert_eq!(parsed["tokens"].as_array().unwrap().len(), 3);
}

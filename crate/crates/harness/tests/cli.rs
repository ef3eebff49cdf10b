use std::path::Path;
use std::process::Command;

fn hps(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_hps"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "hps {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("exp.toml");
    std::fs::write(
        &path,
        format!(
            r#"data_dir = "{}"

[table]
name = "emb"
dim = 4
n_keys = 1000
seed = 1

[workload]
n_keys = 1000
zipf_s = 1.1
batch_size = 20
n_batches = 50
seed = 2
update_rate = 2

[cache]
capacity = 128
"#,
            dir.join("data").display()
        ),
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn gen_load_replay_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let trace = dir.path().join("t.bin");
    let trace_s = trace.display().to_string();
    hps(&["gen", "-c", &cfg, "-o", &trace_s]);
    let first = std::fs::read(&trace).unwrap();
    assert_eq!(first.len(), 32 + 8 * 1000);
    hps(&["gen", "-c", &cfg, "-o", &trace_s]);
    assert_eq!(std::fs::read(&trace).unwrap(), first);

    assert!(hps(&["load", "-c", &cfg]).contains("loaded 1000 entries"));
    let report = dir.path().join("r.json");
    let report_s = report.display().to_string();
    let text = hps(&[
        "replay",
        "-c",
        &cfg,
        "--trace",
        &trace_s,
        "--warmup-batches",
        "10",
        "-o",
        &report_s,
    ]);
    assert!(text.contains("L1 (hot cache)"));
    let saved = hps_harness::MetricsReport::load(&report).unwrap();
    assert_eq!(saved.keys_served, 40 * 20);
    assert_eq!(saved.hits.default, 0);
    assert_eq!(hps(&["report", &report_s]), saved.render_text());
}

#[test]
fn plan_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("slots.json");
    std::fs::write(
        &input,
        r#"{"slots":[{"slot_id":0,"table":"a","vocab_size":1000,"dim":16,"hotness":1}],
            "devices":[{"id":0,"memory_budget":100000},{"id":1,"memory_budget":100000}]}"#,
    )
    .unwrap();
    let freq = dir.path().join("f.txt");
    std::fs::write(&freq, "# key count\n1 100\n2 50\nresidual 10\n").unwrap();
    let out = dir.path().join("plan.json");
    let text = hps(&[
        "plan",
        "-i",
        &input.display().to_string(),
        "--strategy",
        "hybrid",
        "--freq",
        &format!("0={}", freq.display()),
        "--hot-budget",
        "128",
        "-o",
        &out.display().to_string(),
    ]);
    assert!(text.contains("all-to-all"));
    let plan =
        hps_core::placement::PlacementPlan::from_json(&std::fs::read_to_string(out).unwrap())
            .unwrap();
    assert_eq!(plan.hot_keys[&0], vec![1, 2]);
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "nonsense = [").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hps"))
        .args(["load", "-c", &p.display().to_string()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

use std::path::Path;
use std::process::{Command, Output};

fn fedbpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedbpt")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    let cfg = serde_json::json!({
        "sub_dim": 10,
        "prompt_tokens": 5,
        "rounds": 2,
        "clients": 3,
        "per_class": 6,
        "test_per_class": 10,
        "seed": 5
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_then_eval_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let o = fedbpt(&["run", "--config", &config, "--rounds", "3", "--r-p", "0.2", "--out", out_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("final accuracy"));
    for f in
        ["metrics.csv", "final_z.json", "config.json", "accuracy.svg", "confusion_round0.json", "confusion_round3.json"]
    {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["rounds"], 3);
    assert_eq!(saved["r_p"], 0.2);

    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let last_accuracy: f64 = csv.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();

    let z = out.join("final_z.json");
    let o = fedbpt(&["eval", "--z", z.to_str().unwrap(), "--config", out.join("config.json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["accuracy"].as_f64().unwrap(), last_accuracy);

    let svg = dir.path().join("plot.svg");
    let o = fedbpt(&["plot", "--csv", out.join("metrics.csv").to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(std::fs::read_to_string(svg).unwrap().contains("polyline"));
}

#[test]
fn eval_rejects_a_foreign_projection() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("run");
    let o = fedbpt(&["run", "--config", &config, "--rounds", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let o = fedbpt(&[
        "run",
        "--config",
        &config,
        "--rounds",
        "1",
        "--seed",
        "6",
        "--out",
        dir.path().join("other").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let o = fedbpt(&[
        "eval",
        "--z",
        out.join("final_z.json").to_str().unwrap(),
        "--config",
        dir.path().join("other/config.json").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("different projection"));
}

#[test]
fn account_reports_exact_ratios() {
    let o = fedbpt(&["account", "--sub-dim", "500", "--local-iterations", "8"]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["trainable_params"], 500);
    assert_eq!(report["uplink_floats"], 509);
    assert_eq!(report["downlink_floats"], 500 + 500 * 500 + 1);
    assert_eq!(report["trainable_bytes"], 4000);
    let ratios: Vec<u64> =
        report["baselines"].as_array().unwrap().iter().map(|b| b["exact_ratio"].as_u64().unwrap()).collect();
    assert_eq!(ratios, vec![102, 30_000]);

    let o = fedbpt(&["account", "--sub-dim", "10", "--aggregator", "fed_avg_bbt", "--baseline", "tiny=1_000"]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["uplink_floats"], 10 + 8 + 1 + 1 + 100);
    assert_eq!(report["baselines"][0]["exact_ratio"], 100);
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = fedbpt(&["run", "--config", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: reading config"));

    let config = write_config(dir.path());
    let o = fedbpt(&["run", "--config", &config, "--r-p", "1.5", "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let o = fedbpt(&["run", "--config", &config, "--oracle", "remote", "--endpoint", "http://127.0.0.1:9"]);
    assert!(!o.status.success());

    let o = fedbpt(&["run", "--aggregator", "fedsgd"]);
    assert!(!o.status.success());

    let bad_csv = dir.path().join("bad.csv");
    std::fs::write(&bad_csv, "not,a,metrics,file\n").unwrap();
    let o = fedbpt(&["plot", "--csv", bad_csv.to_str().unwrap()]);
    assert!(!o.status.success());
}

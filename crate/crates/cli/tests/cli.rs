use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn flowuq(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowuq"))
        .env_remove("FLOWUQ_WORKERS")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = flowuq(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Baseline calibration of the bundled cross-section.
fn baseline_params(dir: &Path) -> PathBuf {
    let cal = dir.join("cal");
    ok(&cal, &["calibrate", "--flows", s(&data("flows.csv")), "--distances", s(&data("distances.csv")), "--sigma2", "0.05"]);
    cal.join("params.json")
}

fn uq_args<'a>(params: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["uq", "--params", params, "--b", "200", "--seed", "11"];
    v.extend_from_slice(extra);
    v
}

fn scenario() -> Vec<String> {
    ["--flows", "flows.csv", "--costs", "costs.csv", "--counterfactual", "counterfactual.csv"]
        .iter()
        .map(|a| if a.ends_with(".csv") { s(&data(a)).to_string() } else { a.to_string() })
        .collect()
}

#[test]
fn mirror_calibration_reports_missing_values() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(
        dir.path(),
        &["calibrate", "--mirror", s(&data("mirror.csv")), "--flows", s(&data("flows.csv")), "--distances", s(&data("distances.csv"))],
    );
    for f in ["params.json", "flows.csv", "calibration.json", "normality_histogram.csv", "gravity_plot.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    // The bundled panel has one dyad with no second report and two gaps.
    let report = json(&dir.path().join("calibration.json"));
    assert_eq!(report["na_dyads_copied"], 1);
    assert_eq!(report["na_entries_zeroed"], 2);
    assert_eq!(report["period"], 2007);
    assert!(String::from_utf8_lossy(&o.stderr).contains("1 all-missing dyad reports copied"));
}

#[test]
fn handmade_panel_na_counts() {
    let dir = tempfile::tempdir().unwrap();
    let labels = ["A", "B", "C", "D", "E"];
    let mut panel = String::from("origin,destination,year,flow_report1,flow_report2\n");
    let mut dist = String::from("origin,destination,distance\n");
    for (i, o) in labels.iter().enumerate() {
        for (j, d) in labels.iter().enumerate() {
            if i == j {
                continue;
            }
            dist.push_str(&format!("{o},{d},{}\n", 1.0 + (i as f64 - j as f64).abs() + 0.1 * (i * j) as f64));
            for year in [2010, 2011, 2012] {
                let v = (10.0 - (i as f64 - j as f64).abs()) * (1.0 + 0.01 * (year - 2010) as f64) * (1.0 + 0.03 * i as f64);
                let (r1, r2) = match (o, d, year) {
                    // Every second report missing: copied from the first.
                    (&"A", &"B", _) => (format!("{v}"), String::new()),
                    // Both missing in one period: zeroed twice.
                    (&"C", &"D", 2011) => ("NA".to_string(), String::new()),
                    // One isolated gap.
                    (&"E", &"A", 2012) => (format!("{v}"), "nan".to_string()),
                    _ => (format!("{v}"), format!("{}", v * 1.02)),
                };
                panel.push_str(&format!("{o},{d},{year},{r1},{r2}\n"));
            }
        }
    }
    let (pp, dp) = (dir.path().join("panel.csv"), dir.path().join("dist.csv"));
    std::fs::write(&pp, panel).unwrap();
    std::fs::write(&dp, dist).unwrap();
    let o = flowuq(&dir.path().join("out"), &["calibrate", "--mirror", s(&pp), "--distances", s(&dp)]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("1 all-missing dyad reports copied from the other side, 3 entries set to zero"), "{err}");
}

#[test]
fn missing_and_malformed_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = flowuq(dir.path(), &["estimate", "--flows", "/no/such/file.csv", "--costs", s(&data("costs.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "origin,destination,flow\nA,B,x\n").unwrap();
    let o = flowuq(dir.path(), &["estimate", "--flows", s(&bad), "--costs", s(&data("costs.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 2"));
}

#[test]
fn collinear_costs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let flat = dir.path().join("flat.csv");
    let text = std::fs::read_to_string(data("costs.csv")).unwrap();
    let mut out = String::new();
    for (k, line) in text.lines().enumerate() {
        if k == 0 {
            out.push_str(line);
        } else {
            let mut f: Vec<&str> = line.split(',').collect();
            f[2] = "2.0";
            out.push_str(&f.join(","));
        }
        out.push('\n');
    }
    std::fs::write(&flat, out).unwrap();
    let o = flowuq(dir.path(), &["estimate", "--flows", s(&data("flows.csv")), "--costs", s(&flat)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn failing_draws_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    // Elasticity draws straddle zero, so many counterfactuals are undefined.
    let o = flowuq(
        dir.path(),
        &[
            "uq", "--mode", "only-ee", "--flows", s(&data("flows.csv")), "--counterfactual", s(&data("counterfactual.csv")),
            "--epsilon", "0.5", "--epsilon-var", "1.0", "--b", "200",
        ],
    );
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn uq_is_byte_identical_across_workers_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let params = baseline_params(dir.path());
    let sc = scenario();
    let mut outputs = Vec::new();
    for (k, w) in ["1", "4", "4"].iter().enumerate() {
        let out = dir.path().join(format!("run{k}"));
        let mut args = uq_args(s(&params), &["--workers", w]);
        args.extend(sc.iter().map(String::as_str));
        ok(&out, &args);
        outputs.push((std::fs::read(out.join("draws.csv")).unwrap(), std::fs::read(out.join("intervals.json")).unwrap()));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn workers_default_comes_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let params = baseline_params(dir.path());
    let mut args = uq_args(s(&params), &[]);
    let sc = scenario();
    args.extend(sc.iter().map(String::as_str));
    let o = Command::new(env!("CARGO_BIN_EXE_flowuq"))
        .env("FLOWUQ_WORKERS", "3")
        .arg("--out")
        .arg(dir.path().join("w"))
        .args(&args)
        .output()
        .unwrap();
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("on 3 workers"), "{err}");
}

fn widths(path: &Path) -> Vec<f64> {
    let v = json(path);
    v["outcomes"].as_array().unwrap().iter().map(|o| o["hi"].as_f64().unwrap() - o["lo"].as_f64().unwrap()).collect()
}

#[test]
fn mode_ladder_nests_widths() {
    let dir = tempfile::tempdir().unwrap();
    let params = baseline_params(dir.path());
    let sc = scenario();
    let mut w = Vec::new();
    for mode in ["only-ee", "only-me", "ee-me"] {
        let out = dir.path().join(mode);
        let mut args = uq_args(s(&params), &["--mode", mode]);
        args.extend(sc.iter().map(String::as_str));
        ok(&out, &args);
        let v = json(&out.join("intervals.json"));
        assert_eq!(v["mode"], mode);
        w.push(widths(&out.join("intervals.json")));
    }
    for k in 0..w[2].len() {
        assert!(w[0][k] <= w[2][k] && w[1][k] <= w[2][k], "outcome {k}: {:?}", (w[0][k], w[1][k], w[2][k]));
    }
}

#[test]
fn constant_model_gives_degenerate_interval() {
    let dir = tempfile::tempdir().unwrap();
    let params = baseline_params(dir.path());
    let flows = data("flows.csv");
    let args = uq_args(
        s(&params),
        &["--flows", s(&flows), "--model", "constant", "--constant", "1.5,-2", "--epsilon", "5", "--epsilon-var", "0.1"],
    );
    ok(&dir.path().join("c"), &args);
    let v = json(&dir.path().join("c/intervals.json"));
    for (o, c) in v["outcomes"].as_array().unwrap().iter().zip([1.5, -2.0]) {
        assert_eq!((o["lo"].as_f64(), o["hi"].as_f64(), o["point_estimate"].as_f64()), (Some(c), Some(c), Some(c)));
    }
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let params = baseline_params(dir.path());
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        format!(
            "# bundled scenario\nflows = {}\ncosts = {}\ncounterfactual = {}\nparams = {}\nb = 40\nseed = 5\nmode = only-ee\n",
            s(&data("flows.csv")),
            s(&data("costs.csv")),
            s(&data("counterfactual.csv")),
            s(&params)
        ),
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_flowuq"))
        .args(["--config", s(&conf), "--out", s(&out), "uq", "--b", "80"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out.join("intervals.json"));
    assert_eq!(v["b"], 80);
    assert_eq!(v["seed"], 5);
    assert_eq!(v["mode"], "only-ee");
    assert_eq!(v["alpha"], 0.05);
}

#[test]
fn rank_report_from_uq_draws() {
    let dir = tempfile::tempdir().unwrap();
    let draws = dir.path().join("draws.csv");
    std::fs::write(&draws, "draw,A,B,C\n0,1.0,1.0,5.0\n1,2.0,2.0,4.0\n2,3.0,3.0,6.0\n3,0.5,0.5,7.0\n").unwrap();
    ok(&dir.path().join("r"), &["report-ranks", "--draws", s(&draws)]);
    let text = std::fs::read_to_string(dir.path().join("r/rank_reversals.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[1], "A,B,,0.0,0.0,1.0");
    assert_eq!(lines[2], "A,C,0.0,1.0,0.0,0.0");
    std::fs::write(&draws, "draw,A,B\n0,1.0,2.0\n1,2.0\n").unwrap();
    assert_eq!(flowuq(&dir.path().join("r2"), &["report-ranks", "--draws", s(&draws)]).status.code(), Some(2));
}

#[test]
fn attenuation_smoke_with_negative_rho() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(dir.path(), &["simulate-attenuation", "--m", "1", "--b", "20", "--rho", "-0.5"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("negative"));
    let v = json(&dir.path().join("attenuation.json"));
    assert_eq!(v["m"], 1);
    assert!(dir.path().join("bias_histogram.csv").exists());
}

#[test]
fn counterfactual_and_diagnose_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let params = baseline_params(dir.path());
    ok(
        &dir.path().join("cf"),
        &["counterfactual", "--flows", s(&data("flows.csv")), "--counterfactual", s(&data("counterfactual.csv")), "--epsilon", "5"],
    );
    let welfare = std::fs::read_to_string(dir.path().join("cf/welfare.csv")).unwrap();
    assert_eq!(welfare.lines().count(), 11);
    ok(
        &dir.path().join("dg"),
        &["diagnose", "--flows", s(&data("flows.csv")), "--params", s(&params), "--distances", s(&data("distances.csv"))],
    );
    let d = json(&dir.path().join("dg/diagnostics.json"));
    assert!(d["partial_slope"].as_f64().unwrap() < 0.0);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn commands_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (mirror, flows, dist, costs) = (data("mirror.csv"), data("flows.csv"), data("distances.csv"), data("costs.csv"));
    let runs: [Vec<&str>; 3] = [
        vec!["calibrate", "--mirror", s(&mirror), "--flows", s(&flows), "--distances", s(&dist), "--shrink"],
        vec!["simulate-attenuation", "--m", "2", "--b", "30", "--n", "6", "--workers", "2"],
        vec!["estimate", "--flows", s(&flows), "--costs", s(&costs)],
    ];
    for (k, args) in runs.iter().enumerate() {
        let (a, b) = (dir.path().join(format!("{k}a")), dir.path().join(format!("{k}b")));
        ok(&a, args);
        ok(&b, args);
        let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
        assert!(!fa.is_empty());
        assert!(fa == fb, "{args:?}");
    }
}

#[test]
fn example_config_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_flowuq"))
        .args(["--config", s(&data("example.conf")), "--out", s(dir.path()), "uq"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&dir.path().join("intervals.json"))["outcomes"].as_array().unwrap().len(), 10);
}

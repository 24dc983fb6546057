use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn pairtest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pairtest"))
        .args(args)
        .env_remove("PAIRTEST_THREADS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn analyze_json(args: &[&str]) -> Value {
    let mut full = vec!["analyze", "--format", "json"];
    full.extend_from_slice(args);
    let o = pairtest(&full);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn ome_report_values() {
    let ome = data_file("ome.csv");
    let v = analyze_json(&["--data", ome.to_str().unwrap(), "--model", "rosner", "--tests", "lr,wald,score,gee"]);
    assert_eq!(v["schema"], "pairtest/1");
    assert_eq!(v["model"], "rosner");
    let expected = [("lr", 0.0394), ("wald", 0.0391), ("score", 0.0395)];
    for (t, (name, q)) in v["tests"].as_array().unwrap().iter().zip(expected) {
        assert_eq!(t["test"], name);
        assert!((t["statistic"].as_f64().unwrap() - q).abs() < 1e-3);
        assert_eq!(t["reject"], false);
    }
}

#[test]
fn rp_auto_selects_donner_and_rejects_everywhere() {
    let rp = data_file("rp.csv");
    let v = analyze_json(&["--data", rp.to_str().unwrap(), "--model", "auto"]);
    assert_eq!(v["model"], "donner");
    assert!(v["delta_aic"].as_f64().unwrap() > 0.0);
    let text = stdout(&pairtest(&["analyze", "--data", rp.to_str().unwrap(), "--alpha", "0.05"]));
    let decisions: Vec<&str> = text.lines().filter(|l| l.starts_with("Q_")).collect();
    assert_eq!(decisions.len(), 4);
    assert!(decisions.iter().all(|l| l.ends_with("  reject H0")), "{text}");
}

#[test]
fn text_and_json_values_agree() {
    let ome = data_file("ome.csv");
    let path = ome.to_str().unwrap();
    let v = analyze_json(&["--data", path, "--model", "rosner"]);
    let text = stdout(&pairtest(&["analyze", "--data", path, "--model", "rosner"]));
    for t in v["tests"].as_array().unwrap() {
        for key in ["statistic", "p_value"] {
            let s = format!("{:.4}", t[key].as_f64().unwrap());
            assert!(text.contains(&s), "{key} {s} missing from\n{text}");
        }
    }
    for fit in ["constrained", "unconstrained"] {
        for pi in v[fit]["pis"].as_array().unwrap() {
            assert!(text.contains(&format!("{:.4}", pi.as_f64().unwrap())));
        }
        assert!(text.contains(&format!("{:.4}", v[fit]["kappa"].as_f64().unwrap())));
    }
}

#[test]
fn wide_and_long_inputs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let wide = dir.path().join("ome_wide.csv");
    std::fs::write(
        &wide,
        "kind,r,cefaclor,amoxicillin\nbilateral,0,9,7\nbilateral,1,7,5\nbilateral,2,23,13\nunilateral,0,20,19\nunilateral,1,34,36\n",
    )
    .unwrap();
    let a = analyze_json(&["--data", wide.to_str().unwrap(), "--wide", "--model", "rosner"]);
    let b = analyze_json(&["--data", data_file("ome.csv").to_str().unwrap(), "--model", "rosner"]);
    assert_eq!(a, b);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "kind,r,group,count\nunilateral,2,a,3\n").unwrap();
    let o = pairtest(&["analyze", "--data", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("parsing data") && err.contains("line 2"), "{err}");

    let missing = dir.path().join("missing.csv");
    assert_eq!(pairtest(&["analyze", "--data", missing.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(pairtest(&["analyze", "--bogus"]).status.code(), Some(1));
    assert_eq!(pairtest(&["--help"]).status.code(), Some(0));
    assert_eq!(pairtest(&["--version"]).status.code(), Some(0));

    let o = pairtest(&[
        "simulate", "tie", "--model", "donner", "--design", "E1", "--g", "3", "--pi0", "0.3", "--rho0", "0.4",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("configuring simulation"));
}

#[test]
fn convert_and_collapse_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let stacked = dir.path().join("stacked.csv");
    let back = dir.path().join("back.csv");
    let ome = data_file("ome.csv");
    let o = pairtest(&["convert", "--data", ome.to_str().unwrap(), "--replicate", "3", "--out", stacked.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&stacked).unwrap();
    assert!(text.starts_with("sub_id,response,group,count,replicate\n"), "{text}");
    let o = pairtest(&["collapse", "--data", stacked.to_str().unwrap(), "--out", back.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let a = pairtest::io::parse_frequency(&std::fs::read_to_string(&back).unwrap()).unwrap();
    let b = pairtest::io::parse_frequency(&std::fs::read_to_string(&ome).unwrap()).unwrap();
    assert_eq!(a, b);
}

fn simulate_json(threads: &str, dir: &Path) -> Vec<u8> {
    let out = dir.join(format!("sim_{threads}.json"));
    let o = pairtest(&[
        "simulate", "tie", "--model", "rosner", "--design", "U", "--g", "4", "--pi0", "0.3", "--rho0", "0.4",
        "--replicates", "400", "--seed", "9", "--threads", threads, "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("Q_GS"));
    std::fs::read(out).unwrap()
}

#[test]
fn simulation_output_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let one = simulate_json("1", dir.path());
    let eight = simulate_json("8", dir.path());
    assert_eq!(one, eight);
    let v: Value = serde_json::from_slice(&one).unwrap();
    assert_eq!(v["schema"], "pairtest/1");
    assert_eq!(v["study"], "tie");
    assert_eq!(v["tests"].as_array().unwrap().len(), 4);
}

#[test]
fn threads_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env.json");
    let o = Command::new(env!("CARGO_BIN_EXE_pairtest"))
        .args([
            "simulate", "power", "--model", "rosner", "--design", "E1", "--g", "2", "--alt", "H1A", "--r0", "1.4",
            "--replicates", "400", "--seed", "9", "--out",
        ])
        .arg(&out)
        .env("PAIRTEST_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&std::fs::read(out).unwrap()).unwrap();
    assert_eq!(v["alternative"], "H1A");
    assert_eq!(v["config"]["correlation"]["kappa"], 1.4);
}

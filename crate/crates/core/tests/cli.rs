use std::path::Path;
use std::process::Command;

fn delaylab(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_delaylab")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn simulate_zero_model_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "paths = 10\n[model]\nname = \"zero\"\n[solver]\nh = 0.0625\nt_end = 1.0\n[initial]\norigin = [2.0]\n");
    let out = dir.path().join("out");
    let (code, stdout, _) = delaylab(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stdout}");
    assert_eq!(stdout.lines().count(), 1);
    let csv = std::fs::read_to_string(out.join("terminal.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "path,x0,stopped_at");
    for line in csv.lines().skip(1) {
        let x: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((x - 2.0 * (-1.0f64).exp()).abs() < 1e-12);
    }
}

#[test]
fn harnack_with_equal_segments_is_jensen_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "paths = 300\n[model]\nname = \"reference\"\n[solver]\nh = 0.03125\nt_end = 2.0\n[coupling]\nhorizons = [1.0]\ndistances = [0.0]\n",
    );
    let out = dir.path().join("out");
    let (code, stdout, _) = delaylab(&["harnack", "--config", &cfg, "--out", out.to_str().unwrap(), "--format", "json"]);
    assert_eq!(code, 0, "{stdout}");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(v["verdict"], "pass");
    assert_eq!(v["result"]["settings"][0]["setting"]["dist"], 0.0);
}

#[test]
fn incommensurate_step_flag_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[solver]\nh = 0.125\nt_end = 1.0\n");
    let (code, _, stderr) = delaylab(&["simulate", "--config", &cfg, "--step", "0.3"]);
    assert_eq!(code, 3);
    assert!(stderr.contains("r0"), "{stderr}");
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[solver]\nh = 0.125\nt_end = 1.0\nstep_size = 2\n");
    let (code, _, stderr) = delaylab(&["simulate", "--config", &cfg]);
    assert_eq!(code, 3);
    assert!(stderr.contains("line 4") && stderr.contains("step_size"), "{stderr}");
}

#[test]
fn unknown_scenario_lists_choices() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[solver]\nh = 0.125\nt_end = 1.0\n");
    let (code, _, stderr) = delaylab(&["teleport", "--config", &cfg]);
    assert_ne!(code, 0);
    assert!(stderr.contains("girsanov-check") && stderr.contains("zvonkin"), "{stderr}");
}

#[test]
fn explosive_model_fails_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "paths = 20\n[model]\nname = \"explosive\"\n[solver]\nh = 0.0625\nt_end = 1.0\nr_explode = 100.0\n[initial]\norigin = [3.0]\n",
    );
    let out = dir.path().join("out");
    let (code, stdout, _) = delaylab(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 1, "{stdout}");
    assert!(stdout.contains("stopped early"));
}

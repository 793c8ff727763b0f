use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn optomech(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optomech"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

/// The last stderr line parsed as the error report.
fn error_report(o: &Output) -> Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().expect("stderr has a report");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn quantity(rows: &[Vec<String>], name: &str) -> f64 {
    rows.iter().find(|r| r[0] == name).unwrap_or_else(|| panic!("{name} missing"))[1].parse().unwrap()
}

#[test]
fn derive_reports_membrane_numbers() {
    let dir = TempDir::new().unwrap();
    let o = optomech(&["derive", "--preset", "paper"], dir.path());
    ok(&o);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("n_M") && stdout.contains("0.0685"), "{stdout}");
    let rows = csv_rows(&dir.path().join("derived.csv"));
    assert!((quantity(&rows, "n_M") - 0.068).abs() <= 0.001);
    assert!((quantity(&rows, "n_opt") - 0.016).abs() <= 0.0005);
    assert!((quantity(&rows, "gamma_eff/2pi") - 400.0).abs() <= 20.0);
    assert!((quantity(&rows, "f_r") - 41.0).abs() <= 1.0);
    assert!((quantity(&rows, "f_b") - 172.0).abs() <= 2.0);
    assert!((quantity(&rows, "tau_max") - 0.47e-3).abs() <= 0.01e-3);
}

#[test]
fn derive_from_a_config_with_cyclic_units() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "[system]\npreset = paper\nomega_m = 2.0 MHz  # membrane\nq = 2e7\nkappa = 1000 kHz\nalpha = 10 kHz\ntemperature = 20 mK\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = optomech(&["derive", "--config", cfg.to_str().unwrap(), "--format", "json"], &out);
    ok(&o);
    let v: Value = serde_json::from_str(&fs::read_to_string(out.join("derived.json")).unwrap()).unwrap();
    let n_m = v["rows"].as_array().unwrap().iter().find(|r| r[0] == "n_M").unwrap()[1].as_f64().unwrap();
    assert!((n_m - 0.06851).abs() < 1e-4, "{n_m}");
}

#[test]
fn ambiguous_units_are_config_errors() {
    let dir = TempDir::new().unwrap();
    for set in ["system.omega_m=2.0", "system.kappa=1 mK", "system.bogus=1 Hz"] {
        let o = optomech(&["derive", "--set", set], dir.path());
        assert_eq!(o.status.code(), Some(2), "{set}");
        let r = error_report(&o);
        assert_eq!(r["error"]["kind"], "config", "{set}");
        assert_eq!(r["error"]["exit_code"], 2);
    }
    let o = optomech(&["derive", "--preset", "desk", "--set", "system.kappa=3 MHz"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(error_report(&o)["error"]["message"].as_str().unwrap().contains("bare numbers"));
}

#[test]
fn witness_map_boundary_meets_the_threshold() {
    let dir = TempDir::new().unwrap();
    let o = optomech(&["witness-map", "--set", "map.tau_points=21", "--set", "map.n_points=16"], dir.path());
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("n_M = 0.2612"));
    let b = csv_rows(&dir.path().join("witness_boundary.csv"));
    let last = b.last().unwrap();
    let (n, tau): (f64, f64) = (last[0].parse().unwrap(), last[1].parse().unwrap());
    assert!((n - 0.2612).abs() < 1e-4 && tau.abs() < 1e-9, "{n} {tau}");
    let first: f64 = b[0][1].parse().unwrap();
    assert!((first - 4.0).abs() < 1e-9);
    let map = csv_rows(&dir.path().join("witness_map.csv"));
    assert_eq!(map.len(), 21 * 16);
    // n_M = 0 violates maximally, n_M = 0.3 never does
    assert_eq!(map[0][2], "1");
    assert!(map.iter().filter(|r| r[1] == "0.3").all(|r| r[2] == "0"));
    let svg = fs::read_to_string(dir.path().join("witness_map.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("mode = witness-map"));
}

#[test]
fn analyze_on_an_empty_record_fails_cleanly() {
    let dir = TempDir::new().unwrap();
    let rec = dir.path().join("empty.txt");
    fs::write(
        &rec,
        "# optomech click record\n# seed=1\n# duration=100\n# params={\"topology\":\"pair\",\"n_max\":5,\"rates\":{\"gamma\":0.1,\"n_th\":0.1,\"a_minus\":1.0,\"a_plus\":0.1,\"eta_esc\":1.0,\"delta\":0.0,\"phi\":0.0},\"burn_in\":0.0}\n",
    )
    .unwrap();
    let o = optomech(&["analyze", "--preset", "desk", "--input", rec.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_report(&o)["error"]["kind"], "empty_channel");
}

#[test]
fn truncation_failure_is_numerical() {
    let dir = TempDir::new().unwrap();
    let o = optomech(
        &["simulate-jumps", "--preset", "desk", "--set", "system.n_m=0.5", "--set", "jumps.n_max=3", "--set", "jumps.duration=200"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_report(&o)["error"]["kind"], "truncation_exceeded");
}

#[test]
fn manifest_rerun_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = [
        "simulate-jumps",
        "--preset",
        "desk",
        "--seed",
        "11",
        "--set",
        "jumps.duration=400",
        "--set",
        "pair.delta=5",
        "--set",
        "pair.phi=45 deg",
        "--set",
        "jumps.bootstrap=20",
    ];
    ok(&optomech(&args, &a));
    let manifest = a.join("manifest.cfg");
    ok(&optomech(&["rerun", manifest.to_str().unwrap()], &b));
    for f in ["g2_witness.csv", "clicks.csv", "g2.svg", "witness.svg", "manifest.cfg", "records/traj_0000.clk"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let text = fs::read_to_string(&manifest).unwrap();
    assert!(text.contains("seed = 11") && text.contains("phi = 0.7853981633974483 rad"), "{text}");
    // analysing the written records reproduces the estimates
    let records: Vec<String> = (0..8).map(|i| a.join(format!("records/traj_{i:04}.clk")).display().to_string()).collect();
    let c = dir.path().join("c");
    let mut args = vec!["analyze", "--preset", "desk", "--seed", "11", "--set", "jumps.bootstrap=20"];
    for r in &records {
        args.push("--input");
        args.push(r);
    }
    ok(&optomech(&args, &c));
    let est = |dir: &Path| -> Vec<String> { csv_rows(&dir.join("g2_witness.csv")).iter().map(|r| r[1].clone()).collect() };
    assert_eq!(est(&a), est(&c));
}

#[test]
fn sweep_over_temperature_raises_occupancy() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sweep.cfg");
    fs::write(&cfg, "[system]\npreset = paper\n[sweep]\nparam = temperature\nfrom = 5 mK\nto = 100 mK\npoints = 6\nscale = log\n").unwrap();
    ok(&optomech(&["sweep", "--config", cfg.to_str().unwrap()], &dir.path().join("out")));
    let rows = csv_rows(&dir.path().join("out/sweep.csv"));
    assert_eq!(rows.len(), 6);
    assert!((rows[0][0].parse::<f64>().unwrap() - 0.005).abs() < 1e-15);
    let n: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(n.windows(2).all(|w| w[1] > w[0]), "{n:?}");
    // above the threshold there is no violation window
    let last_tau = &rows.last().unwrap()[7];
    assert_eq!(last_tau, "NaN");
}

#[test]
fn surrogate_record_round_trips_through_analyze() {
    let dir = TempDir::new().unwrap();
    let sim = dir.path().join("sim");
    let base = ["--preset", "desk", "--set", "pair.topology=single", "--set", "heterodyne.segment=65536"];
    let mut args = vec!["simulate-heterodyne", "--set", "heterodyne.source=surrogate", "--set", "heterodyne.duration=3000"];
    args.extend(base);
    ok(&optomech(&args, &sim));
    let rec = sim.join("record.omhet");
    let mut args = vec!["analyze", "--input", rec.to_str().unwrap()];
    args.extend(base);
    let ana = dir.path().join("ana");
    ok(&optomech(&args, &ana));
    let cols = |d: &Path| -> Vec<Vec<String>> { csv_rows(&d.join("g2_heterodyne.csv")).into_iter().map(|r| r[..5].to_vec()).collect() };
    assert_eq!(cols(&sim), cols(&ana));
    let summary = csv_rows(&sim.join("heterodyne_summary.csv"));
    assert!((quantity(&summary, "floor_Single") - 1.0).abs() < 0.01);
}

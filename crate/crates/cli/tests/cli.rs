use std::path::Path;
use std::process::{Command, Output};

const L5: &str = r#"
seed = 11

[lattice]
sites = 5
spacing = 6.0

[prep]
omega = 11.46
delta = 29.0
t_final = 2.0
omega_ramp = 0.25

[rotation]
omega = 7.97
plateau = 0.15

[noise]
gamma = 0.1
sigma_pos = 0.15
sigma_omega_rel = 0.05
sigma_delta = 1.0

[evolve]
max_step = 0.01

[measurement]
shots = 400
bootstrap = 100
loading_defect = 0.005

[inference]
members = 6
"#;

fn wring(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wring")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = wring(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(p).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn full_pipeline_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("l5.toml");
    std::fs::write(&cfg, L5).unwrap();
    let shots = d.join("shots");
    let written = ok(&["sample", "--config", s(&cfg), "--out", s(&shots)]);
    assert_eq!(written.lines().count(), 7);
    for name in ["z", "x", "rot+0.0", "rot-0.5", "rot+0.5", "rot-1.0", "rot+1.0"] {
        assert!(shots.join(format!("{name}.shots")).exists(), "{name}");
    }

    ok(&["estimate", "--config", s(&cfg), "--z", s(&shots.join("z.shots")), "--x", s(&shots.join("x.shots")), "--out", s(&d.join("est")), "--format", "delimited"]);
    let pops = csv_rows(&d.join("est/populations.csv"));
    assert_eq!(pops.len(), 6);
    assert_eq!(pops[5][0], "other");

    let ens = d.join("ensemble.toml");
    ok(&["prior", "--config", s(&cfg), "--ensemble", s(&ens), "--out", s(&d.join("prior")), "--format", "delimited"]);
    assert_eq!(csv_rows(&d.join("prior/members.csv")).len(), 6);

    let rot: Vec<String> = ["rot+0.0", "rot-0.5", "rot+0.5", "rot-1.0", "rot+1.0"]
        .iter()
        .map(|n| shots.join(format!("{n}.shots")).to_str().unwrap().to_string())
        .collect();
    let post = d.join("post");
    let mut args = vec!["posterior", "--ensemble", s(&ens), "--out", s(&post), "--format", "delimited", "--shots"];
    args.extend(rot.iter().map(String::as_str));
    ok(&args);
    let members = csv_rows(&d.join("post/members.csv"));
    let total: f64 = members.iter().map(|r| r[3].parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-6);
    assert_eq!(csv_rows(&d.join("post/kl.csv")).len(), 5);

    for out in ["r1", "r2"] {
        ok(&["report", "--config", s(&cfg), "--ensemble", s(&ens), "--shots", s(&shots), "--out", s(&d.join(out))]);
    }
    let (a, b) = (std::fs::read(d.join("r1/report.txt")).unwrap(), std::fs::read(d.join("r2/report.txt")).unwrap());
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    for section in ["## populations", "## estimate", "## fidelity", "## kl", "## members", "# config", "# sha256"] {
        assert!(text.contains(section), "{section}");
    }

    // a second sample run with the same seed reproduces every shot file
    let again = d.join("again");
    ok(&["sample", "--config", s(&cfg), "--out", s(&again)]);
    for name in ["z", "rot+1.0"] {
        assert_eq!(
            std::fs::read(shots.join(format!("{name}.shots"))).unwrap(),
            std::fs::read(again.join(format!("{name}.shots"))).unwrap()
        );
    }
}

#[test]
fn ingest_round_trip_and_postselection() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut text = String::from("# L=9 experiment=prep-z seed=none\nshot_id,basis,pre,post\n");
    for i in 0..1000 {
        let pre = if i % 12 == 3 && i < 972 { "gggggrggg" } else { "ggggggggg" };
        text.push_str(&format!("{i},z,{pre},rgrgrgrgg\n"));
    }
    let bad = text.lines().filter(|l| l.contains(",gggggrggg,")).count();
    let file = d.join("l9.shots");
    std::fs::write(&file, &text).unwrap();

    let copy = d.join("copy.shots");
    ok(&["ingest", "--file", s(&file), "--sites", "9", "--write", s(&copy), "--out", s(&d.join("r0")), "--format", "delimited"]);
    assert_eq!(std::fs::read_to_string(&copy).unwrap(), text);

    ok(&["ingest", "--file", s(&file), "--postselect", "--out", s(&d.join("r1")), "--format", "delimited"]);
    let rows = csv_rows(&d.join("r1/shots.csv"));
    assert_eq!(rows[1], vec!["kept".to_string(), (1000 - bad).to_string()]);
    assert_eq!(bad, 81);

    let digits = d.join("digits.shots");
    std::fs::write(&digits, "# L=3 experiment=e\n0,x,000,101\n").unwrap();
    let norm = d.join("norm.shots");
    ok(&["ingest", "--file", s(&digits), "--write", s(&norm), "--out", s(&d.join("r2"))]);
    assert!(std::fs::read_to_string(&norm).unwrap().ends_with("0,x,ggg,rgr\n"));
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = d.join("bad.toml");
    std::fs::write(&bad, "[lattice]\nspacing = 6.0\n").unwrap();
    let out = wring(&["prepare", "--config", s(&bad), "--out", s(d)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sites"));

    let big = d.join("big.toml");
    std::fs::write(&big, "[lattice]\nsites = 15\n").unwrap();
    assert_eq!(wring(&["prepare", "--config", s(&big), "--out", s(d)]).status.code(), Some(3));

    let l11 = d.join("l11.toml");
    std::fs::write(&l11, "[lattice]\nsites = 11\nspacing = 7.1\n").unwrap();
    assert_eq!(wring(&["prior", "--config", s(&l11), "--ensemble", s(&d.join("e.toml")), "--out", s(d)]).status.code(), Some(3));

    let flat = d.join("flat.csv");
    std::fs::write(&flat, "delta,p_e\n-2,0.1\n-1,0.1\n0,0.1\n1,0.1\n2,0.1\n").unwrap();
    assert_eq!(wring(&["calibrate", "--data", s(&flat), "--out", s(d)]).status.code(), Some(4));

    let empty = d.join("empty.shots");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(wring(&["ingest", "--file", s(&empty), "--out", s(d)]).status.code(), Some(2));
}

#[test]
fn calibrate_and_gap_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let omega: f64 = 11.46;
    let t = std::f64::consts::PI / omega;
    let mut data = String::from("delta,p_e\n");
    for k in -20..=20 {
        let x = k as f64 - 0.7;
        let w2 = omega * omega + x * x;
        data.push_str(&format!("{k},{}\n", omega * omega / w2 * (0.5 * w2.sqrt() * t).sin().powi(2)));
    }
    let file = d.join("res.csv");
    std::fs::write(&file, data).unwrap();
    ok(&["calibrate", "--data", s(&file), "--out", s(&d.join("cal")), "--format", "delimited"]);
    let rows = csv_rows(&d.join("cal/calibration.csv"));
    assert!((rows[0][1].parse::<f64>().unwrap() - omega).abs() < 1e-6);
    assert!((rows[1][1].parse::<f64>().unwrap() - 0.7).abs() < 1e-6);

    ok(&["gap", "--sizes", "4,5,6,7,9", "--out", s(&d.join("gap")), "--format", "delimited"]);
    assert_eq!(csv_rows(&d.join("gap/gap.csv")).len(), 5);
    let fit = csv_rows(&d.join("gap/fit.csv"));
    assert_eq!(fit[0][0], "odd");
}

#[test]
fn prepare_sweep_and_grape() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("c.toml");
    std::fs::write(
        &cfg,
        "[lattice]\nsites = 3\n[evolve]\nmax_step = 0.01\nsnapshot_interval = 0.5\n[search]\ndelta_lo = 20.0\ndelta_hi = 24.0\n[grape]\nslices = 6\niterations = 5\n",
    )
    .unwrap();
    ok(&["prepare", "--config", s(&cfg), "--out", s(&d.join("p")), "--format", "delimited"]);
    assert!(d.join("p/state.txt").exists());
    assert!(std::fs::read_to_string(d.join("p/trajectory.csv")).unwrap().starts_with("t_us,weight"));
    let summary = csv_rows(&d.join("p/summary.csv"));
    assert!(summary.iter().any(|r| r[0] == "fidelity"));

    ok(&["sweep", "--config", s(&cfg), "--out", s(&d.join("s")), "--format", "delimited"]);
    assert_eq!(csv_rows(&d.join("s/sweep.csv")).len(), 5);

    ok(&["grape", "--config", s(&cfg), "--out", s(&d.join("g")), "--format", "delimited"]);
    let trace = csv_rows(&d.join("g/trace.csv"));
    let f: Vec<f64> = trace.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(f.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    assert_eq!(csv_rows(&d.join("g/controls.csv")).len(), 6);
}

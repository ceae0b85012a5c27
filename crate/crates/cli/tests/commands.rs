use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rfpsis::simulation::{generate, LeverageKind, SimulationSpec};
use rfpsis_cli::data::{parse_dataset, read_table};
use rfpsis_cli::{execute, run};
use tempfile::TempDir;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn args(cmd: &str, rest: &[String]) -> Vec<String> {
    let mut v = vec!["rfpsis".to_string(), cmd.to_string()];
    v.extend(rest.iter().cloned());
    v
}

/// Deterministic 10 x 5 table: y and four predictors, the second one driving y.
fn toy_csv() -> String {
    let mut out = String::from("y,a,b,c,e\n");
    for i in 0..10 {
        let t = i as f64;
        let a = (t * 1.7).sin();
        let b = (t * 0.9).cos() + 0.1 * t;
        let c = ((t * 2.3).sin() * 3.0).round() / 3.0;
        let e = (t * t * 0.37).cos();
        let y = 2.0 * b + 0.3 * a + 0.05 * e;
        out.push_str(&format!("{y},{a},{b},{c},{e}\n"));
    }
    out
}

fn simulated_csv(spec: &SimulationSpec) -> String {
    let data = generate(spec).unwrap();
    let (n, p) = data.x.shape();
    let mut out = String::from("y");
    for j in 0..p {
        out.push_str(&format!(",x{}", j + 1));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&format!("{}", data.y[i]));
        for j in 0..p {
            out.push_str(&format!(",{}", data.x[(i, j)]));
        }
        out.push('\n');
    }
    out
}

fn small_spec() -> SimulationSpec {
    SimulationSpec {
        n: 60,
        p: 40,
        seed: 11,
        eps_leverage: 0.1,
        leverage_kind: LeverageKind::PcBad,
        ..Default::default()
    }
}

#[test]
fn sis_on_toy_table_orders_four_predictors() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "toy.csv", &toy_csv());
    let out = dir.path().join("out");
    let code = run(args(
        "screen",
        &[
            "--input".into(),
            s(&input),
            "--response".into(),
            "y".into(),
            "--method".into(),
            "sis".into(),
            "--out".into(),
            s(&out),
        ],
    ));
    assert_eq!(code, 0);
    let (header, rows) = read_table(&out.join("path.csv")).unwrap();
    assert_eq!(header, vec!["rank", "predictor", "slope"]);
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][1], "b");
    let mags: Vec<f64> = rows.iter().map(|r| r[2].parse::<f64>().unwrap().abs()).collect();
    assert!(mags.windows(2).all(|w| w[0] >= w[1]), "{mags:?}");
    let ranks: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(ranks, vec!["1", "2", "3", "4"]);
    // No outlier analysis for SIS, but the file still exists.
    let (_, outliers) = read_table(&out.join("outliers.csv")).unwrap();
    assert!(outliers.is_empty());
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("factor.json")).unwrap()).unwrap();
    assert_eq!(json["d"], 0);
}

#[test]
fn missing_response_column_is_named() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "toy.csv", &toy_csv());
    let a = args(
        "screen",
        &["--input".into(), s(&input), "--response".into(), "target".into(), "--out".into(), s(dir.path())],
    );
    assert_eq!(run(a.clone()), 2);
    let e = execute(a).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("target"), "{e}");
}

#[test]
fn non_numeric_cell_reports_row() {
    let dir = TempDir::new().unwrap();
    let mut lines: Vec<String> = toy_csv().lines().map(str::to_string).collect();
    // Data row 7 is line 8 of the file.
    let mut cells: Vec<&str> = lines[7].split(',').collect();
    cells[2] = "abc";
    lines[7] = cells.join(",");
    let input = write(dir.path(), "bad.csv", &(lines.join("\n") + "\n"));
    let a = args(
        "screen",
        &[
            "--input".into(),
            s(&input),
            "--response".into(),
            "y".into(),
            "--method".into(),
            "sis".into(),
            "--out".into(),
            s(dir.path()),
        ],
    );
    let e = execute(a.clone()).unwrap_err();
    assert!(e.to_string().contains("row 7"), "{e}");
    assert_eq!(run(a), 2);
}

#[test]
fn select_finds_exact_generator_with_every_criterion() {
    let dir = TempDir::new().unwrap();
    let mut text = String::from("y,x1,x2,x3,x4,x5,x6\n");
    for i in 0..40 {
        let t = i as f64;
        let xs: Vec<f64> = (1..=6).map(|j| (t * (0.37 * j as f64 + 0.11)).sin() + 0.01 * t * j as f64).collect();
        let y = 3.0 * xs[2];
        text.push_str(&format!("{y}"));
        for v in &xs {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    let input = write(dir.path(), "exact.csv", &text);
    for method in ["sis", "rfpsis"] {
        let out = dir.path().join(method);
        let a = args(
            "select",
            &[
                "--input".into(),
                s(&input),
                "--response".into(),
                "y".into(),
                "--method".into(),
                method.into(),
                "--k-max".into(),
                "4".into(),
                "--out".into(),
                s(&out),
            ],
        );
        execute(a).unwrap();
        let (header, rows) = read_table(&out.join("selection.csv")).unwrap();
        assert_eq!(header[0], "criterion");
        assert_eq!(rows.len(), 6, "{method}");
        for r in &rows {
            assert!(r[2].split(';').any(|p| p == "x3"), "{method} {r:?}");
        }
        let (_, table) = read_table(&out.join("selection_table.csv")).unwrap();
        assert!(!table.is_empty());
    }
}

#[test]
fn k_max_above_half_n_is_a_precondition_error() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "toy.csv", &toy_csv());
    let a = args(
        "select",
        &[
            "--input".into(),
            s(&input),
            "--response".into(),
            "y".into(),
            "--method".into(),
            "sis".into(),
            "--k-max".into(),
            "6".into(),
            "--out".into(),
            s(dir.path()),
        ],
    );
    let e = execute(a.clone()).unwrap_err();
    assert!(e.to_string().contains("precondition"), "{e}");
    assert_eq!(run(a), 2);
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().to_string(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn reruns_and_thread_counts_give_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "sim.csv", &simulated_csv(&small_spec()));
    let before = fs::read(&input).unwrap();
    let mut outputs = Vec::new();
    for (tag, threads) in [("a", "1"), ("b", "1"), ("c", "8")] {
        let out = dir.path().join(tag);
        let a = args(
            "select",
            &[
                "--input".into(),
                s(&input),
                "--response".into(),
                "y".into(),
                "--seed".into(),
                "5".into(),
                "--k-max".into(),
                "6".into(),
                "--threads".into(),
                threads.into(),
                "--out".into(),
                s(&out),
            ],
        );
        execute(a).unwrap();
        outputs.push(read_all(&out));
    }
    assert_eq!(outputs[0].len(), 5);
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    assert_eq!(fs::read(&input).unwrap(), before, "input must not be modified");
}

#[test]
fn outputs_round_trip_through_the_parser() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "sim.csv", &simulated_csv(&small_spec()));
    let out = dir.path().join("o");
    execute(args("screen", &["--input".into(), s(&input), "--response".into(), "y".into(), "--out".into(), s(&out)]))
        .unwrap();
    execute(args("diagnose", &["--input".into(), s(&input), "--response".into(), "y".into(), "--out".into(), s(&out)]))
        .unwrap();
    for name in ["path.csv", "outliers.csv", "diagnostics.csv"] {
        let (header, rows) = read_table(&out.join(name)).unwrap();
        assert!(!rows.is_empty(), "{name}");
        assert!(rows.iter().all(|r| r.len() == header.len()));
    }
    // The slope column is written at full precision.
    let (_, rows) = read_table(&out.join("path.csv")).unwrap();
    for r in &rows {
        let v: f64 = r[2].parse().unwrap();
        assert_eq!(format!("{v}"), r[2]);
    }
    // A numeric output table is also valid input.
    let diag = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    let numeric: String = diag.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n").collect();
    let parsed = parse_dataset(numeric.as_bytes(), Some("row")).unwrap();
    assert_eq!(parsed.x.nrows(), 60);
    let (_, diag_rows) = read_table(&out.join("diagnostics.csv")).unwrap();
    let flagged = diag_rows.iter().filter(|r| r[4] != "Regular").count();
    assert!(flagged >= 6, "expected the injected PC rows to be flagged, got {flagged}");
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "toy.csv", &toy_csv());
    let cfg = write(dir.path(), "run.cfg", &format!("input = {}\nresponse = y\nmethod = fpsis\nd = 0\n", s(&input)));
    let out = dir.path().join("o");
    execute(args("screen", &["--config".into(), s(&cfg), "--method".into(), "sis".into(), "--out".into(), s(&out)]))
        .unwrap();
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("factor.json")).unwrap()).unwrap();
    assert_eq!(json["method"], "Sis");

    let bad = write(dir.path(), "bad.cfg", "colour = red\n");
    let e = execute(args("screen", &["--config".into(), s(&bad)])).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn simulate_rejects_heavy_contamination() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "spec.cfg",
        "n = 100\np = 50\neps_leverage = 0.3\nleverage_kind = pc-bad\neps_vertical = 0.2\n",
    );
    let a = args("simulate", &["--config".into(), s(&cfg), "--out".into(), s(dir.path())]);
    assert_eq!(run(a), 2);
}

#[test]
fn simulate_smoke_report_matches_replicate_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "spec.cfg", "n = 100\np = 500\nreplicates = 2\nseed = 3\n");
    let out = dir.path().join("sim");
    let start = std::time::Instant::now();
    execute(args("simulate", &["--config".into(), s(&cfg), "--out".into(), s(&out)])).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs} s");

    let (_, report) = read_table(&out.join("report.csv")).unwrap();
    let (header, reps) = read_table(&out.join("replicates.csv")).unwrap();
    assert_eq!(reps.len(), 6);
    for r in &report {
        let col = header.iter().position(|h| *h == format!("mms_{}", r[1])).unwrap();
        let mut v: Vec<f64> = reps.iter().filter(|x| x[1] == r[0]).map(|x| x[col].parse().unwrap()).collect();
        v.sort_by(f64::total_cmp);
        let median = (v[0] + v[1]) / 2.0;
        assert_eq!(r[2].parse::<f64>().unwrap(), median, "{r:?}");
    }
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("spec.json")).unwrap()).unwrap();
    assert_eq!(echo["spec"]["p"], 500);
    assert_eq!(echo["replicates"], 2);
}

#[test]
fn binary_honours_seed_environment_and_exit_codes() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "sim.csv", &simulated_csv(&small_spec()));
    let bin = env!("CARGO_BIN_EXE_rfpsis");
    let go = |out: &Path, env_seed: Option<&str>, extra: &[&str]| {
        let mut c = Command::new(bin);
        c.args(["screen", "--input", &s(&input), "--response", "y", "--out", &s(out)]).args(extra);
        c.env_remove("RFPS_SEED");
        if let Some(v) = env_seed {
            c.env("RFPS_SEED", v);
        }
        c.output().unwrap()
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(go(&a, Some("9"), &["--d", "2"]).status.success());
    assert!(go(&b, None, &["--d", "2", "--seed", "9"]).status.success());
    assert_eq!(read_all(&a), read_all(&b));

    let bad = go(&a, Some("nine"), &[]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("RFPS_SEED"));

    let fail = go(&a, None, &["--d", "70"]);
    assert_eq!(fail.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&fail.stderr).contains("screening"));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ortho_lasso::cli::{read_records, write_records, EXIT_DATA, EXIT_USAGE};
use ortho_lasso::simkit::{GammaRegime, SimDesign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ortho-lasso")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_smoke_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("records.csv");
    let args = ["simulate", "--n", "500", "--p", "250", "--rho", "0", "--regime", "exact", "--reps", "10", "--seed", "7"];
    let o = bin(&[&args[..], &["--out", p(&rec)]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read_to_string(&rec).unwrap();
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines.len(), 21);
    assert_eq!(lines[0], "design_id,n,p,rho,regime,rep,method,beta_hat,se,covered,ci_length,t_stat,runtime_ms,failure");

    let o = bin(&[&args[..], &["--out", p(&rec), "--jobs", "3"]].concat());
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&rec).unwrap(), first);

    let out = dir.path().join("report");
    let o = bin(&["report", p(&rec), "--out-dir", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let density = fs::read_to_string(out.join("density.csv")).unwrap();
    assert_eq!(density.lines().count(), 1 + 2 * 512);

    let o = bin(&["report", p(&rec), "--out-dir", p(&out)]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap(), metrics);
    assert_eq!(fs::read_to_string(out.join("density.csv")).unwrap(), density);
}

#[test]
fn records_round_trip_through_the_reader() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("records.csv");
    let o = bin(&["simulate", "--n", "100", "--rho", "0.4", "--regime", "intermediate", "--reps", "3", "--seed", "1", "--out", p(&rec)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (records, keys) = read_records(&rec).unwrap();
    assert_eq!(records.len(), 6);
    let key = &keys[&0];
    let design = SimDesign::new(0, key.n, key.p, key.rho, key.regime, 3, 1);
    assert_eq!(key.regime, GammaRegime::Intermediate);
    let copy = dir.path().join("copy.csv");
    write_records(&copy, &[design], &records).unwrap();
    assert_eq!(fs::read(&rec).unwrap(), fs::read(&copy).unwrap());
}

#[test]
fn simulate_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("r.csv");
    let o = bin(&["simulate", "--n", "500", "--reps", "0", "--out", p(&rec)]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    assert!(!rec.exists());
    assert_eq!(bin(&["simulate", "--n", "100", "--reps", "2", "--regime", "dense"]).status.code(), Some(EXIT_USAGE));
    let grid = dir.path().join("g.json");
    fs::write(&grid, "{\"designs\": [{\"n\": 100, \"rho\": 0.2}]}").unwrap();
    let o = bin(&["simulate", "--grid", p(&grid), "--reps", "2"]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    assert!(stderr(&o).contains("grid"));
}

#[test]
fn report_flags_all_failed_designs_and_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("records.csv");
    let header = "design_id,n,p,rho,regime,rep,method,beta_hat,se,covered,ci_length,t_stat,runtime_ms,failure\n";
    let mut body = String::from(header);
    for rep in 0..3 {
        body.push_str(&format!("0,100,50,0,exact,{rep},double,,,,,,,lasso_not_converged\n"));
        body.push_str(&format!("0,100,50,0,exact,{rep},triple,1.01,0.1,1,0.39,0.1,,\n"));
    }
    fs::write(&rec, &body).unwrap();
    let o = bin(&["report", p(&rec), "--out-dir", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<Vec<&str>> = metrics.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][5], "double");
    assert_eq!(rows[0][9].parse::<f64>().unwrap(), 1.0);
    assert!(rows[0][10..].iter().all(|c| c.is_empty()));
    assert_eq!(rows[1][9].parse::<f64>().unwrap(), 0.0);
    // identical estimates: no spread, so no density for the triple arm either
    let density = fs::read_to_string(dir.path().join("density.csv")).unwrap();
    assert_eq!(density.lines().count(), 1);

    fs::write(&rec, format!("{header}0,100,50,0,exact,0,double,abc,,,,,,\n")).unwrap();
    assert_eq!(bin(&["report", p(&rec), "--out-dir", p(dir.path())]).status.code(), Some(EXIT_DATA));
    fs::write(&rec, "a,b\n1,2\n").unwrap();
    assert_eq!(bin(&["report", p(&rec), "--out-dir", p(dir.path())]).status.code(), Some(EXIT_DATA));
}

#[test]
fn estimate_on_emitted_data() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let o = bin(&[
        "simulate", "--n", "400", "--p", "100", "--regime", "exact", "--reps", "1", "--seed", "3", "--out",
        p(&dir.path().join("r.csv")), "--emit-data", p(&data_dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let data = data_dir.join("design0_rep0.csv");
    let base = ["estimate", p(&data), "--treatment", "d", "--outcome", "y"];

    let out_file = dir.path().join("est.csv");
    let o = bin(&[&base[..], &["--method", "triple", "--out", p(&out_file)]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let line = String::from_utf8(o.stdout).unwrap();
    let cells: Vec<&str> = line.trim().split(',').collect();
    assert_eq!(cells.len(), 9);
    assert_eq!(cells[0], "triple");
    let (beta, se): (f64, f64) = (cells[1].parse().unwrap(), cells[2].parse().unwrap());
    assert!((beta - 1.0).abs() <= 4.0 * se, "beta {beta}, se {se}");
    assert_eq!(&cells[5..], ["400", "100", "5", "0"]);
    let written = fs::read_to_string(&out_file).unwrap();
    assert_eq!(written.lines().next().unwrap(), "method,beta_hat,se,ci_lo,ci_hi,n,p,K,seed");
    assert_eq!(written.lines().nth(1).unwrap(), line.trim());

    let with_l = bin(&[&base[..], &["--method", "triple", "--L", "0"]].concat());
    assert_eq!(with_l.stdout, line.as_bytes());
    let double = bin(&[&base[..], &["--method", "double"]].concat());
    assert!(double.status.success());
    assert!(String::from_utf8(double.stdout).unwrap().starts_with("double,"));
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

#[test]
fn estimate_data_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("d.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let table: Vec<[f64; 4]> = (0..300)
        .map(|_| {
            let (x1, x2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            let d = 0.5 * x1 + rng.sample::<f64, _>(StandardNormal);
            [d + x2 + rng.sample::<f64, _>(StandardNormal), d, x1, x2]
        })
        .collect();
    let row = |i: usize| {
        let [y, d, x1, x2] = table[i];
        format!("{y},{d},{x1},{x2},1")
    };
    write_csv(&file, "y,d,x1,x2,c", (0..300).map(row));
    let run = |extra: &[&str]| bin(&[&["estimate", p(&file)], extra].concat());

    let o = run(&["--treatment", "treat", "--outcome", "y"]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
    assert!(stderr(&o).contains("column `treat` not found"));

    let o = run(&["--treatment", "d", "--outcome", "y"]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
    assert!(stderr(&o).contains("control `c` has zero variance"), "{}", stderr(&o));

    let o = run(&["--treatment", "d", "--outcome", "y", "--controls", "x1,x2"]);
    assert!(o.status.success(), "{}", stderr(&o));

    write_csv(&file, "y,d,x1,x2,c", (0..300).map(|i| if i == 7 { "1,2,oops,4,1".to_string() } else { row(i) }));
    let o = run(&["--treatment", "d", "--outcome", "y"]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
    assert!(stderr(&o).contains("row 8, column `x1`: non-numeric value `oops`"), "{}", stderr(&o));

    write_csv(&file, "y,d,x1,x2,c", (0..12).map(row));
    let o = run(&["--treatment", "d", "--outcome", "y"]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
    assert!(stderr(&o).contains("too few rows"));

    assert_eq!(run(&["--treatment", "d", "--outcome", "y", "--folds", "1"]).status.code(), Some(EXIT_USAGE));
}

#[test]
fn ortho_check_command() {
    let o = bin(&["ortho-check", "--p", "4", "--rho", "0.5", "--k", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "quantity,order,max_abs");
    let value = |q: &str, m: &str| -> f64 {
        text.lines()
            .map(|l| l.split(',').collect::<Vec<_>>())
            .find(|c| c[0] == q && c[1] == m)
            .map(|c| c[2].parse().unwrap())
            .unwrap()
    };
    assert!(value("psi_tl_directional", "1") <= 1e-5);
    assert!(value("psi_tl_directional", "2") <= 1e-5);
    assert!(value("psi_dl_cross_partial", "2") >= 0.5);
    assert!(value("lifted_double", "2") <= 1e-5);

    let o = bin(&["ortho-check", "--p", "3", "--rho", "0", "--k", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(bin(&["ortho-check", "--k", "0"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(bin(&["ortho-check", "--rho", "1"]).status.code(), Some(EXIT_USAGE));
}

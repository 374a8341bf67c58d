//! End-to-end tests of the `mortcast` binary: every command, the exit-code
//! contract, flag-over-config precedence, and rerun determinism.

use mortcast::forecast::ForecastDraws;
use mortcast::hpcurve::{default_wls_start, hp_prob};
use mortcast::lifetable::{MortalityGrid, Sex};
use nalgebra::DMatrix;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mortcast"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Deaths/exposures pair in the HMD period layout.
fn write_hmd_pair(dir: &Path, years: std::ops::RangeInclusive<i32>, ages: u32) -> (PathBuf, PathBuf) {
    let deaths_path = dir.join("deaths.txt");
    let expo_path = dir.join("exposures.txt");
    let mut d = String::from("Testland, Deaths (period 1x1)\n\n  Year   Age   Female   Male   Total\n");
    let mut e = String::from("Testland, Exposure to risk (period 1x1)\n\n  Year   Age   Female   Male   Total\n");
    for y in years {
        for a in 0..ages {
            let dd = 40.0 + a as f64 * 3.0 + (y % 7) as f64;
            let nn = 20000.0 + a as f64 * 120.0 - (y % 5) as f64 * 40.0;
            d.push_str(&format!("  {y}    {a}    {:.2}    {:.2}    {dd:.2}\n", dd / 2.0, dd / 2.0));
            e.push_str(&format!("  {y}    {a}    {:.2}    {:.2}    {nn:.2}\n", nn / 2.0, nn / 2.0));
        }
    }
    fs::write(&deaths_path, d).unwrap();
    fs::write(&expo_path, e).unwrap();
    (deaths_path, expo_path)
}

/// Small store written through the library, for fit/backtest commands.
fn write_store(
    dir: &Path,
    name: &str,
    n_ages: usize,
    years: std::ops::RangeInclusive<i32>,
) -> PathBuf {
    let year_first = *years.start();
    let n_years = (*years.end() - year_first + 1) as usize;
    let mut deaths = DMatrix::zeros(n_ages, n_years);
    let mut exposures = DMatrix::zeros(n_ages, n_years);
    for z in 0..n_ages {
        for t in 0..n_years {
            deaths[(z, t)] = 30.0 + z as f64 * 5.0 + (t % 4) as f64;
            exposures[(z, t)] = 10_000.0;
        }
    }
    let grid = MortalityGrid::new(Sex::Total, 0, year_first, deaths, exposures).unwrap();
    let path = dir.join(name);
    fs::write(&path, grid.to_store_csv()).unwrap();
    path
}

/// Store whose rates follow a plausible parametric mortality curve, so the
/// dynamic model's proposal construction finds usable seeds.
fn write_curve_store(dir: &Path, name: &str, n_ages: usize, n_years: usize) -> PathBuf {
    let psi = default_wls_start();
    let n = 50_000.0;
    let mut deaths = DMatrix::zeros(n_ages, n_years);
    let exposures = DMatrix::from_element(n_ages, n_years, n);
    for z in 0..n_ages {
        for t in 0..n_years {
            let p = hp_prob(z as u32, &psi) * (1.0 - 0.01 * t as f64);
            deaths[(z, t)] = (n * p).round();
        }
    }
    let grid = MortalityGrid::new(Sex::Total, 0, 2000, deaths, exposures).unwrap();
    let path = dir.join(name);
    fs::write(&path, grid.to_store_csv()).unwrap();
    path
}

#[test]
fn import_builds_store_and_reimport_is_identical() {
    let tmp = TempDir::new().unwrap();
    let (deaths, exposures) = write_hmd_pair(tmp.path(), 2000..=2003, 5);
    let args = [
        "import",
        "--deaths",
        deaths.to_str().unwrap(),
        "--exposures",
        exposures.to_str().unwrap(),
        "--sex",
        "total",
        "--out",
        "store.csv",
    ];
    assert_ok(&run(&args, tmp.path()));
    let first = fs::read(tmp.path().join("store.csv")).unwrap();
    // initial exposure: n = N + d/2 on the first cell (year 2000, age 0)
    let text = String::from_utf8(first.clone()).unwrap();
    let row = text
        .lines()
        .find(|l| l.starts_with("0,2000,"))
        .expect("first cell present");
    let fields: Vec<&str> = row.split(',').collect();
    let d: f64 = fields[2].parse().unwrap();
    let n: f64 = fields[3].parse().unwrap();
    assert_eq!(d, 45.0);
    assert_eq!(n, 20000.0 + d / 2.0);
    assert_ok(&run(&args, tmp.path()));
    let second = fs::read(tmp.path().join("store.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn import_mismatched_year_ranges_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let (deaths, _) = write_hmd_pair(tmp.path(), 2000..=2003, 5);
    let sub = tmp.path().join("short");
    fs::create_dir(&sub).unwrap();
    let (_, exposures_short) = write_hmd_pair(&sub, 2000..=2002, 5);
    let out = run(
        &[
            "import",
            "--deaths",
            deaths.to_str().unwrap(),
            "--exposures",
            exposures_short.to_str().unwrap(),
            "--sex",
            "total",
            "--out",
            "store.csv",
        ],
        tmp.path(),
    );
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn import_bad_sex_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let (deaths, exposures) = write_hmd_pair(tmp.path(), 2000..=2001, 3);
    let out = run(
        &[
            "import",
            "--deaths",
            deaths.to_str().unwrap(),
            "--exposures",
            exposures.to_str().unwrap(),
            "--sex",
            "everyone",
            "--out",
            "store.csv",
        ],
        tmp.path(),
    );
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn fit_smoke_grid_is_fast_and_rerun_deterministic() {
    let tmp = TempDir::new().unwrap();
    write_store(tmp.path(), "store.csv", 5, 2000..=2003);
    let run_fit = |out: &str| {
        run(
            &["fit", "--data", "store.csv", "--iterations", "1500", "--burnin", "500", "--thin", "5", "--seed", "11", "--out-dir", out],
            tmp.path(),
        )
    };
    let started = std::time::Instant::now();
    assert_ok(&run_fit("runa"));
    assert!(
        started.elapsed().as_secs_f64() < 10.0,
        "smoke fit took {:?}",
        started.elapsed()
    );
    assert_ok(&run_fit("runb"));
    let draws_a = fs::read(tmp.path().join("runa/draws.csv")).unwrap();
    let draws_b = fs::read(tmp.path().join("runb/draws.csv")).unwrap();
    assert_eq!(draws_a, draws_b, "draw stores differ between reruns");
    // reports agree on everything except wall time
    let mut ra: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("runa/report.json")).unwrap())
            .unwrap();
    let mut rb: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("runb/report.json")).unwrap())
            .unwrap();
    for v in [&mut ra, &mut rb] {
        v["wall_time_seconds"] = 0.0.into();
    }
    assert_eq!(ra, rb);
    for (_, acc) in ra["diagnostics"]["acceptance"].as_object().unwrap() {
        let acc = acc.as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    assert!(!ra["diagnostics"]["ess"].as_object().unwrap().is_empty());
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    write_store(tmp.path(), "store.csv", 5, 2000..=2003);
    fs::write(
        tmp.path().join("run.toml"),
        "data = \"store.csv\"\nout_dir = \"cfgout\"\n[mcmc]\niterations = 1000\nburnin = 200\nthin = 4\nseed = 3\n",
    )
    .unwrap();
    let out = run(
        &["fit", "--config", "run.toml", "--iterations", "800", "--burnin", "100"],
        tmp.path(),
    );
    assert_ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("cfgout/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["iterations"], 800);
    assert_eq!(report["burnin"], 100);
    assert_eq!(report["thin"], 4); // untouched key keeps the file value
    assert_eq!(report["seed"], 3);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    write_store(tmp.path(), "store.csv", 5, 2000..=2003);
    fs::write(tmp.path().join("bad.toml"), "data = \"store.csv\"\nmodle = \"gmrf\"\n").unwrap();
    let out = run(&["fit", "--config", "bad.toml"], tmp.path());
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn window_outside_data_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    write_store(tmp.path(), "store.csv", 5, 2000..=2003);
    let out = run(
        &["fit", "--data", "store.csv", "--year-last", "2010", "--iterations", "100", "--burnin", "10"],
        tmp.path(),
    );
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn missing_data_file_is_a_data_error_and_no_data_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["fit", "--data", "absent.csv"], tmp.path());
    assert_eq!(exit_code(&out), 3);
    let out = run(&["fit"], tmp.path());
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn forecast_outputs_are_consistent_with_the_draw_file() {
    let tmp = TempDir::new().unwrap();
    write_store(tmp.path(), "store.csv", 5, 2000..=2003);
    assert_ok(&run(
        &["fit", "--data", "store.csv", "--iterations", "1200", "--burnin", "400", "--thin", "4", "--seed", "7", "--out-dir", "fit"],
        tmp.path(),
    ));
    assert_ok(&run(
        &["forecast", "--draws", "fit/draws.csv", "--k", "3", "--seed", "5", "--out-dir", "fc"],
        tmp.path(),
    ));
    let draws_text = fs::read_to_string(tmp.path().join("fc/forecast_draws.csv")).unwrap();
    let fs_parsed = ForecastDraws::from_draws_csv(&draws_text).unwrap();
    // the summary must be exactly what the draw file implies
    let expect_summary = fs_parsed.to_summary_csv().unwrap();
    let got_summary = fs::read_to_string(tmp.path().join("fc/forecast_summary.csv")).unwrap();
    assert_eq!(got_summary, expect_summary);
    // survival rows agree with the survival curves of the same draws
    let surv = fs::read_to_string(tmp.path().join("fc/survival.csv")).unwrap();
    let row = surv.lines().nth(1).unwrap();
    let f: Vec<&str> = row.split(',').collect();
    let (age, span) = (f[0].parse::<u32>().unwrap(), f[1].parse::<usize>().unwrap());
    let curve = fs_parsed.survival_curve(age, span, 3).unwrap();
    let mean = curve.iter().sum::<f64>() / curve.len() as f64;
    assert_eq!(f[2].parse::<f64>().unwrap(), mean);
    let n_rows = surv.lines().count() - 1;
    let ages = fs_parsed.age_hi() - fs_parsed.age_lo + 1;
    let want_rows: usize = (1..=ages as usize).sum();
    assert_eq!(n_rows, want_rows);
}

#[test]
fn forecast_rejects_horizon_zero_and_bad_level() {
    let tmp = TempDir::new().unwrap();
    write_store(tmp.path(), "store.csv", 5, 2000..=2003);
    assert_ok(&run(
        &["fit", "--data", "store.csv", "--iterations", "400", "--burnin", "100", "--thin", "4", "--out-dir", "fit"],
        tmp.path(),
    ));
    let out = run(&["forecast", "--draws", "fit/draws.csv", "--k", "0"], tmp.path());
    assert_eq!(exit_code(&out), 2);
    let out = run(
        &["forecast", "--draws", "fit/draws.csv", "--k", "2", "--level", "1.5"],
        tmp.path(),
    );
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn hp_fit_and_forecast_round_trip() {
    let tmp = TempDir::new().unwrap();
    write_curve_store(tmp.path(), "store.csv", 12, 3);
    assert_ok(&run(
        &["fit", "--data", "store.csv", "--model", "hp", "--iterations", "300", "--burnin", "100", "--thin", "4", "--seed", "2", "--out-dir", "fit"],
        tmp.path(),
    ));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("fit/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["model"], "hp");
    assert_ok(&run(
        &["forecast", "--draws", "fit/draws.csv", "--k", "2", "--out-dir", "fc"],
        tmp.path(),
    ));
    let text = fs::read_to_string(tmp.path().join("fc/forecast_draws.csv")).unwrap();
    let parsed = ForecastDraws::from_draws_csv(&text).unwrap();
    assert_eq!(parsed.model, "hp");
    assert_eq!(parsed.horizons, 2);
    parsed.validate().unwrap();
}

#[test]
fn backtest_default_plan_round_counts_and_external_parity() {
    let tmp = TempDir::new().unwrap();
    write_store(tmp.path(), "store.csv", 3, 1980..=2013);
    assert_ok(&run(
        &["backtest", "--data", "store.csv", "--model", "oracle", "--out-dir", "bt"],
        tmp.path(),
    ));
    let scores = fs::read_to_string(tmp.path().join("bt/backtest_scores.csv")).unwrap();
    for line in scores.lines().skip(1).filter(|l| !l.contains(",avg,")) {
        let f: Vec<&str> = line.split(',').collect();
        let horizon: usize = f[1].parse().unwrap();
        let rounds: usize = f[3].parse().unwrap();
        assert_eq!(rounds, 25 - horizon);
        // oracle sanity: exact point forecasts, always-covering intervals
        assert_eq!(f[4].parse::<f64>().unwrap(), 1.0);
        assert_eq!(f[7].parse::<f64>().unwrap(), 0.0);
    }
    assert_ok(&run(
        &["backtest", "--data", "store.csv", "--external", "bt/forecast_rows.csv", "--out-dir", "ext"],
        tmp.path(),
    ));
    let scores_ext = fs::read_to_string(tmp.path().join("ext/backtest_scores.csv")).unwrap();
    assert_eq!(scores, scores_ext);
}

#[test]
fn backtest_unknown_model_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    write_store(tmp.path(), "store.csv", 3, 1980..=2013);
    let out = run(
        &["backtest", "--data", "store.csv", "--model", "lee_carter", "--out-dir", "bt"],
        tmp.path(),
    );
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn diag_recomputes_an_ess_table() {
    let tmp = TempDir::new().unwrap();
    write_store(tmp.path(), "store.csv", 5, 2000..=2003);
    assert_ok(&run(
        &["fit", "--data", "store.csv", "--iterations", "1200", "--burnin", "400", "--thin", "4", "--out-dir", "fit"],
        tmp.path(),
    ));
    let out = run(&["diag", "--draws", "fit/draws.csv"], tmp.path());
    assert_ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("name,ess\n"));
    let mut names = Vec::new();
    for line in text.lines().skip(1) {
        let (name, value) = line.split_once(',').unwrap();
        names.push(name.to_string());
        let v: f64 = value.parse().unwrap();
        assert!(v > 0.0, "{name} has nonpositive ess {v}");
    }
    for want in ["tau", "rho_age", "b"] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
    // --out writes the same table to a file
    assert_ok(&run(
        &["diag", "--draws", "fit/draws.csv", "--out", "ess.csv"],
        tmp.path(),
    ));
    assert_eq!(fs::read_to_string(tmp.path().join("ess.csv")).unwrap(), text);
}

#[test]
fn config_show_prints_parseable_defaults() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["config", "show"], tmp.path());
    assert_ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let doc: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(doc["mcmc"]["iterations"].as_integer(), Some(60_000));
    assert_eq!(doc["mcmc"]["burnin"].as_integer(), Some(20_000));
    assert_eq!(doc["mcmc"]["thin"].as_integer(), Some(10));
    assert_eq!(doc["backtest"]["window"].as_integer(), Some(10));
    assert_eq!(doc["backtest"]["origin_first"].as_integer(), Some(1989));
    assert_eq!(doc["forecast"]["level"].as_float(), Some(0.95));
    assert_eq!(doc["model"].as_str(), Some("gmrf"));
}

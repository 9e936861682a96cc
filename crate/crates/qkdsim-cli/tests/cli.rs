//! End-to-end checks of the command-line surface: artifacts, exit codes and
//! reproducibility.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qkdsim"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn light_config() -> &'static str {
    r#"{
  "scenario": "single",
  "source": {"pair_rate": 1e6, "heralding_eff_a": 0.1, "heralding_eff_b": 1.0,
             "misalignment_error": 0.033},
  "arm_a": {"jitter_sigma": 1.5e-10},
  "arm_b": {"loss_db": 10.0, "jitter_sigma": 1.5e-10},
  "clocks": {"offset_s": 4.7812e-4, "drift": 0.0},
  "seed": 11
}"#
}

#[test]
fn analyze_reproduces_the_reference_average() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("stats.json"),
        r#"{"n_sift_z": 12100, "n_sift_x": 17960, "qber_z": 0.06595,
            "qber_x": 0.070657, "duration": 68.0}"#,
    )
    .unwrap();
    let out = run(&["analyze", "--stats", "stats.json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let skr = report["skr_bps"].as_f64().unwrap();
    assert!(
        (skr - 71.7972).abs() / 71.7972 <= 0.05,
        "analyze skr {skr} not within 5% of 71.7972"
    );

    // asymptotic mode on the same stats
    let out = run(
        &["analyze", "--stats", "stats.json", "--mode", "asymptotic"],
        dir.path(),
    );
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let skr = report["skr_bps"].as_f64().unwrap();
    assert!((skr - 90.75).abs() < 0.5);
}

#[test]
fn model_sweep_peaks_above_the_measured_rate() {
    let dir = tempfile::tempdir().unwrap();
    // mu sweep at the 43.5 dB reference loss
    let out = run(
        &[
            "model",
            "--preset",
            "terrestrial",
            "--sweep",
            "mu",
            "--from",
            "1e-3",
            "--to",
            "0.5",
            "--points",
            "120",
            "--log",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "variable,skr_bps,qber_z,qber_x,singles_a,singles_b,coinc_total"
    );
    let max_skr = lines
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .fold(f64::MIN, f64::max)
        .max(f64::MIN);
    assert!(max_skr >= 300.0, "sweep max {max_skr} bps");
}

#[test]
fn simulate_then_keygen_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("link.json"), light_config()).unwrap();
    let simulate = |suffix: &str| {
        let out = run(
            &[
                "simulate",
                "--config",
                "link.json",
                "--duration",
                "0.5",
                "--out-a",
                &format!("a{suffix}.qtag"),
                "--out-b",
                &format!("b{suffix}.qtag"),
                "--truth",
                &format!("truth{suffix}.json"),
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    simulate("1");
    simulate("2");
    let a1 = fs::read(dir.path().join("a1.qtag")).unwrap();
    let a2 = fs::read(dir.path().join("a2.qtag")).unwrap();
    assert_eq!(a1, a2, "tag artifacts must be reproducible");
    assert!(a1.starts_with(b"QTAG"));
    assert_eq!(
        fs::read(dir.path().join("truth1.json")).unwrap(),
        fs::read(dir.path().join("truth2.json")).unwrap()
    );

    let keygen = |n: &str| {
        let out = run(
            &[
                "keygen",
                "--config",
                "link.json",
                "--a",
                "a1.qtag",
                "--b",
                "b1.qtag",
                "--include-key",
                "-o",
                &format!("report{n}.json"),
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    keygen("1");
    keygen("2");
    let r1 = fs::read(dir.path().join("report1.json")).unwrap();
    assert_eq!(r1, fs::read(dir.path().join("report2.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&r1).unwrap();
    assert!(report["final_length"].as_u64().unwrap() > 0);
    assert!((report["offset_ps"].as_f64().unwrap() - 4.7812e8).abs() < 1e4);
    assert!(report["final_key_hex"].as_str().unwrap().len() > 16);
}

#[test]
fn validate_reports_paths_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("ok.json"), "{}").unwrap();
    let out = run(&["validate", "--config", "ok.json"], dir.path());
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "ok");

    fs::write(
        dir.path().join("bad.json"),
        r#"{"arm_b": {"loss_db": -5.0}, "protocol": {"coincidence_window": 0.0}}"#,
    )
    .unwrap();
    let out = run(&["validate", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.contains("arm_b.loss_db"), "{err}");
    assert!(err.contains("protocol.coincidence_window"), "{err}");

    fs::write(dir.path().join("unknown.json"), r#"{"armb": {}}"#).unwrap();
    let out = run(&["validate", "--config", "unknown.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sync_failure_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    // two unrelated dark-count streams
    let noise_cfg = r#"{
  "source": {"pair_rate": 0.0},
  "arm_a": {"dark_rate": 20000.0},
  "arm_b": {"dark_rate": 20000.0},
  "seed": 3
}"#;
    fs::write(dir.path().join("noise.json"), noise_cfg).unwrap();
    for (seed, a, b) in [("5", "a1.qtag", "b1.qtag"), ("6", "a2.qtag", "b2.qtag")] {
        let out = run(
            &[
                "simulate", "--config", "noise.json", "--duration", "0.5", "--seed", seed,
                "--out-a", a, "--out-b", b,
            ],
            dir.path(),
        );
        assert!(out.status.success());
    }
    let out = run(
        &["sync", "--a", "a1.qtag", "--b", "b2.qtag"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn optimizer_reports_unreachable_loss_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("dead.json"),
        r#"{"arm_b": {"loss_db": 130.0, "noise_yield": 2.2e-6}}"#,
    )
    .unwrap();
    let out = run(&["optimize", "--config", "dead.json"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sync_emits_clock_pairs_and_histogram() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("link.json"), light_config()).unwrap();
    let out = run(
        &[
            "simulate", "--config", "link.json", "--duration", "1.0",
            "--out-a", "a.qtag", "--out-b", "b.qtag",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let out = run(
        &[
            "sync", "--a", "a.qtag", "--b", "b.qtag", "--pairs", "pairs.csv",
            "--histogram", "hist.csv", "--clock", "clock.json",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let clock: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("clock.json")).unwrap()).unwrap();
    assert!((clock["offset_ps"].as_f64().unwrap() - 4.7812e8).abs() < 1e4);
    let pairs = fs::read_to_string(dir.path().join("pairs.csv")).unwrap();
    assert!(pairs.starts_with("t_corrected_ps,channel_a,channel_b,dt_ps\n"));
    assert!(pairs.lines().count() > 1000);
    let hist = fs::read_to_string(dir.path().join("hist.csv")).unwrap();
    assert!(hist.starts_with("bin_center_ps,count\n"));
}

#[test]
fn pass_tracking_beats_fixed_rate() {
    let dir = tempfile::tempdir().unwrap();
    let total = |policy: &str| -> f64 {
        let out = run(
            &[
                "pass", "--preset", "micius",
                "--template", "triangular:60:80:60:5:0",
                "--policy", policy,
                "--report", "report.json",
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let report: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
        report["total_bits"].as_f64().unwrap()
    };
    let tracked = total("track");
    let fixed = total("fixed:0.0492");
    assert!(tracked >= fixed, "tracking {tracked} must beat fixed {fixed}");
    assert!(fixed > 0.0);
}

#[test]
fn every_subcommand_documents_its_flags() {
    let dir = tempfile::tempdir().unwrap();
    let expectations: &[(&str, &[&str])] = &[
        ("analyze", &["--stats", "--mode", "--ec-efficiency", "--eps", "--output"]),
        ("model", &["--config", "--preset", "--sweep", "--from", "--to", "--points", "--log"]),
        ("optimize", &["--loss-list", "--mu-lo", "--mu-hi"]),
        ("simulate", &["--duration", "--seed", "--out-a", "--out-b", "--format", "--truth", "--profile"]),
        ("sync", &["--window", "--search-window", "--coarse-bin", "--segment", "--clock", "--pairs", "--histogram"]),
        ("keygen", &["--sample", "--sample-seed", "--pa-seed", "--include-key"]),
        ("pass", &["--profile", "--template", "--policy", "--report"]),
        ("validate", &["--config"]),
    ];
    for (sub, flags) in expectations {
        let out = run(&[sub, "--help"], dir.path());
        assert!(out.status.success(), "{sub} --help failed");
        let text = stdout(&out);
        for flag in *flags {
            assert!(text.contains(flag), "{sub} --help missing {flag}");
        }
    }
}

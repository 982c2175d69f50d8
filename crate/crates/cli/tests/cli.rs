use std::path::Path;
use std::process::{Command, Output};

fn pnsaf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pnsaf"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PNSAF_OUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
filter_length = 32
num_subbands = 2
snr_db = 30.0
run_length = 2000
ensemble_size = 2
base_seed = 7

[input]
kind = "ar1"

[path]
kind = "sparse"
active_taps = 4

[[algorithms]]
name = "vss"
step_control = { rule = "shrinkage_vss" }

[[algorithms]]
name = "fixed"
step_control = { rule = "fixed", mu = 0.5 }
"#;

#[test]
fn design_writes_prototype_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = pnsaf(&["design", "--subbands", "4", "--out", "bank"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("bank/prototype_n4_l32.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("index,coefficient"));
    assert_eq!(csv.lines().count(), 33);
    let report = std::fs::read_to_string(dir.path().join("bank/prototype_n4_l32_quality.txt")).unwrap();
    let atten: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("stopband_attenuation_db = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(atten >= 50.0, "{report}");
    assert_eq!(stdout(&o), report);
}

#[test]
fn design_single_band_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let o = pnsaf(&["design", "-n", "1", "-o", "."], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("prototype_n1_l1.csv")).unwrap();
    assert_eq!(csv, "index,coefficient\n0,1.000000000e+00\n");
}

#[test]
fn design_rejects_short_prototype_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = pnsaf(&["design", "-n", "4", "-l", "6", "-o", "bank"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("shorter than"), "{}", stderr(&o));
    assert!(!dir.path().join("bank").exists());
}

#[test]
fn out_dir_defaults_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pnsaf"))
        .args(["design", "-n", "2"])
        .current_dir(dir.path())
        .env("PNSAF_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("from-env/prototype_n2_l16.csv").exists());
}

#[test]
fn run_exports_curves_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = pnsaf(&["run", "--config", "small.toml", "--out", "res"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("vss") && out.contains("fixed"), "{out}");
    let manifest = pnsaf::harness::read_manifest(&dir.path().join("res/manifest.toml")).unwrap();
    assert_eq!(manifest.spec.ensemble_size, 2);
    assert_eq!(manifest.files.len(), 2);
    let text = std::fs::read_to_string(dir.path().join("res/vss.csv")).unwrap();
    let table = pnsaf::harness::parse_csv(&text).unwrap();
    assert_eq!(table.rows.len(), 1000);
    assert!(table.column("nmsd_db").unwrap().iter().all(|x| x.is_finite()));
    let leftovers: Vec<_> = std::fs::read_dir(dir.path().join("res"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "partial"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn run_is_reproducible_and_seed_changes_it() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    for (out, extra) in [("a", None), ("b", None), ("c", Some("99"))] {
        let mut args = vec!["run", "-c", "small.toml", "-o", out, "--threads", "1"];
        if let Some(seed) = extra {
            args.extend(["--seed", seed]);
        }
        let o = pnsaf(&args, dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &str| std::fs::read_to_string(dir.path().join(d).join("vss.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn override_sets_ensemble_size() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = pnsaf(
        &[
            "run",
            "-c",
            "small.toml",
            "--override",
            "ensemble_size=1",
            "--override",
            "algorithms.1.step_control.mu=0.25",
            "-o",
            "res",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = pnsaf::harness::read_manifest(&dir.path().join("res/manifest.toml")).unwrap();
    assert_eq!(manifest.spec.ensemble_size, 1);
    assert_eq!(manifest.seeds.len(), 1);
    assert!(matches!(
        manifest.spec.algorithms[1].step_control,
        pnsaf::harness::StepControlSpec::Fixed { mu } if mu == 0.25
    ));
}

#[test]
fn malformed_config_reports_line_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let broken = SMALL.replace("snr_db = 30.0", "snr_db = \"loud\"");
    std::fs::write(dir.path().join("broken.toml"), broken).unwrap();
    let o = pnsaf(&["run", "-c", "broken.toml", "-o", "res"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("line 4"), "{err}");
    assert!(!dir.path().join("res").exists());

    std::fs::write(
        dir.path().join("typo.toml"),
        SMALL.replace("ensemble_size", "ensemble_sise"),
    )
    .unwrap();
    let o = pnsaf(&["run", "-c", "typo.toml", "-o", "res"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ensemble_sise"), "{}", stderr(&o));
}

#[test]
fn bad_override_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    for bad in ["ensemble_size", "algorithms.5.name=x", "ensemble_size=0"] {
        let o = pnsaf(&["run", "-c", "small.toml", "--override", bad, "-o", "res"], dir.path());
        assert_eq!(o.status.code(), Some(1), "{bad}");
        assert!(!dir.path().join("res").exists());
    }
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = pnsaf(
        &[
            "sweep",
            "-c",
            "small.toml",
            "--param",
            "subbands",
            "--values",
            "2,4",
            "--override",
            "ensemble_size=1",
            "-o",
            "sw",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for n in [2, 4] {
        let m = pnsaf::harness::read_manifest(&dir.path().join(format!("sw/num_subbands-{n}/manifest.toml"))).unwrap();
        assert_eq!(m.spec.num_subbands, n);
    }
}

#[test]
fn sweep_rejects_empty_or_invalid_values_before_running() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = pnsaf(
        &["sweep", "-c", "small.toml", "--param", "lambda", "--values"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let o = pnsaf(
        &[
            "sweep",
            "-c",
            "small.toml",
            "--param",
            "lambda",
            "--values",
            "3,-1",
            "-o",
            "sw",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("sw").exists());
    let o = pnsaf(
        &["sweep", "-c", "small.toml", "--param", "volume", "--values", "1"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bundled_configs_are_listed_and_printable() {
    let dir = tempfile::tempdir().unwrap();
    let o = pnsaf(&["configs"], dir.path());
    assert!(o.status.success());
    for name in [
        "subband_count",
        "threshold_snr30",
        "threshold_snr20",
        "tracking_snr30",
        "tracking_snr20",
    ] {
        assert!(stdout(&o).contains(name));
    }
    let o = pnsaf(&["configs", "tracking_snr30"], dir.path());
    assert!(stdout(&o).contains("path_flip_sample = 140000"));
    let o = pnsaf(&["configs", "nonexistent"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

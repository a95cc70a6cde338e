use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use potsys_cli::{check_bundled, RunManifest, BUNDLED, SCHEMA_VERSION};
use regex::Regex;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_potsys"))
}

fn bundled_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.json"))
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn scalar_irf_outcome_column() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["irf"], &bundled_path("scalar-irf"), tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("irf.csv")).unwrap();
    let y: Vec<(String, String)> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect::<Vec<_>>())
        .filter(|c| c[1] == "y" && c[3] == "0")
        .map(|c| (c[0].clone(), c[4].clone()))
        .collect();
    assert_eq!(&y[..3], &[("0".into(), "2".into()), ("1".into(), "1".into()), ("2".into(), "0.5".into())]);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 11);
    assert!(stdout.starts_with("irf h=0 psi_y=[2]"));
}

#[test]
fn identical_config_and_seed_give_identical_outputs() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for name in ["randtest-fisher", "control-toy", "linear-confounded"] {
        let (da, db) = (a.path().join(name), b.path().join(name));
        assert!(run(&["run"], &bundled_path(name), &da).status.success());
        assert!(run(&["run"], &bundled_path(name), &db).status.success());
        let (ma, mb) = (manifest(&da), manifest(&db));
        assert_eq!(ma.config_hash, mb.config_hash);
        assert_eq!(ma.outputs, mb.outputs, "{name}");
        for f in &ma.outputs {
            assert_eq!(std::fs::read(da.join(&f.file)).unwrap(), std::fs::read(db.join(&f.file)).unwrap());
        }
    }
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = bundled_path("randtest-fisher");
    assert!(run(&["randtest"], &cfg, &tmp.path().join("a")).status.success());
    let o = bin()
        .args(["randtest", "--seed", "99", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("b"))
        .output()
        .unwrap();
    assert!(o.status.success());
    let (ma, mb) = (manifest(&tmp.path().join("a")), manifest(&tmp.path().join("b")));
    assert_eq!(mb.seed, 99);
    assert_ne!(ma.config_hash, mb.config_hash);
    assert_ne!(ma.outputs, mb.outputs);
}

#[test]
fn manifest_hashes_cover_every_output() {
    let tmp = TempDir::new().unwrap();
    assert!(run(&["control"], &bundled_path("control-toy"), tmp.path()).status.success());
    let m = manifest(tmp.path());
    assert_eq!(m.schema_version, SCHEMA_VERSION);
    assert_eq!(m.task, "control");
    assert_eq!(m.version, env!("CARGO_PKG_VERSION"));
    let mut listed: Vec<String> = m.outputs.iter().map(|o| o.file.clone()).collect();
    listed.push("manifest.json".into());
    listed.sort();
    let mut on_disk: Vec<String> = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    on_disk.sort();
    assert_eq!(listed, on_disk);
    for o in &m.outputs {
        assert_eq!(std::fs::read(tmp.path().join(&o.file)).unwrap().len(), o.bytes);
        assert_eq!(o.sha256.len(), 64);
    }
}

#[test]
fn two_tasks_exit_with_parse_code() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "two.json",
        r#"{"system": {"scenario": {"name": "news-impact"}},
            "task": {"simulate": {}, "irf": {"horizon": 3}}}"#,
    );
    let o = run(&["run"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("exactly one task"), "{}", stderr(&o));
    assert!(stderr(&o).contains("error[parse]"));
}

#[test]
fn error_categories_map_to_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cases: [(&str, &str, &[&str], i32); 7] = [
        ("bad_json.json", "{ not json", &["run"], 2),
        (
            "unknown_field.json",
            r#"{"system": {"scenario": {"name": "news-impact"}}, "task": {"simulate": {}}, "sed": 1}"#,
            &["run"],
            2,
        ),
        (
            "unknown_scenario.json",
            r#"{"system": {"scenario": {"name": "nope"}}, "task": {"simulate": {}}}"#,
            &["run"],
            3,
        ),
        (
            "mismatch.json",
            r#"{"system": {"scenario": {"name": "news-impact"}}, "task": {"simulate": {}}}"#,
            &["irf"],
            3,
        ),
        (
            "missing_file.json",
            r#"{"system": {"scenario": {"name": "randtest-fisher"}},
                "task": {"randtest": {"draws": 100, "observed": "nowhere.json"}}}"#,
            &["run"],
            3,
        ),
        (
            "few_draws.json",
            r#"{"system": {"scenario": {"name": "randtest-fisher"}}, "task": {"randtest": {"draws": 10}}}"#,
            &["run"],
            3,
        ),
        (
            "state_cap.json",
            r#"{"system": {"scenario": {"name": "control-toy"}},
                "task": {"control": {"loss": {"kind": "zero"}, "state_cap": 3}}}"#,
            &["control"],
            4,
        ),
    ];
    for (file, text, args, code) in cases {
        let cfg = write_config(d, file, text);
        let o = run(args, &cfg, &d.join("out"));
        assert_eq!(o.status.code(), Some(code), "{file}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error["), "{file}");
    }
    let o = bin().args(["run", "--config"]).arg(d.join("absent.json")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_system_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let mut spec: Value = serde_json::from_str(&potsys::scenarios::news_impact(0.5, 1.0, 0.5, 10).to_json().unwrap()).unwrap();
    spec["noise"]["v"]["probs"] = serde_json::json!([0.4, 0.5]);
    let cfg = serde_json::json!({ "system": { "spec": spec }, "task": { "simulate": {} } });
    let path = write_config(tmp.path(), "bad.json", &cfg.to_string());
    let o = run(&["simulate"], &path, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("error[validation]"));
}

#[test]
fn bundled_configs_are_listed_and_valid() {
    assert!(BUNDLED.len() >= 6);
    for name in potsys::scenarios::NAMES {
        assert!(BUNDLED.iter().any(|(n, _)| *n == name), "{name}");
    }
    for (name, _) in BUNDLED {
        check_bundled(name).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    let tmp = TempDir::new().unwrap();
    let o = bin().arg("scenarios").arg("--out").arg(tmp.path()).output().unwrap();
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), BUNDLED.len());
    for (name, text) in BUNDLED {
        assert_eq!(std::fs::read_to_string(tmp.path().join(format!("{name}.json"))).unwrap(), text);
    }
}

#[test]
fn randtest_fisher_is_fast() {
    let tmp = TempDir::new().unwrap();
    let start = Instant::now();
    let o = run(&["randtest"], &bundled_path("randtest-fisher"), tmp.path());
    let secs = start.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(secs < 10.0, "{secs}s");
    let res: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("randtest.json")).unwrap()).unwrap();
    assert_eq!(res["b"], 200);
    let p = res["p_value"].as_f64().unwrap();
    assert!(p > 0.0 && p <= 1.0);
}

#[test]
fn simulated_trajectory_feeds_a_later_test() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let sim = write_config(
        d,
        "sim.json",
        r#"{"system": {"scenario": {"name": "randtest-fisher"}}, "task": {"simulate": {}}, "seed": 3}"#,
    );
    assert!(run(&["simulate"], &sim, &d.join("sim")).status.success());
    let from_file = write_config(
        d,
        "test.json",
        r#"{"system": {"scenario": {"name": "randtest-fisher"}},
            "task": {"randtest": {"draws": 200, "observed": "sim/trajectory_r0.json"}}, "seed": 3}"#,
    );
    let inline = write_config(
        d,
        "inline.json",
        r#"{"system": {"scenario": {"name": "randtest-fisher"}}, "task": {"randtest": {"draws": 200}}, "seed": 3}"#,
    );
    assert!(run(&["randtest"], &from_file, &d.join("a")).status.success());
    assert!(run(&["randtest"], &inline, &d.join("b")).status.success());
    assert_eq!(
        std::fs::read(d.join("a/randtest.json")).unwrap(),
        std::fs::read(d.join("b/randtest.json")).unwrap()
    );
}

fn extra_configs(dir: &Path) -> Vec<(PathBuf, &'static str)> {
    let texts = [
        (
            "sim2.json",
            r#"{"system": {"scenario": {"name": "linear-confounded", "horizon": 50}}, "task": {"simulate": {"replications": 2}}}"#,
            "simulate",
        ),
        (
            "invert.json",
            r#"{"system": {"scenario": {"name": "news-impact", "horizon": 200}},
                "task": {"invert": {"family": {"q": 0, "p": 0, "dy": 1, "da": 1},
                                    "grid": {"kind": "axes", "axes": [{"start": 0.0, "stop": 4.0, "steps": 9}]},
                                    "draws": 200}}, "seed": 4}"#,
            "invert",
        ),
        (
            "dim.json",
            r#"{"system": {"scenario": {"name": "news-impact", "horizon": 2000}},
                "task": {"estimate": {"method": {"kind": "diff_in_means", "a": [1.0], "a_alt": [0.0]}, "horizons": [0, 1, 2]}}}"#,
            "estimate",
        ),
        (
            "aipw.json",
            r#"{"system": {"scenario": {"name": "news-impact", "horizon": 2000}},
                "task": {"estimate": {"method": {"kind": "aipw", "a": [1.0], "a_alt": [0.0],
                                                  "propensity": {"kind": "empirical"},
                                                  "outcome": {"kind": "cell_linear", "history": true}},
                                      "horizons": [0]}}}"#,
            "estimate",
        ),
        (
            "kernel.json",
            r#"{"system": {"scenario": {"name": "news-impact", "horizon": 500}},
                "task": {"estimate": {"method": {"kind": "kernel", "a": [1.0], "a_alt": [0.0]}, "horizons": [0]}}}"#,
            "estimate",
        ),
        (
            "marginal.json",
            r#"{"system": {"scenario": {"name": "linear-confounded", "horizon": 20}},
                "task": {"oracle": {"estimand": "marginal", "t": 5, "horizons": [0, 2], "n_reps": 50, "a": [0.5]}}}"#,
            "oracle",
        ),
    ];
    texts
        .iter()
        .map(|(file, text, task)| (write_config(dir, file, text), *task))
        .collect()
}

#[test]
fn more_tasks_run() {
    let tmp = TempDir::new().unwrap();
    for (cfg, task) in extra_configs(tmp.path()) {
        let out = tmp.path().join(cfg.file_stem().unwrap());
        let o = run(&[task], &cfg, &out);
        assert!(o.status.success(), "{}: {}", cfg.display(), stderr(&o));
        assert!(!o.stdout.is_empty());
    }
    let est = std::fs::read_to_string(tmp.path().join("dim/estimate.csv")).unwrap();
    assert_eq!(est.lines().count(), 4);
    let marg: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("marginal/oracle.json")).unwrap()).unwrap();
    // y = 0.5 y₋₁ + x + 2a + w: derivative 2 at h = 0, 0.5 at h = 2
    let v0 = marg[0]["value"][0].as_f64().unwrap();
    let v2 = marg[1]["value"][0].as_f64().unwrap();
    assert!((v0 - 2.0).abs() < 1e-6 && (v2 - 0.5).abs() < 1e-6, "{v0} {v2}");
    let region = std::fs::read_to_string(tmp.path().join("invert/region.csv")).unwrap();
    assert_eq!(region.lines().count(), 10);
}

fn glob_match(pattern: &str, name: &str) -> bool {
    match pattern.split_once('*') {
        None => pattern == name,
        Some((pre, post)) => {
            name.len() >= pre.len() + post.len()
                && name.starts_with(pre)
                && name.ends_with(post)
                && name[pre.len()..name.len() - post.len()].chars().all(|c| c.is_ascii_digit())
        }
    }
}

fn check_against_schema(schema: &Value, dir: &Path) -> usize {
    let mut checked = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        let text = std::fs::read_to_string(&path).unwrap();
        if name.ends_with(".csv") {
            let (_, re) = schema["csv"]
                .as_object()
                .unwrap()
                .iter()
                .find(|(p, _)| glob_match(p, &name))
                .unwrap_or_else(|| panic!("no schema for {name}"));
            let header = text.lines().next().unwrap();
            assert!(Regex::new(re.as_str().unwrap()).unwrap().is_match(header), "{name}: {header}");
        } else {
            let (_, s) = schema["json"]
                .as_object()
                .unwrap()
                .iter()
                .find(|(p, _)| glob_match(p, &name))
                .unwrap_or_else(|| panic!("no schema for {name}"));
            let v: Value = serde_json::from_str(&text).unwrap();
            let objects: Vec<&Value> = match s["type"].as_str().unwrap() {
                "array" => v.as_array().unwrap().iter().collect(),
                _ => vec![&v],
            };
            for o in objects {
                for key in s["required"].as_array().unwrap() {
                    assert!(o.get(key.as_str().unwrap()).is_some(), "{name} lacks {key}");
                }
            }
        }
        checked += 1;
    }
    checked
}

#[test]
fn outputs_match_the_checked_in_schema() {
    let schema: Value = serde_json::from_str(include_str!("../schemas/v1.json")).unwrap();
    assert_eq!(schema["version"], SCHEMA_VERSION);
    let tmp = TempDir::new().unwrap();
    let mut runs: Vec<(PathBuf, &str)> = BUNDLED.iter().map(|(n, _)| (bundled_path(n), "run")).collect();
    runs.extend(extra_configs(tmp.path()));
    let mut total = 0;
    for (i, (cfg, task)) in runs.iter().enumerate() {
        let out = tmp.path().join(format!("run{i}"));
        let o = run(&[task], cfg, &out);
        assert!(o.status.success(), "{}: {}", cfg.display(), stderr(&o));
        total += check_against_schema(&schema, &out);
    }
    assert!(total > 30);
}

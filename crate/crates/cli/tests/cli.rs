use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn discorec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_discorec"))
        .args(args)
        .env_remove("DISCOREC_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = discorec(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &["--users", "150", "--shows", "40", "--density", "0.03"];

fn small_dataset(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("data-{seed}"));
    let mut args = vec!["gen-data", "--seed", seed, "--out", p(&out)];
    args.extend_from_slice(SMALL);
    ok(&args);
    out
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn train_quick(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--data",
        p(data),
        "--out",
        p(out),
        "--epochs",
        "2",
        "--seed",
        "3",
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

fn report_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_prints_split_stats() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let mut args = vec!["gen-data", "--seed", "7", "--out", p(&a)];
    args.extend_from_slice(SMALL);
    let stdout = ok(&args);
    args[4] = p(&b);
    ok(&args);
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));

    for split in ["train", "valid", "test"] {
        let line = stdout
            .lines()
            .find(|l| l.trim_start().starts_with(split))
            .expect("split line");
        assert!(
            line.contains("users") && line.contains("episodes") && line.contains("interactions"),
            "{line}"
        );
    }
    assert!(stdout.contains("seed 7"));
}

#[test]
fn missing_out_is_a_usage_error() {
    let out = discorec(&["gen-data", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_variant_lists_the_valid_names() {
    let tmp = TempDir::new().unwrap();
    let out = discorec(&[
        "train",
        "--data",
        p(tmp.path()),
        "--out",
        p(tmp.path()),
        "--variant",
        "msacl-foo",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["tt", "tt-fd", "msacl-content", "msacl-kg", "msacl-kg-fd"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn zero_threads_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = discorec(&["--threads", "0", "gen-data", "--out", p(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let out = discorec(&["train", "--data", p(&tmp.path().join("nope")), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn contrastive_variant_without_contrast_matches_plain_two_tower() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "1");
    let tt = tmp.path().join("tt");
    let kg = tmp.path().join("kg");
    train_quick(&data, &tt, &["--variant", "tt"]);
    train_quick(
        &data,
        &kg,
        &["--variant", "msacl-kg", "--lambda", "0", "--dropout", "0"],
    );

    let mut tables = Vec::new();
    for ckpt in [&tt, &kg] {
        let ev = ckpt.join("eval");
        ok(&[
            "eval",
            "--data",
            p(&data),
            "--checkpoint",
            p(&ckpt.join("checkpoint.bin")),
            "--out",
            p(&ev),
        ]);
        tables.push(report_json(&ev)["rows"][0]["metrics"].clone());
    }
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn grid_search_trains_every_cell_and_keeps_the_best() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "2");
    let out = tmp.path().join("grid");
    let stdout = train_quick(
        &data,
        &out,
        &["--variant", "tt-fd", "--layers", "1,2", "--dropout", "0.1,0.5"],
    );
    let grid: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("grid.json")).unwrap()).unwrap();
    let cells = grid["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    let best = grid["best"].as_u64().unwrap() as usize;
    let top = cells
        .iter()
        .map(|c| c["val_ndcg_20"].as_f64().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(cells[best]["val_ndcg_20"].as_f64().unwrap(), top);
    assert!(stdout.starts_with("best"));

    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4 * 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["config_hash"].is_string() && v["seed"].as_u64() == Some(3));
    }
}

#[test]
fn evaluation_is_reproducible_and_reports_are_shaped() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "4");
    let model = tmp.path().join("m");
    train_quick(&data, &model, &["--variant", "tt"]);
    let ckpt = model.join("checkpoint.bin");

    let mut reports = Vec::new();
    for name in ["e1", "e2"] {
        let dir = tmp.path().join(name);
        ok(&[
            "eval",
            "--data",
            p(&data),
            "--checkpoint",
            p(&ckpt),
            "--baselines",
            "pop,pop-country,pop-age-country",
            "--out",
            p(&dir),
        ]);
        let mut v = report_json(&dir);
        v.as_object_mut().unwrap().remove("generated_at");
        reports.push((dir, v));
    }
    assert_eq!(reports[0].1, reports[1].1);

    let (dir, report) = &reports[0];
    let models: Vec<&str> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["model"].as_str().unwrap())
        .collect();
    assert_eq!(models, ["Pop", "Pop-Country", "Pop-Age-Country", "TT"]);
    assert!(report["config_hash"].is_string() && report["seed"].as_u64() == Some(3));

    let csv = fs::read_to_string(dir.join("buckets.csv")).unwrap();
    let buckets = report["buckets"]["rows"].as_array().unwrap();
    let nonempty: std::collections::BTreeSet<&str> = buckets.iter().map(|r| r["bucket"].as_str().unwrap()).collect();
    assert_eq!(csv.lines().count() - 1, nonempty.len() * models.len());
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",3")));
    assert!(fs::read_to_string(dir.join("report.txt")).unwrap().contains("seed 3"));

    let merged = tmp.path().join("merged");
    let stdout = ok(&[
        "report",
        p(&reports[0].0.join("report.json")),
        p(&reports[1].0.join("report.json")),
        "--out",
        p(&merged),
    ]);
    assert!(stdout.contains("Pop-Age-Country"));
    assert_eq!(
        fs::read_to_string(merged.join("buckets.csv")).unwrap().lines().count(),
        csv.lines().count()
    );
}

#[test]
fn checkpoint_from_another_schema_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path(), "5");
    let other = tmp.path().join("other");
    let mut args = vec!["gen-data", "--seed", "5", "--topics", "5", "--out", p(&other)];
    args.extend_from_slice(SMALL);
    ok(&args);
    let model = tmp.path().join("m");
    train_quick(&data, &model, &["--variant", "tt"]);
    let out = discorec(&[
        "eval",
        "--data",
        p(&other),
        "--checkpoint",
        p(&model.join("checkpoint.bin")),
        "--out",
        p(&tmp.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[synth]\nusers = 150\nshows = 40\ndensity = 0.03\nseed = 9\n").unwrap();
    let a = tmp.path().join("a");
    let stdout = ok(&["--config", p(&cfg), "gen-data", "--out", p(&a)]);
    assert!(stdout.contains("users 150") && stdout.contains("seed 9"));
    let stdout = ok(&[
        "--config",
        p(&cfg),
        "gen-data",
        "--seed",
        "11",
        "--out",
        p(&tmp.path().join("b")),
    ]);
    assert!(stdout.contains("seed 11"));

    fs::write(&cfg, "[synth]\nusers = 150\nbogus = 1\n").unwrap();
    let out = discorec(&["--config", p(&cfg), "gen-data", "--out", p(&a)]);
    assert_eq!(out.status.code(), Some(1));
}

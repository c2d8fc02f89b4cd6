use std::path::Path;
use std::process::{Command, Output};

fn reta(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_reta"));
    for (key, _) in std::env::vars() {
        if key.starts_with("RETA_") {
            cmd.env_remove(key);
        }
    }
    cmd.args(args).output().expect("spawn reta")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_small(path: &Path) {
    let o = reta(&[
        "gen",
        "--classes",
        "4",
        "--dim",
        "16",
        "--prompts",
        "6",
        "--samples-per-class",
        "30",
        "--views",
        "3",
        "--seed",
        "5",
        "-o",
        path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "gen failed: {}", stderr(&o));
}

#[test]
fn gen_run_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("small.bin");
    gen_small(&data);

    let out = dir.path().join("full");
    let o = reta(&["run", data.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("top-1 accuracy"));
    let log = std::fs::read_to_string(out.join("predictions.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 120);
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["samples"], 120);
    let saved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(saved.contains("enable_cer = true"));

    let off = dir.path().join("off");
    let o = reta(&["run", data.to_str().unwrap(), "--disable-cer", "-o", off.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(off.join("config.toml")).unwrap().contains("enable_cer = false"));

    let csv = dir.path().join("purity.csv");
    let o = reta(&[
        "report",
        out.join("predictions.jsonl").to_str().unwrap(),
        off.join("predictions.jsonl").to_str().unwrap(),
        "-o",
        csv.to_str().unwrap(),
        "--every",
        "40",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.lines().next().unwrap().contains("delta"), "{table}");
    let csv = std::fs::read_to_string(csv).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "samples,predictions#1,predictions#2");
    assert_eq!(rows.len(), 4);
}

#[test]
fn run_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    gen_small(&data);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = reta(&["run", data.to_str().unwrap(), "-o", out.to_str().unwrap()]);
        assert!(o.status.success());
        outputs.push((
            std::fs::read(out.join("metrics.json")).unwrap(),
            std::fs::read(out.join("predictions.jsonl")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn gen_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    gen_small(&a);
    gen_small(&b);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn eval_prints_all_variants() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    gen_small(&data);
    let json = dir.path().join("eval.json");
    let o = reta(&["eval", data.to_str().unwrap(), "-o", json.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for variant in ["configured", "no-cer", "no-ddc", "zero-shot"] {
        assert!(text.contains(variant), "missing {variant} in\n{text}");
    }
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    gen_small(&data);
    let o = reta(&["run", data.to_str().unwrap(), "--gamma", "0.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("gamma"));
    let o = reta(&["run", data.to_str().unwrap(), "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = reta(&["gen", "--prompts", "2", "--members", "3", "-o", dir.path().join("x.bin").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("K >= M"), "{}", stderr(&o));
}

#[test]
fn dataset_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    gen_small(&data);
    let bytes = std::fs::read(&data).unwrap();
    let cut = dir.path().join("cut.bin");
    std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    let o = reta(&["run", cut.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("offset"), "{}", stderr(&o));

    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"definitely not a dataset").unwrap();
    assert_eq!(reta(&["run", junk.to_str().unwrap()]).status.code(), Some(3));
    assert_eq!(reta(&["run", dir.path().join("missing.bin").to_str().unwrap()]).status.code(), Some(3));

    let log = dir.path().join("bad.jsonl");
    std::fs::write(&log, "{}\n").unwrap();
    let o = reta(&["report", log.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn environment_feeds_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    gen_small(&data);
    let out = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_reta"))
        .args(["run", data.to_str().unwrap(), "-o", out.to_str().unwrap()])
        .env("RETA_ETA", "0.25")
        .env("RETA_DISABLE_DDC", "true")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let saved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(saved.contains("eta = 0.25"), "{saved}");
    assert!(saved.contains("enable_ddc = false"), "{saved}");
}

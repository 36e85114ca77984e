use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cspflow(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cspflow"))
        .args(args)
        .current_dir(cwd)
        .env("CSPFLOW_LOG", "warn")
        .output()
        .expect("spawn cspflow")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout: {stdout}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn small_scenario(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    std::fs::write(&p, "name = \"small\"\nseed = 3\n\n[dataset.generate]\nn = 800\n").unwrap();
    p
}

#[test]
fn generate_writes_a_seeded_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(&cspflow(&["generate", "-n", "300", "--seed", "5", "--out", "a/data.jsonl"], d));
    assert!(out.contains("wrote 300 records"), "{out}");
    ok(&cspflow(&["generate", "-n", "300", "--seed", "5", "--out", "b.jsonl"], d));
    let a = std::fs::read(d.join("a/data.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.jsonl")).unwrap());
    let first: serde_json::Value = serde_json::from_slice(a.split(|b| *b == b'\n').next().unwrap()).unwrap();
    for key in ["id", "text", "ts_ms", "gold_label", "is_retweet"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn run_writes_artifacts_and_reruns_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_scenario(d);
    let out = ok(&cspflow(&["run", "--config", cfg.to_str().unwrap(), "--out", "r1"], d));
    assert!(out.contains("small: ingested 800"), "{out}");
    for f in ["metrics.csv", "quality.csv", "labels.csv", "shed.csv", "model.json", "manifest.json"] {
        assert!(d.join("r1").join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("r1/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    ok(&cspflow(&["run", "--config", "r1/manifest.json", "--out", "r2"], d));
    for f in ["metrics.csv", "quality.csv", "labels.csv", "shed.csv"] {
        assert_eq!(std::fs::read(d.join("r1").join(f)).unwrap(), std::fs::read(d.join("r2").join(f)).unwrap(), "{f}");
    }
    let svg = ok(&cspflow(&["plot", "r1/quality.csv", "--out", "q.svg"], d));
    assert!(svg.contains("q.svg"));
    assert!(std::fs::read_to_string(d.join("q.svg")).unwrap().contains("<polyline"));
}

#[test]
fn overrides_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_scenario(d);
    let c = cfg.to_str().unwrap();
    ok(&cspflow(&["run", "--config", c, "--seed", "4", "--rate", "40", "--out", "s4"], d));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("s4/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 4);
    assert_eq!(m["config"]["shape"]["rate"], 40.0);
    let bad = cspflow(&["run", "--config", c, "--mode", "fast"], d);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown mode"));
    let bad = cspflow(&["run", "--config", c, "--rate", "-1"], d);
    assert!(!bad.status.success());
}

#[test]
fn check_reports_pattern_properties() {
    let out = ok(&cspflow(&["check", "aidr.toml", "--min-redundancy", "3"], &configs()));
    assert!(out.contains("human_optional: true  collector -> extractor -> classifier -> output"), "{out}");
    assert!(out.contains("human_mandatory: false"), "{out}");
    assert!(out.contains("annotator        cspe  Processor"), "{out}");
}

#[test]
fn check_rejects_an_invalid_topology() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(
        &p,
        "version = 1\nname = \"bad\"\n[[pes]]\nid = \"a\"\nkind = \"ape\"\nbehavior = \"x\"\noutputs = [\"out\"]\n\n[[channels]]\nid = \"c\"\nmodality = \"point_to_point\"\ncapacity = 4\n\n[[data_flows]]\nfrom = \"a.out\"\nto = \"ghost.in\"\nchannel = \"c\"\n",
    )
    .unwrap();
    let out = cspflow(&["check", p.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("violation"), "{text}");
}

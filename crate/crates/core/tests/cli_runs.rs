use std::fs;
use std::path::Path;
use std::process::Command;

const CONFIG: &str = "\
family = sphere2
command = all
steps = 5
budget = 60
restarts = 8
cloud_budget = 100
draws = 40
start = 1, 0, 1
seed = 5
";

fn lab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lab")).args(args).output().expect("lab runs")
}

fn bodies(dir: &Path) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read_to_string(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, CONFIG).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg_s = cfg.to_str().unwrap();
    let ra = lab(&["--workers", "1", "--out", a.to_str().unwrap(), "run", cfg_s]);
    let rb = lab(&["--workers", "3", "--out", b.to_str().unwrap(), "run", cfg_s]);
    assert!(ra.status.success(), "{}", String::from_utf8_lossy(&ra.stderr));
    assert!(rb.status.success(), "{}", String::from_utf8_lossy(&rb.stderr));
    let (ba, bb) = (bodies(&a), bodies(&b));
    assert!(ba.len() >= 8, "{:?}", ba.iter().map(|x| &x.0).collect::<Vec<_>>());
    assert_eq!(ba, bb);
    let manifest = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert!(manifest.contains("config_hash"));
}

#[test]
fn malformed_config_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "family = x1^^2 - t\nnvars = 1\ncommand = profile\nseed = 1\n").unwrap();
    let r = lab(&["validate", cfg.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    let r = lab(&["run", tmp.path().join("missing.cfg").to_str().unwrap()]);
    assert_ne!(r.status.code(), Some(0));
}

#[test]
fn list_names_the_builtins() {
    let r = lab(&["list"]);
    assert!(r.status.success());
    let text = String::from_utf8_lossy(&r.stdout);
    for name in ["sphere2", "sphere3", "broughton"] {
        assert!(text.contains(name));
    }
}

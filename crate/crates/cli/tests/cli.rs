use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

fn cbc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbc")).args(args).env("CBC_OUT_DIR", out).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

const SMALL: &str = r#"{"name": "small", "config": {"n": 3, "p_c": 0.2, "g": 0.2, "num_blocks": 300}}"#;

#[test]
fn run_writes_golden_headers() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(dir.path(), "s.json", SMALL);
    let out = cbc(&["run", &s], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(first_line(&dir.path().join("small.metrics.csv")), "n,p_c,g,requests,gossips,tasks,mean_gap,p99_gap");
    assert_eq!(first_line(&dir.path().join("small.gaps.csv")), "gap,frequency");

    let transcript = std::fs::read_to_string(dir.path().join("small.transcript.jsonl")).unwrap();
    let mut shapes = BTreeSet::new();
    for line in transcript.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let obj = v.as_object().unwrap();
        let keys: Vec<&str> = obj.keys().map(|k| k.as_str()).collect();
        shapes.insert((obj["event"].as_str().unwrap().to_string(), keys.join(",")));
    }
    let expected: BTreeSet<(String, String)> = [
        ("phase", "event,height,phase,system,task,tick"),
        ("task-settled", "event,result,system,task,tick"),
        ("task-started", "event,local_expiry,peer,remote_expiry,system,task,tick"),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    assert_eq!(shapes, expected);
}

#[test]
fn sweep_rows_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(
        dir.path(),
        "grid.json",
        r#"{"name": "grid", "config": {"n": 3, "g": 0.1, "num_blocks": 400}, "sweep": {"p_c": [0.1, 0.2, 0.4]}}"#,
    );
    assert!(cbc(&["run", &s, "--parallel", "3"], dir.path()).status.success());
    let csv = std::fs::read_to_string(dir.path().join("grid.metrics.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 3);
    let requests: Vec<u64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(requests[0] < requests[1] && requests[1] < requests[2], "{requests:?}");

    let seq = tempfile::tempdir().unwrap();
    assert!(cbc(&["run", &s], seq.path()).status.success());
    assert_eq!(csv, std::fs::read_to_string(seq.path().join("grid.metrics.csv")).unwrap());

    let t = "grid-n3-p0.4-g0.1.transcript.jsonl";
    let reseeded = tempfile::tempdir().unwrap();
    assert!(cbc(&["run", &s, "--seed", "77", "--out", reseeded.path().to_str().unwrap()], dir.path()).status.success());
    assert_ne!(
        std::fs::read_to_string(dir.path().join(t)).unwrap(),
        std::fs::read_to_string(reseeded.path().join(t)).unwrap()
    );
}

#[test]
fn attack_reports() {
    let dir = tempfile::tempdir().unwrap();
    let adv = r#""adversary": {"kind": "adv2", "target_system": 4, "strategy": "fork-and-double-task"}"#;
    let on = write(
        dir.path(),
        "on.json",
        &format!(r#"{{"name": "on", "config": {{"n": 5, "g": 0.3, "num_blocks": 200, {adv}}}}}"#),
    );
    let off = write(
        dir.path(),
        "off.json",
        &format!(r#"{{"name": "off", "config": {{"n": 5, "g": 0.0, "num_blocks": 200, {adv}}}}}"#),
    );
    for s in [&on, &off] {
        let out = cbc(&["attack", s], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |name: &str| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(name)).unwrap()).unwrap()
    };
    let on = read("on.attack.json");
    let keys: Vec<&String> = on.as_object().unwrap().keys().collect();
    assert_eq!(
        keys,
        [
            "adversary",
            "detected",
            "detected_before_expiry",
            "detection_tick",
            "double_completion",
            "evidence_count",
            "victim_expiry_ticks",
            "victim_outcomes",
            "victims"
        ]
    );
    assert_eq!(on["detected"], true);
    let off = read("off.attack.json");
    assert_eq!(off["detected"], false);
    assert_eq!(off["double_completion"], true);
}

#[test]
fn forge_sweep_stays_under_bound() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(
        dir.path(),
        "f.json",
        r#"{"name": "f", "forge_targets": [0.01, 0.001], "forge_requests": 20000,
            "config": {"n": 2, "num_blocks": 100, "channel_mode": "permissioned-sampled",
                       "system_defaults": {"q": 100, "r": 67, "t": 1, "k": 5},
                       "adversary": {"kind": "adv1", "controlled": {"0": 0.66, "1": 0.66}}}}"#,
    );
    let out = cbc(&["attack", &s], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("f.forge.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "p_target,q,r,controlled,m,closed_form,empirical,bound,requests");
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(f[6] <= f[7], "{line}");
        assert!(f[5] < f[0], "{line}");
    }
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cases = [
        write(p, "broken.json", "{ not json"),
        write(p, "small_n.json", r#"{"name": "x", "config": {"n": 1}}"#),
        write(p, "unknown.json", r#"{"name": "x", "confg": {}}"#),
        write(p, "big.json", r#"{"name": "x", "max_runs": 2, "sweep": {"p_c": [0.1, 0.2, 0.3]}}"#),
        p.join("missing.json").to_string_lossy().into_owned(),
    ];
    for c in &cases {
        let out = cbc(&["run", c], p);
        assert_eq!(out.status.code(), Some(1), "{c}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let honest = write(p, "honest.json", SMALL);
    assert_eq!(cbc(&["attack", &honest], p).status.code(), Some(1));
    assert_eq!(cbc(&["frobnicate"], p).status.code(), Some(1));
    assert_eq!(cbc(&["--help"], p).status.code(), Some(0));
}

#[test]
fn printed_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = cbc(&["print-config"], dir.path());
    assert!(out.status.success());
    let mut v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["latency"], 1);
    assert_eq!(v["config"]["push_timer"], 10);
    v["config"]["num_blocks"] = 50.into();
    let s = write(dir.path(), "printed.json", &v.to_string());
    assert!(cbc(&["run", &s], dir.path()).status.success());
    assert!(dir.path().join("3_1_1.metrics.csv").exists());
}

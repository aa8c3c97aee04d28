use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

const SMALL: &str = "[world]\nclusters = 3\nper_cluster = 20\n";

fn semievol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semievol"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, SMALL).unwrap();
    path.display().to_string()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn theta_out_of_range_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("w");
    let out = semievol(&["--workdir", work.to_str().unwrap(), "select", "--theta", "150"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("theta must be in (0, 100]"), "{}", stderr(&out));
    assert!(!work.join("state.json").exists());
}

#[test]
fn unknown_flag_exits_one() {
    let out = semievol(&["evolve", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn json_errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("w");
    let missing = dir.path().join("missing.jsonl");
    let out = semievol(&[
        "--json",
        "--workdir",
        work.to_str().unwrap(),
        "--input",
        missing.to_str().unwrap(),
        "split",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(v["error"]["kind"], "io");
    assert_eq!(v["error"]["exit_code"], 2);

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\": \"a\"}\n").unwrap();
    let out = semievol(&["--json", "--workdir", work.to_str().unwrap(), "--input", bad.to_str().unwrap(), "split"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(v["error"]["exit_code"], 1);
}

#[test]
fn dry_run_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("w");
    let out = semievol(&["--workdir", work.to_str().unwrap(), "--dry-run", "--json", "iterate", "--rounds", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let plan = v["plan"].as_array().unwrap();
    assert_eq!(plan.len(), 1 + 3 * 8 + 2);
    assert!(!work.exists());
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut names: Vec<String> = [
        "labeled.jsonl",
        "unlabeled.jsonl",
        "test.jsonl",
        "pseudo.jsonl",
        "selected.jsonl",
        "selection_report.json",
        "eval_report.json",
        "payloads/warmup_r1.jsonl",
        "payloads/evolve_r1.jsonl",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let bytes = fs::read(dir.join(&n)).unwrap_or_else(|e| panic!("{n}: {e}"));
            (n, bytes)
        })
        .collect()
}

#[test]
fn evolve_is_deterministic_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for w in [&a, &b] {
        let out = semievol(&["--config", &cfg, "--seed", "7", "--workdir", w.to_str().unwrap(), "evolve"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(artifacts(&a), artifacts(&b));
    let before = artifacts(&a);
    let out = semievol(&["--config", &cfg, "--seed", "7", "--workdir", a.to_str().unwrap(), "evolve"]);
    assert!(out.status.success());
    assert_eq!(artifacts(&a), before);
    let resolved = fs::read_to_string(a.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 7"), "{resolved}");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, format!("{SMALL}[method]\ntheta = 30.0\nk = 2\n")).unwrap();
    let work = dir.path().join("w");
    let out = semievol(&[
        "--config",
        path.to_str().unwrap(),
        "--workdir",
        work.to_str().unwrap(),
        "--theta",
        "40",
        "warmup",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let resolved = fs::read_to_string(work.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("theta = 40.0"), "{resolved}");
    assert!(resolved.contains("k = 2"), "{resolved}");
    let state: serde_json::Value = serde_json::from_str(&fs::read_to_string(work.join("state.json")).unwrap()).unwrap();
    assert_eq!(state["stage"], "warmed");
}

#[test]
fn stage_commands_advance_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let work = dir.path().join("w");
    let w = work.to_str().unwrap();
    let stage = || {
        let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(work.join("state.json")).unwrap()).unwrap();
        s["stage"].as_str().unwrap().to_string()
    };
    for (cmd, want) in [
        ("split", "init"),
        ("warmup", "warmed"),
        ("infer", "justified"),
        ("select", "selected"),
        ("finetune", "evolved"),
        ("eval", "evaluated"),
    ] {
        let out = semievol(&["--config", &cfg, "--workdir", w, cmd]);
        assert!(out.status.success(), "{cmd}: {}", stderr(&out));
        assert_eq!(stage(), want, "after {cmd}");
    }
    let out = semievol(&["--config", &cfg, "--workdir", w, "--json", "eval", "--models", "base,warm"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(v["accuracy"]["base"].is_number() && v["accuracy"]["warm"].is_number(), "{v}");
}

#[test]
fn iterate_four_rounds_records_four_entries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let work = dir.path().join("w");
    let out = semievol(&["--config", &cfg, "--workdir", work.to_str().unwrap(), "iterate", "--rounds", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let state: serde_json::Value = serde_json::from_str(&fs::read_to_string(work.join("state.json")).unwrap()).unwrap();
    let history = state["history"].as_array().unwrap();
    assert_eq!(history.len(), 4);
    for (i, r) in history.iter().enumerate() {
        assert_eq!(r["round"], i + 1);
    }
}

#[test]
fn simlab_writes_a_world() {
    let dir = tempfile::tempdir().unwrap();
    let out_file = dir.path().join("tasks.jsonl");
    let out = semievol(&["--seed", "3", "simlab", "--clusters", "2", "--per-cluster", "5", "--out", out_file.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&out_file).unwrap().lines().count(), 10);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn hosted_round_against_the_served_simulator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let tasks = dir.path().join("tasks.jsonl");
    let out = semievol(&["--config", &cfg, "--seed", "5", "simlab", "--out", tasks.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let server_dir = dir.path().join("server");
    let _server = Server(
        Command::new(env!("CARGO_BIN_EXE_semievol"))
            .args(["--config", &cfg, "--seed", "5", "--workdir", server_dir.to_str().unwrap()])
            .args(["simlab", "--serve", "--addr", &addr])
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let deadline = Instant::now() + Duration::from_secs(20);
    while std::net::TcpStream::connect(&addr).is_err() {
        assert!(Instant::now() < deadline, "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    }

    let client_cfg = dir.path().join("client.toml");
    fs::write(
        &client_cfg,
        format!(
            "{SMALL}[backend]\nkind = \"http\"\nbase_model = \"sim-base\"\nembedding_model = \"sim-embed\"\n\
             [backend.http]\nbase_url = \"http://{addr}\"\n[backend.finetune]\nmode = \"hosted\"\npoll_interval_secs = 0\n"
        ),
    )
    .unwrap();
    let work = dir.path().join("w");
    let out = semievol(&[
        "--config",
        client_cfg.to_str().unwrap(),
        "--seed",
        "5",
        "--workdir",
        work.to_str().unwrap(),
        "--input",
        tasks.to_str().unwrap(),
        "--json",
        "evolve",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["stage"], "evaluated");
    assert!(v["models"]["evolved"]["name"].as_str().unwrap().starts_with("sim-base-ft-"), "{v}");
    // Without echo support the justifier's own logprobs are the score.
    let pseudo = fs::read_to_string(work.join("pseudo.jsonl")).unwrap();
    assert!(pseudo.contains("generation_logprobs"), "scores should fall back to generation logprobs");
}

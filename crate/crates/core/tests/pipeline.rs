//! Round orchestration: determinism, resume, isolation and the journal.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use semievol_core::backend::journal::replay;
use semievol_core::backend::{CommandFineTuner, Journal, ModelRef, Services};
use semievol_core::config::SIM_REGISTRY_FILE;
use semievol_core::pipeline::{audit_workdir, Pipeline, Stage, JOURNAL_FILE, PAYLOAD_DIR};
use semievol_core::simlab::{SimBackend, WorldSpec, SIM_EMBEDDING, SIM_WARM};
use semievol_core::{Error, RunConfig};

fn small(cfg: &mut RunConfig) {
    cfg.world = WorldSpec {
        clusters: 4,
        per_cluster: 25,
        ..WorldSpec::default()
    }
    .with_seed(cfg.seed);
}

/// Every artifact except those carrying wall-clock data or the workdir path.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            let rel = p.strip_prefix(dir).unwrap().display().to_string();
            if p.is_dir() {
                stack.push(p);
            } else if !["state.json", JOURNAL_FILE, ".lock", "config.resolved.toml"].contains(&rel.as_str()) {
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn assert_same_artifacts(a: &Path, b: &Path) {
    let (a, b) = (artifacts(a), artifacts(b));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(bytes == &b[name], "{name} differs");
    }
}

#[test]
fn same_seed_same_bytes() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut c1 = common::sim_config(d1.path(), 5);
    small(&mut c1);
    let mut c2 = c1.clone();
    c2.workdir = d2.path().to_path_buf();
    let s1 = common::run_sim(&c1, 2);
    let s2 = common::run_sim(&c2, 2);
    assert_eq!(s1.history, s2.history);
    assert_same_artifacts(d1.path(), d2.path());
}

#[test]
fn different_seeds_differ() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut c1 = common::sim_config(d1.path(), 5);
    small(&mut c1);
    let mut c2 = common::sim_config(d2.path(), 6);
    small(&mut c2);
    common::run_sim(&c1, 1);
    common::run_sim(&c2, 1);
    assert_ne!(
        fs::read(d1.path().join("pseudo.jsonl")).unwrap(),
        fs::read(d2.path().join("pseudo.jsonl")).unwrap()
    );
}

#[test]
fn resuming_after_every_stage_matches_an_uninterrupted_run() {
    let (straight, stepped) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = common::sim_config(straight.path(), 9);
    small(&mut cfg);
    common::run_sim(&cfg, 1);

    let mut cfg2 = cfg.clone();
    cfg2.workdir = stepped.path().to_path_buf();
    {
        let p = common::open(&cfg2);
        p.init_from_dataset(&cfg2.world.tasks().unwrap()).unwrap();
    }
    loop {
        // A fresh process each time: new pipeline, new in-memory backend.
        let p = common::open(&cfg2);
        let mut state = p.load_state().unwrap();
        if state.stage == Stage::Evaluated {
            break;
        }
        p.step(&mut state).unwrap();
    }
    assert_same_artifacts(straight.path(), stepped.path());
}

#[test]
fn settings_cannot_change_mid_round() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::sim_config(dir.path(), 3);
    small(&mut cfg);
    {
        let p = common::open(&cfg);
        let mut state = p.init_from_dataset(&cfg.world.tasks().unwrap()).unwrap();
        p.run_until(&mut state, Stage::Inferred).unwrap();
    }
    cfg.method.theta = 30.0;
    let p = common::open(&cfg);
    let err = p.load_state().unwrap_err();
    assert!(matches!(err, Error::State(_)), "{err:?}");
}

#[test]
fn workdir_admits_one_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::sim_config(dir.path(), 3);
    small(&mut cfg);
    let _held = common::open(&cfg);
    let (services, base) = semievol_core::config::services_from_config(&cfg).unwrap();
    assert!(matches!(Pipeline::open(cfg, services, base), Err(Error::State(_))));
}

#[test]
fn split_refuses_an_existing_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::sim_config(dir.path(), 3);
    small(&mut cfg);
    let p = common::open(&cfg);
    let tasks = cfg.world.tasks().unwrap();
    p.init_from_dataset(&tasks).unwrap();
    assert!(p.init_from_dataset(&tasks).is_err());
}

#[test]
fn iterate_folds_selections_and_never_trains_on_test() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::sim_config(dir.path(), 4);
    small(&mut cfg);
    let state = common::run_sim(&cfg, 3);
    assert_eq!(state.history.len(), 3);
    for pair in state.history.windows(2) {
        assert_eq!(pair[1].labeled, pair[0].labeled + pair[0].selected);
        assert_eq!(pair[1].unlabeled, pair[0].remaining);
    }
    assert_eq!(state.jobs.len(), 6);
    assert!(dir.path().join("rounds/r1/selected.jsonl").exists());
    let audit = audit_workdir(dir.path()).unwrap();
    assert!(audit.is_clean(), "{audit:?}");
    assert!(audit.examples > 0);
}

#[test]
fn audit_catches_a_planted_test_question() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::sim_config(dir.path(), 4);
    small(&mut cfg);
    common::run_sim(&cfg, 1);
    let test = semievol_core::data::load_jsonl(&dir.path().join("test.jsonl")).unwrap();
    let leak = semievol_core::Dataset::new(vec![test.records[0].clone()], "leak").unwrap();
    let examples =
        semievol_core::pipeline::training_examples(&semievol_core::prompting::TemplateSet::embedded(), &leak).unwrap();
    fs::write(
        dir.path().join(PAYLOAD_DIR).join("planted.jsonl"),
        semievol_core::backend::payload::to_jsonl(&examples),
    )
    .unwrap();
    let audit = audit_workdir(dir.path()).unwrap();
    assert_eq!(audit.test_hits, vec![test.records[0].id.clone()]);
}

#[test]
fn journal_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::sim_config(dir.path(), 8);
    small(&mut cfg);
    common::run_sim(&cfg, 1);
    let entries = Journal::read(&dir.path().join(JOURNAL_FILE)).unwrap();
    let ops: std::collections::BTreeSet<&str> = entries.iter().map(|e| e.op.as_str()).collect();
    for op in ["chat", "score", "embed", "finetune_start"] {
        assert!(ops.contains(op), "no {op} entries");
    }
    let fresh = Arc::new(
        SimBackend::new(cfg.world.clone())
            .unwrap()
            .with_registry(&dir.path().join(SIM_REGISTRY_FILE))
            .unwrap(),
    );
    let summary = replay(&entries, fresh.as_ref(), fresh.as_ref()).unwrap();
    assert!(summary.replayed > 100);
    assert!(summary.mismatched.is_empty(), "{:?}", summary.mismatched);
}

#[cfg(unix)]
#[test]
fn command_mode_warmup_passes_the_env_contract() {
    use std::os::unix::fs::PermissionsExt;

    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("trainer.sh");
    fs::write(
        &script,
        format!(
            "#!/bin/sh\nset -eu\n\
             test -s \"$SEMIEVOL_TRAIN_FILE\"\n\
             printf '%s\\n' \"$SEMIEVOL_TRAIN_FILE\" \"$SEMIEVOL_BASE_MODEL\" \"$SEMIEVOL_EPOCHS\" > \"$SEMIEVOL_OUT_DIR/env.txt\"\n\
             echo training\n\
             echo {SIM_WARM}\n"
        ),
    )
    .unwrap();
    fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();

    let work = dir.path().join("work");
    let mut cfg = common::sim_config(&work, 2);
    small(&mut cfg);
    cfg.method.epochs = 3;
    cfg.backend.finetune.poll_interval_secs = 0;
    cfg.backend.finetune.timeout_secs = 30;
    let sim = Arc::new(SimBackend::new(cfg.world.clone()).unwrap());
    let trainer_root = work.join("trainer");
    let services = Services {
        chat: sim.clone(),
        embedder: sim.clone(),
        finetuner: Arc::new(CommandFineTuner::new(&[script.display().to_string()], &trainer_root).unwrap()),
        embedding_model: SIM_EMBEDDING.into(),
        backend_label: "command".into(),
    };
    let p = Pipeline::open(cfg.clone(), services, ModelRef::base("sim-base", "command")).unwrap();
    let mut state = p.init_from_dataset(&cfg.world.tasks().unwrap()).unwrap();
    p.step(&mut state).unwrap();
    assert_eq!(state.stage, Stage::Warmed);
    assert_eq!(state.models.warm.as_ref().unwrap().name, SIM_WARM);

    let job_dir = fs::read_dir(&trainer_root).unwrap().next().unwrap().unwrap().path();
    let env = fs::read_to_string(job_dir.join("env.txt")).unwrap();
    let lines: Vec<&str> = env.lines().collect();
    assert!(lines[0].ends_with("payloads/warmup_r1.jsonl"), "{}", lines[0]);
    assert_eq!(&lines[1..], ["sim-base", "3"]);
}

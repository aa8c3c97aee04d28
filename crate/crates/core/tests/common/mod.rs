#![allow(dead_code)]

use std::path::Path;

use semievol_core::backend::ModelRole;
use semievol_core::config::services_from_config;
use semievol_core::pipeline::{Pipeline, PipelineState};
use semievol_core::RunConfig;

/// Simulated-backend config rooted at `workdir`, seeded for both the run and the world.
pub fn sim_config(workdir: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.workdir = workdir.to_path_buf();
    cfg.seed = seed;
    cfg.world = cfg.world.with_seed(seed);
    cfg.method.eval_targets = vec![ModelRole::Base, ModelRole::Warm, ModelRole::Evolved];
    cfg.method.concurrency = 4;
    cfg
}

pub fn open(cfg: &RunConfig) -> Pipeline {
    let (services, base) = services_from_config(cfg).expect("services");
    Pipeline::open(cfg.clone(), services, base).expect("open pipeline")
}

/// Split the world's tasks and run `rounds` rounds.
pub fn run_sim(cfg: &RunConfig, rounds: usize) -> PipelineState {
    let pipeline = open(cfg);
    let tasks = cfg.world.tasks().expect("world");
    let mut state = pipeline.init_from_dataset(&tasks).expect("split");
    pipeline.iterate(&mut state, rounds).expect("iterate");
    state
}

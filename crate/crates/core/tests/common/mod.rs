#![allow(dead_code)]

use kbgn::harness::{generate_dataset, ClueMode, Dataset, GenConfig, RunConfig};

pub fn small_run(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default().with_seed(seed);
    cfg.model.embed_dim = 8;
    cfg.model.hidden = 8;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 5;
    cfg.data.train_episodes = 20;
    cfg.data.val_episodes = 10;
    cfg
}

pub fn dataset(seed: u64, count: usize, mode: ClueMode) -> Dataset {
    let gen = GenConfig {
        clue_mode: mode,
        ..GenConfig::default()
    };
    generate_dataset(seed, count, &gen).unwrap()
}

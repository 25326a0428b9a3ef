#![allow(dead_code)]

use free_harness::config::ExperimentConfig;

/// Default configuration on a 12-record corpus with short generations.
pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.size = 12;
    cfg.max_new = 16;
    cfg
}

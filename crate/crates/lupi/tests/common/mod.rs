#![allow(dead_code)]

use lupi::lupi_core::train::TrainConfig;

/// Desk network on a few dozen samples; a full run takes a few seconds.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        stage1_iters: 40,
        stage2_iters: 40,
        batch_size: 4,
        log_every: 2,
        n_samples: 30,
        eval_samples: 4,
        activation_samples: 2,
        warmup_iters: 5,
        lr: 2e-4,
        ..TrainConfig::default()
    }
}

pub fn read(path: &std::path::Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

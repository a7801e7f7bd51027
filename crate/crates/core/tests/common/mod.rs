#![allow(dead_code)]

pub mod grad;

use dpir::config::RunConfig;

/// Small model settings shared by the training-based tests.
pub fn toy_config(seed: u64) -> RunConfig {
    let sets: Vec<String> = [
        "model.model_dim=32",
        "model.prompt_dim=32",
        "model.pooled_dim=16",
        "model.num_blocks=2",
        "model.num_heads=2",
        "model.time_freq_dim=16",
        "model.mlp_ratio=2",
        "autoencoder.width=8",
        "conditioning.hidden=8",
        "train.visual_pretrain_steps=4",
        "train.ae_pretrain_steps=6",
        "train.ae_finetune_steps=6",
        "train.ae_loss.gan_warmup_steps=3",
        "train.ae_batch=1",
        "train.dpir_steps=6",
        "train.batch=2",
        "train.patch=32",
        "train.warmup_steps=2",
        "flow.sample_steps=3",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("seed={seed}")])
    .collect();
    RunConfig::load(None, &sets).expect("toy config")
}

/// Procedural HQ images of side `size` degraded with the config's recipe.
pub fn toy_samples(cfg: &RunConfig, n: usize, size: usize) -> Vec<dpir::data::Sample> {
    let hq = dpir::data::procedural_hq(n, size, cfg.seed);
    dpir::data::make_samples(&hq, &cfg.degradation)
        .expect("degrade")
        .into_iter()
        .map(|s| s.0)
        .collect()
}

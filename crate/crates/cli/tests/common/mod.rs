#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dosegraph::encoders::EncoderConfig;
use dosegraph::model::{ModelConfig, ModelRegistry, DOSEGNN};
use dosegraph::tensor::save_checkpoint;
use dosegraph_cli::pipeline::gen_phantoms;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        layers: 2,
        prompt_width: 16,
        encoder: EncoderConfig {
            d_model: 8,
            ffn_hidden: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Four phantoms and an untrained small DoseGNN checkpoint.
pub fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("cases");
    gen_phantoms(&data, 4, 3, 0.5, 0.5).unwrap();
    let model = ModelRegistry::default().build(DOSEGNN, &small_config(), 7).unwrap();
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&ckpt, &model.to_checkpoint().unwrap()).unwrap();
    (data, ckpt)
}

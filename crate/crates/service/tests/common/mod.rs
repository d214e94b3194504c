#![allow(dead_code)]

use std::path::Path;

use tab_core::model::{save_checkpoint, BottleneckKind, ModelConfig};
use tab_core::synthdata::{generate_dataset, write_dataset, DatasetSpec, ScenePair};
use tab_core::Model32;

/// Small untrained model on the default 64×64 scene layout.
pub fn small_model(kind: BottleneckKind) -> Model32 {
    let config = ModelConfig {
        d_model: 16,
        ffn_mult: 2,
        enc_layers: 1,
        enc_heads: 2,
        cross_layers: 1,
        cross_heads: 2,
        lm_enc_layers: 1,
        lm_dec_layers: 1,
        lm_heads: 2,
        text_layers: 1,
        text_heads: 2,
        proj_dim: 8,
        baseline_heads: 2,
        max_caption_len: 12,
        bottleneck: kind,
        ..Default::default()
    };
    Model32::new(config, 5).unwrap()
}

pub fn small_dataset() -> Vec<ScenePair> {
    generate_dataset(&DatasetSpec::new(20, 3, 0.5)).unwrap()
}

/// Writes a dataset directory and a checkpoint under `dir`.
pub fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    write_dataset(&small_dataset(), &data).unwrap();
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&small_model(BottleneckKind::Tab), &ckpt).unwrap();
    (data, ckpt)
}

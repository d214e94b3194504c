#![allow(dead_code)]

pub mod oracles;

use tab_core::model::{BottleneckKind, ModelConfig};
use tab_core::synthdata::{generate_dataset, BBox, DatasetSpec, SceneParams, ScenePair};

/// Two-by-two patch grid with single-layer stacks, small enough for exhaustive checks.
pub fn tiny_config(bottleneck: BottleneckKind) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        image_size: 16,
        patch_size: 8,
        enc_layers: 1,
        cross_layers: 1,
        lm_enc_layers: 1,
        lm_dec_layers: 1,
        text_layers: 1,
        proj_dim: 8,
        ffn_mult: 2,
        max_caption_len: 12,
        bottleneck,
        ..Default::default()
    }
}

pub fn tiny_scene() -> SceneParams {
    SceneParams { grid: 2, image_size: 16, patch_size: 8 }
}

pub fn tiny_dataset(pairs: usize, seed: u64) -> Vec<ScenePair> {
    let mut spec = DatasetSpec::new(pairs, seed, 0.5);
    spec.params = tiny_scene();
    generate_dataset(&spec).unwrap()
}

/// Six 2×2 patch maps over an 8×8 image with their boxes. Thresholds
/// 0.30, 0.35 and 0.40 share the best mean, one map holds a value equal to
/// a sweep point, and one map has two diagonal blobs that are not 4-connected.
pub fn pg_fixture() -> Vec<(Vec<f64>, Option<BBox>)> {
    let b = |x0, y0, x1, y1| Some(BBox { x0, y0, x1, y1 });
    vec![
        (vec![0.6, 0.1, 0.1, 0.2], b(0, 0, 4, 4)),
        (vec![0.05, 0.3, 0.25, 0.4], b(5, 5, 8, 8)),
        (vec![0.5, 0.0, 0.0, 0.5], b(4, 0, 8, 4)),
        (vec![0.0; 4], None),
        (vec![0.25, 0.05, 0.0, 0.0], None),
        (vec![0.1; 4], None),
    ]
}

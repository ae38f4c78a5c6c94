//! Fixtures shared by the criterion benches in `benches/`.

use oat_core::data::{synth_glyphs, GlyphStyle};
use oat_core::tensor::Tensor;
use oat_core::training::{TrainConfig, TrainMode};
use oat_core::Model;

/// A batch of desk-task glyphs.
pub fn glyph_batch(n: usize, seed: u64) -> (Tensor<f32>, Vec<usize>) {
    let data = synth_glyphs(n.div_ceil(10), 10, 16, 0.15, seed, GlyphStyle::default())
        .expect("valid glyph task");
    let idx: Vec<usize> = (0..n).collect();
    data.batch(&idx)
}

/// Freshly initialized desk model for `mode`.
pub fn desk_model(mode: TrainMode) -> (TrainConfig, Model<f32>) {
    let cfg = TrainConfig::new(mode);
    let model = cfg.build_model([1, 16, 16], 10).expect("valid desk model");
    (cfg, model)
}

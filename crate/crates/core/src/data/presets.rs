//! Scene specs of the shipped desk-scale benchmarks.

use crate::data::scene::{detection_catalog, Frequency, SceneSpec};
use crate::data::shapes::Texture;

/// Balanced benchmark: 20 classes (10 families, solid and striped).
pub fn balanced_detection(seed: u64) -> SceneSpec {
    SceneSpec {
        canvas: (64, 64),
        class_catalog: detection_catalog(10, &[Texture::Solid, Texture::Stripes]),
        frequency: Frequency::Uniform,
        objects_per_image: (1, 4),
        occlusion_allowed: true,
        seed,
        noise: 0.04,
    }
}

/// Long-tail benchmark: same catalog, class `k` drawn with weight `(k+1)^-2`.
pub fn long_tail_detection(seed: u64) -> SceneSpec {
    SceneSpec { frequency: Frequency::PowerLaw { exponent: 2.0 }, ..balanced_detection(seed) }
}

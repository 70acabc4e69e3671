//! Shared fixtures for the benchmarks.

use obsnet_core::synthdata::{scene_at, stack_images, Scene, Split};
use obsnet_core::Array4;

/// A batch of `n` test images.
pub fn test_batch(n: usize) -> (Vec<Scene>, Array4) {
    let scenes: Vec<Scene> = (0..n).map(|i| scene_at(0, Split::Test, i)).collect();
    let refs: Vec<&Scene> = scenes.iter().collect();
    let batch = stack_images(&refs);
    (scenes, batch)
}

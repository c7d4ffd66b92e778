//! Fixtures shared by the benchmarks.

use stconsist::harness::Dataset;
use stconsist::scenegen::SceneConfig;

/// A short default-resolution dataset.
pub fn small_dataset() -> Dataset {
    let cfg = SceneConfig {
        sequences: 2,
        frames_per_sequence: 4,
        ..SceneConfig::default()
    };
    Dataset::generate(&cfg, 0, 0.5).expect("default scene config renders")
}

//! Deterministic inputs shared by the benchmarks.

use mtsedge::{NetworkConfig, Tensor};

/// A smooth `[h, w, c]` ramp; no RNG so every run sees identical data.
pub fn ramp(h: usize, w: usize, c: usize) -> Tensor {
    Tensor::from_fn(&[h, w, c], |i| ((i[0] * 7 + i[1] * 3 + i[2]) % 17) as f64 / 17.0)
}

/// Single-block, single-scale network small enough for per-iteration timing.
pub fn small_config() -> NetworkConfig {
    NetworkConfig::from_json(
        r#"{"blocks":1,"channels":8,"compress_ratio":0.4,"window_scales":[8],"terms":2,"heads":2}"#,
    )
    .expect("valid bench config")
}

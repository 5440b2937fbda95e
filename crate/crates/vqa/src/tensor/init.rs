//! Seeded weight initialization.

use rand::Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Uniform bound sqrt(6 / (fan_in + fan_out)).
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot/Xavier uniform init: values drawn in [-b, +b] with
/// b = sqrt(6 / (fan_in + fan_out)). Deterministic given the seed.
pub fn glorot_init<T: Real>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    if shape.contains(&0) || shape.is_empty() {
        return Err(Error::InvalidShape(format!(
            "glorot_init requires positive extents, got {shape:?}"
        )));
    }
    if fan_in + fan_out == 0 {
        return Err(Error::InvalidArgument(
            "glorot_init requires fan_in + fan_out > 0".into(),
        ));
    }
    let b = glorot_bound(fan_in, fan_out);
    let mut rng = crate::rng::seeded_rng(seed);
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64(b * (2.0 * rng.gen::<f64>() - 1.0)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

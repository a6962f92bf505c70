use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Result, Tensor, TensorError};

/// Inputs feeding one output unit: `c·s1·s2` for a `[d, c, s1, s2]` filter
/// bank, `in_width` for a `[out, in]` dense matrix.
pub fn fan_in(shape: &[usize]) -> Result<usize> {
    if shape.len() < 2 {
        return Err(TensorError::ZeroFanIn(shape.to_vec()));
    }
    let f: usize = shape[1..].iter().product();
    if f == 0 {
        return Err(TensorError::ZeroFanIn(shape.to_vec()));
    }
    Ok(f)
}

/// He-normal initialization, `N(0, 2 / fan_in)`.
pub fn kaiming_init<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::ZeroFanIn(shape.to_vec()));
    }
    let std = (2.0 / fan_in(shape)? as f64).sqrt();
    let dist = Normal::new(0.0f64, std).expect("std is positive and finite");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data)
}

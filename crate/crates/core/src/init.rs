use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::real::Real;
use crate::tensor::Tensor;

/// (fan_in, fan_out) for dense `[out, in]` and convolution `[out, in, k, k]` shapes.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [out, inp, rest @ ..] => {
            let field: usize = rest.iter().product();
            (inp * field, out * field)
        }
    }
}

/// Support bound `√(6 / (fan_in + fan_out))` of the Xavier uniform distribution.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fi, fo) = fans(shape);
    libm::sqrt(6.0 / (fi + fo) as f64)
}

/// Xavier (Glorot) uniform samples drawn from `rng`.
pub fn xavier_uniform<T: Real, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let a = xavier_bound(shape);
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-a..=a)))
}

/// Xavier uniform initialization, deterministic for a fixed seed.
pub fn xavier_init<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    xavier_uniform(shape, &mut rng)
}

use rand::Rng;

use crate::tensor::Tensor;

/// Xavier/Glorot uniform initialisation: `U(±√(6 / (fan_in + fan_out)))`.
///
/// Rank-2 shapes use `[fan_in, fan_out]`. Higher ranks are read as conv
/// kernels `[out, in, k...]` with the receptive field folded into both fans.
pub fn xavier_init<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let (fan_in, fan_out) = match shape {
        [n] => (*n, *n),
        [i, o] => (*i, *o),
        [o, i, rest @ ..] => {
            let field: usize = rest.iter().product();
            (i * field, o * field)
        }
        [] => (1, 1),
    };
    xavier_with_fans(shape, fan_in, fan_out, rng)
}

/// Xavier uniform with explicit fans, for weights stored in a flattened
/// layout (e.g. unfolded conv kernels).
pub fn xavier_with_fans<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

use rand::Rng;

use crate::tensor::{Tensor, TensorError};

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match *shape {
        [r, c] if r > 0 && c > 0 => Ok((r, c)),
        _ => Err(TensorError::BadShape {
            op,
            shape: shape.to_vec(),
            reason: "expected a matrix with both dimensions at least 1",
        }),
    }
}

/// Half-width of the Glorot uniform interval for a `[fan_out, fan_in]` matrix.
pub fn glorot_bound(fan_out: usize, fan_in: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// I.i.d. uniform samples in `(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
/// `shape` is `[fan_out, fan_in]`.
pub fn glorot_init<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor, TensorError> {
    let (fan_out, fan_in) = matrix_dims("glorot_init", shape)?;
    let a = glorot_bound(fan_out, fan_in);
    let mut data = Vec::with_capacity(fan_out * fan_in);
    while data.len() < fan_out * fan_in {
        // gen_range on a half-open interval can return -a; redraw it.
        let x = rng.gen_range(-a..a);
        if x != -a {
            data.push(x);
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Rectangular identity: ones at `[i, i]` for `i < min(r, c)`.
pub fn diagonal_init(shape: &[usize]) -> Result<Tensor, TensorError> {
    let (r, c) = matrix_dims("diagonal_init", shape)?;
    let mut t = Tensor::zeros(vec![r, c])?;
    let data = t.data_mut();
    for i in 0..r.min(c) {
        data[i * c + i] = 1.0;
    }
    Ok(t)
}

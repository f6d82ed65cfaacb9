use super::{Scalar, Shape, Tensor};
use crate::error::{invalid, Result};

/// Spatial mean of every channel plane: `(B, C, H, W) -> (B, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(invalid(format!("global_avg_pool on empty planes {s}")));
    }
    let inv = T::c(1.0 / s.plane() as f64);
    let mut data = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            data.push(x.plane(n, c).iter().copied().sum::<T>() * inv);
        }
    }
    Tensor::from_vec(Shape::vector(s.n, s.c), data)
}

/// Per-sample feature vectors, one row of length `C` per batch element
/// (stored as `(B, C, 1, 1)`).
pub fn adaptive_avg_pool_1x1<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    global_avg_pool(x)
}

pub fn global_avg_pool_backward<T: Scalar>(input: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let inv = T::c(1.0 / input.plane() as f64);
    Tensor::from_fn(input, |n, c, _, _| dy.at(n, c, 0, 0) * inv)
}

/// Input channel feeding output channel `i` after a shuffle with `g` groups.
pub fn shuffle_source_index(i: usize, channels: usize, g: usize) -> usize {
    (i % g) * (channels / g) + i / g
}

fn permute_channels<T: Scalar>(x: &Tensor<T>, src_of: impl Fn(usize) -> usize) -> Tensor<T> {
    let s = x.shape();
    let mut data = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for i in 0..s.c {
            data.extend_from_slice(x.plane(n, src_of(i)));
        }
    }
    Tensor::from_vec(s, data).unwrap()
}

/// Interleaves `g` channel groups: reshape `(g, C/g)`, transpose, flatten.
pub fn channel_shuffle<T: Scalar>(x: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    let c = x.shape().c;
    if g == 0 || c % g != 0 {
        return Err(invalid(format!("channel_shuffle: {g} groups do not divide {c} channels")));
    }
    Ok(permute_channels(x, |i| shuffle_source_index(i, c, g)))
}

/// Routes gradients back through the inverse permutation.
pub fn channel_shuffle_backward<T: Scalar>(dy: &Tensor<T>, g: usize) -> Tensor<T> {
    let c = dy.shape().c;
    let mut inverse = vec![0; c];
    for i in 0..c {
        inverse[shuffle_source_index(i, c, g)] = i;
    }
    permute_channels(dy, |j| inverse[j])
}

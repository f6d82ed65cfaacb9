use rayon::prelude::*;

use super::{same_shape, Scalar, Shape, Tensor};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Max,
}

impl BinaryOp {
    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
        }
    }
}

/// Broadcast result shape: each axis must match or be 1 on one side.
fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let (da, db) = (a.dims(), b.dims());
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = if da[i] == db[i] {
            da[i]
        } else if da[i] == 1 {
            db[i]
        } else if db[i] == 1 {
            da[i]
        } else {
            return Err(invalid(format!("shapes {a} and {b} are not broadcast-compatible")));
        };
    }
    Ok(Shape::new(out[0], out[1], out[2], out[3]))
}

/// Flat index into `s` for output coordinates, with broadcast axes pinned.
#[inline]
fn bidx(s: Shape, n: usize, c: usize, y: usize, x: usize) -> usize {
    let n = if s.n == 1 { 0 } else { n };
    let c = if s.c == 1 { 0 } else { c };
    let y = if s.h == 1 { 0 } else { y };
    let x = if s.w == 1 { 0 } else { x };
    ((n * s.c + c) * s.h + y) * s.w + x
}

/// Elementwise `a op b`. A size-1 axis on either operand broadcasts, so a
/// `(B, C, 1, 1)` operand spreads over `H x W`.
pub fn binary<T: Scalar>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| op.apply(x, y))
            .collect();
        return Tensor::from_vec(sa, data);
    }
    let so = broadcast_shape(sa, sb)?;
    let mut out = Tensor::zeros(so);
    let p = so.plane();
    if p == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(p)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (n, c) = (idx / so.c, idx % so.c);
            for y in 0..so.h {
                for x in 0..so.w {
                    dst[y * so.w + x] =
                        op.apply(a.data()[bidx(sa, n, c, y, x)], b.data()[bidx(sb, n, c, y, x)]);
                }
            }
        });
    Ok(out)
}

/// Sums a full-size gradient down to the (possibly broadcast) shape `s`.
fn reduce_to<T: Scalar>(g: &Tensor<T>, s: Shape) -> Tensor<T> {
    if g.shape() == s {
        return g.clone();
    }
    let so = g.shape();
    let mut r = Tensor::zeros(s);
    for n in 0..so.n {
        for c in 0..so.c {
            for y in 0..so.h {
                for x in 0..so.w {
                    r.data_mut()[bidx(s, n, c, y, x)] += g.at(n, c, y, x);
                }
            }
        }
    }
    r
}

/// Gradients of `binary(op, a, b)` with respect to `a` and `b`.
pub fn binary_backward<T: Scalar>(
    op: BinaryOp,
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (sa, sb, so) = (a.shape(), b.shape(), dy.shape());
    let full = |f: &dyn Fn(T, T, T) -> T| -> Tensor<T> {
        Tensor::from_fn(so, |n, c, y, x| {
            f(
                a.data()[bidx(sa, n, c, y, x)],
                b.data()[bidx(sb, n, c, y, x)],
                dy.at(n, c, y, x),
            )
        })
    };
    match op {
        BinaryOp::Add => (reduce_to(dy, sa), reduce_to(dy, sb)),
        BinaryOp::Sub => (reduce_to(dy, sa), reduce_to(&dy.map(|v| -v), sb)),
        BinaryOp::Mul => {
            let (ga, gb) = if sa == sb {
                (
                    Tensor::from_vec(so, dy.data().iter().zip(b.data()).map(|(&g, &v)| g * v).collect())
                        .unwrap(),
                    Tensor::from_vec(so, dy.data().iter().zip(a.data()).map(|(&g, &v)| g * v).collect())
                        .unwrap(),
                )
            } else {
                (full(&|_, bv, g| g * bv), full(&|av, _, g| g * av))
            };
            (reduce_to(&ga, sa), reduce_to(&gb, sb))
        }
        BinaryOp::Max => {
            let ga = full(&|av, bv, g| if av >= bv { g } else { T::zero() });
            let gb = full(&|av, bv, g| if av >= bv { T::zero() } else { g });
            (reduce_to(&ga, sa), reduce_to(&gb, sb))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Exact (erf-based) GELU.
    Gelu,
    Sigmoid,
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn activation<T: Scalar>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    let half = T::c(0.5);
    let k = T::c(INV_SQRT_2);
    match kind {
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Gelu => x.map(|v| half * v * (T::one() + (v * k).erf())),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// `dx` given the forward input `x`, forward output `y` and upstream `dy`.
/// ReLU uses subgradient 0 at the kink.
pub fn activation_backward<T: Scalar>(
    kind: Activation,
    x: &Tensor<T>,
    y: &Tensor<T>,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let half = T::c(0.5);
    let k = T::c(INV_SQRT_2);
    let kp = T::c(INV_SQRT_2PI);
    let data = match kind {
        Activation::Relu => x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
        Activation::Gelu => x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| {
                let cdf = half * (T::one() + (v * k).erf());
                let pdf = kp * (-half * v * v).exp();
                g * (cdf + v * pdf)
            })
            .collect(),
        Activation::Sigmoid => y
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&s, &g)| g * s * (T::one() - s))
            .collect(),
    };
    Tensor::from_vec(x.shape(), data).expect("activation_backward shape")
}

/// Numerically stabilized softmax of one logit vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("concat_channels needs at least one tensor"))?
        .shape();
    let mut c = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(invalid(format!("concat_channels: {s} vs {first}")));
        }
        c += s.c;
    }
    let out_s = first.with_c(c);
    let mut data = Vec::with_capacity(out_s.numel());
    for n in 0..first.n {
        for p in parts {
            let per = p.shape().c * first.plane();
            data.extend_from_slice(&p.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(out_s, data)
}

/// Channels `[start, start + len)`.
pub fn narrow_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if start + len > s.c {
        return Err(invalid(format!(
            "channel range {start}..{} out of bounds for {s}",
            start + len
        )));
    }
    let p = s.plane();
    let mut data = Vec::with_capacity(s.n * len * p);
    for n in 0..s.n {
        let base = (n * s.c + start) * p;
        data.extend_from_slice(&x.data()[base..base + len * p]);
    }
    Tensor::from_vec(s.with_c(len), data)
}

/// Splits along channels into consecutive pieces of the given widths.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = widths.iter().sum();
    if total != x.shape().c {
        return Err(invalid(format!(
            "split widths {widths:?} sum to {total}, input has {} channels",
            x.shape().c
        )));
    }
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let t = narrow_channels(x, start, w);
            start += w;
            t
        })
        .collect()
}

/// Soft selection `y + w * (x - y)`, i.e. `w * x + (1 - w) * y` computed so
/// that `x == y` returns `x` exactly.
pub fn gate<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(x.shape(), y.shape(), "gate")?;
    same_shape(x.shape(), w.shape(), "gate weight")?;
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(w.data())
        .map(|((&a, &b), &g)| b + g * (a - b))
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Gradients of [`gate`] with respect to `(x, y, w)`.
pub fn gate_backward<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let mut dx = Vec::with_capacity(s.numel());
    let mut dyy = Vec::with_capacity(s.numel());
    let mut dw = Vec::with_capacity(s.numel());
    for i in 0..s.numel() {
        let (g, wv) = (dy.data()[i], w.data()[i]);
        dx.push(g * wv);
        dyy.push(g * (T::one() - wv));
        dw.push(g * (x.data()[i] - y.data()[i]));
    }
    (
        Tensor::from_vec(s, dx).unwrap(),
        Tensor::from_vec(s, dyy).unwrap(),
        Tensor::from_vec(s, dw).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, data.len(), 1, 1), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        assert_eq!(activation(Activation::Relu, &v(&[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(activation(Activation::Sigmoid, &v(&[0.0])).data(), &[0.5]);
    }

    #[test]
    fn gelu_reference_values() {
        // GELU(1) = 0.5 * (1 + erf(1/sqrt 2)) = 0.8413447460685429
        let y = activation(Activation::Gelu, &Tensor::<f64>::scalar(1.0));
        assert!((y.data()[0] - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0f64, 2.0, -3.0, 1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[3] > 0.999);
    }

    #[test]
    fn concat_split_round_trip() {
        let x = Tensor::<f32>::from_fn(Shape::new(2, 3, 2, 2), |n, c, y, x| (n * 50 + c * 7 + y + x) as f32);
        let y = Tensor::<f32>::from_fn(Shape::new(2, 2, 2, 2), |n, c, y, x| -((n * 50 + c * 7 + y * x) as f32));
        let cat = concat_channels(&[&x, &y]).unwrap();
        let parts = split_channels(&cat, &[3, 2]).unwrap();
        assert_eq!(parts, vec![x, y]);
    }

    #[test]
    fn zero_width_split() {
        let x = Tensor::<f32>::full(Shape::new(1, 2, 2, 2), 1.0);
        let parts = split_channels(&x, &[2, 0]).unwrap();
        assert_eq!(parts[1].shape(), Shape::new(1, 0, 2, 2));
        assert_eq!(concat_channels(&[&parts[0], &parts[1]]).unwrap(), x);
    }

    #[test]
    fn broadcast_add() {
        let a = Tensor::<f32>::zeros(Shape::new(2, 2, 2, 2));
        let b = Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = binary(BinaryOp::Add, &b, &a).unwrap();
        assert_eq!(y.plane(1, 0), &[3.0; 4]);
        let (ga, gb) = binary_backward(BinaryOp::Add, &b, &a, &Tensor::full(y.shape(), 1.0));
        assert_eq!(ga.data(), &[4.0; 4]);
        assert_eq!(gb.shape(), a.shape());
    }

    #[test]
    fn incompatible_shapes() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2));
        let b = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2));
        assert!(binary(BinaryOp::Mul, &a, &b).is_err());
    }

    #[test]
    fn gate_equal_inputs_exact() {
        let x = v(&[0.1, -7.3, 1e-7]);
        let w = v(&[0.3, 0.99, 0.01]);
        assert_eq!(gate(&x, &x, &w).unwrap(), x);
    }
}

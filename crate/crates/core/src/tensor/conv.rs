use rayon::prelude::*;

use super::{matmul, Scalar, Shape, Tensor};
use crate::error::{invalid, Result};

/// Geometry of a 2-D convolution with symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, groups: usize) -> Self {
        Self {
            in_c,
            out_c,
            kh: k,
            kw: k,
            stride,
            pad,
            groups,
        }
    }

    /// Depthwise `k x k`, stride 1, "same" padding for odd `k`.
    pub fn depthwise(c: usize, k: usize) -> Self {
        Self::new(c, c, k, 1, k / 2, c)
    }

    pub fn pointwise(in_c: usize, out_c: usize, groups: usize) -> Self {
        Self::new(in_c, out_c, 1, 1, 0, groups)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_c && self.groups == self.out_c
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_c, self.in_c / self.groups.max(1), self.kh, self.kw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.in_c % self.groups != 0 || self.out_c % self.groups != 0 {
            return Err(invalid(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_c, self.out_c
            )));
        }
        if self.stride == 0 || self.kh == 0 || self.kw == 0 {
            return Err(invalid(format!("degenerate convolution geometry {self:?}")));
        }
        Ok(())
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if ph < self.kh || pw < self.kw {
            return Err(invalid(format!(
                "input {h}x{w} with padding {} is smaller than kernel {}x{}",
                self.pad, self.kh, self.kw
            )));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }

    pub fn out_shape(&self, x: Shape) -> Result<Shape> {
        let (ho, wo) = self.out_hw(x.h, x.w)?;
        Ok(Shape::new(x.n, self.out_c, ho, wo))
    }

    /// Multiply-accumulate count for one forward pass producing `out`.
    pub fn macs(&self, out: Shape) -> u64 {
        (self.kh * self.kw * (self.in_c / self.groups)) as u64
            * self.out_c as u64
            * (out.n * out.h * out.w) as u64
    }
}

/// A convolution layer's geometry and weights.
#[derive(Clone, Debug)]
pub struct ConvParams<T: Scalar = f32> {
    pub geom: ConvGeom,
    /// `(out_c, in_c / groups, kh, kw)`
    pub weight: Tensor<T>,
    /// `(1, out_c, 1, 1)`
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(geom: ConvGeom, weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        geom.validate()?;
        if weight.shape() != geom.weight_shape() {
            return Err(invalid(format!(
                "conv weight shape {} does not match geometry (expected {})",
                weight.shape(),
                geom.weight_shape()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != geom.out_c {
                return Err(invalid(format!("conv bias has {} entries, expected {}", b.len(), geom.out_c)));
            }
        }
        Ok(Self { geom, weight, bias })
    }
}

/// Convolution forward.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_forward(x, &p.geom, &p.weight, p.bias.as_ref())
}

fn check_inputs<T: Scalar>(x: &Tensor<T>, g: &ConvGeom, w: &Tensor<T>) -> Result<Shape> {
    g.validate()?;
    if x.shape().c != g.in_c {
        return Err(invalid(format!(
            "conv2d: input {} has {} channels but weight {} expects {}",
            x.shape(),
            x.shape().c,
            w.shape(),
            g.in_c
        )));
    }
    if w.shape() != g.weight_shape() {
        return Err(invalid(format!(
            "conv2d: weight {} does not match geometry {}",
            w.shape(),
            g.weight_shape()
        )));
    }
    g.out_shape(x.shape())
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    g: &ConvGeom,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let os = check_inputs(x, g, w)?;
    let mut y = Tensor::zeros(os);
    if os.numel() == 0 {
        return Ok(y);
    }
    if g.is_depthwise() {
        depthwise_forward(x, g, w, bias, &mut y);
    } else {
        gemm_forward(x, g, w, bias, &mut y);
    }
    y.debug_check_finite("conv2d");
    Ok(y)
}

/// Gradients of a convolution: `(dx, dw, db)`. `dx` is only computed when
/// requested.
pub type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    g: &ConvGeom,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let os = check_inputs(x, g, w)?;
    if dy.shape() != os {
        return Err(invalid(format!("conv2d backward: grad {} vs output {}", dy.shape(), os)));
    }
    let mut db = Tensor::zeros(Shape::vector(1, g.out_c));
    for n in 0..os.n {
        for (c, acc) in db.data_mut().iter_mut().enumerate() {
            *acc += dy.plane(n, c).iter().copied().sum::<T>();
        }
    }
    let (dx, dw) = if g.is_depthwise() {
        depthwise_backward(x, g, w, dy, need_dx)
    } else {
        gemm_backward(x, g, w, dy, need_dx)
    };
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// depthwise path

/// Range of output columns `o` for which `o * stride + k - pad` lands inside
/// `[0, len)`.
fn valid_range(len: usize, out: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < out && (lo * stride + k) < pad {
        lo += 1;
    }
    let mut hi = out;
    while hi > lo && ((hi - 1) * stride + k) >= pad + len {
        hi -= 1;
    }
    (lo, hi)
}

fn depthwise_plane_forward<T: Scalar>(
    xin: &[T],
    (h, w): (usize, usize),
    k: &[T],
    g: &ConvGeom,
    out: &mut [T],
    (ho, wo): (usize, usize),
) {
    let s = g.stride;
    for ky in 0..g.kh {
        let (oy_lo, oy_hi) = valid_range(h, ho, ky, g.pad, s);
        for kx in 0..g.kw {
            let wv = k[ky * g.kw + kx];
            let (ox_lo, ox_hi) = valid_range(w, wo, kx, g.pad, s);
            if ox_lo == ox_hi {
                continue;
            }
            for oy in oy_lo..oy_hi {
                let iy = oy * s + ky - g.pad;
                let orow = &mut out[oy * wo..(oy + 1) * wo];
                let irow = &xin[iy * w..(iy + 1) * w];
                if s == 1 {
                    let off = kx as isize - g.pad as isize;
                    let src = &irow[(ox_lo as isize + off) as usize..(ox_hi as isize + off) as usize];
                    for (o, &v) in orow[ox_lo..ox_hi].iter_mut().zip(src) {
                        *o += wv * v;
                    }
                } else {
                    for ox in ox_lo..ox_hi {
                        orow[ox] += wv * irow[ox * s + kx - g.pad];
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(
    x: &Tensor<T>,
    g: &ConvGeom,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    y: &mut Tensor<T>,
) {
    let xs = x.shape();
    let ys = y.shape();
    let kk = g.kh * g.kw;
    let c = xs.c;
    y.data_mut()
        .par_chunks_mut(ys.plane())
        .enumerate()
        .for_each(|(idx, out)| {
            let (n, ch) = (idx / c, idx % c);
            if let Some(b) = bias {
                out.fill(b.data()[ch]);
            }
            depthwise_plane_forward(
                x.plane(n, ch),
                (xs.h, xs.w),
                &w.data()[ch * kk..(ch + 1) * kk],
                g,
                out,
                (ys.h, ys.w),
            );
        });
}

fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    g: &ConvGeom,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let xs = x.shape();
    let ys = dy.shape();
    let kk = g.kh * g.kw;
    let c = xs.c;
    let s = g.stride;

    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(xs);
        dx.data_mut()
            .par_chunks_mut(xs.plane())
            .enumerate()
            .for_each(|(idx, dplane)| {
                let (n, ch) = (idx / c, idx % c);
                let k = &w.data()[ch * kk..(ch + 1) * kk];
                let gplane = dy.plane(n, ch);
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(xs.h, ys.h, ky, g.pad, s);
                    for kx in 0..g.kw {
                        let wv = k[ky * g.kw + kx];
                        let (ox_lo, ox_hi) = valid_range(xs.w, ys.w, kx, g.pad, s);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - g.pad;
                            let grow = &gplane[oy * ys.w..(oy + 1) * ys.w];
                            let drow = &mut dplane[iy * xs.w..(iy + 1) * xs.w];
                            for ox in ox_lo..ox_hi {
                                drow[ox * s + kx - g.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            });
        dx
    });

    let mut dw = Tensor::zeros(g.weight_shape());
    dw.data_mut()
        .par_chunks_mut(kk)
        .enumerate()
        .for_each(|(ch, dk)| {
            for n in 0..xs.n {
                let xplane = x.plane(n, ch);
                let gplane = dy.plane(n, ch);
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(xs.h, ys.h, ky, g.pad, s);
                    for kx in 0..g.kw {
                        let (ox_lo, ox_hi) = valid_range(xs.w, ys.w, kx, g.pad, s);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - g.pad;
                            let grow = &gplane[oy * ys.w..(oy + 1) * ys.w];
                            let xrow = &xplane[iy * xs.w..(iy + 1) * xs.w];
                            for ox in ox_lo..ox_hi {
                                acc += grow[ox] * xrow[ox * s + kx - g.pad];
                            }
                        }
                        dk[ky * g.kw + kx] += acc;
                    }
                }
            }
        });
    (dx, dw)
}

// ---------------------------------------------------------------------------
// im2col + GEMM path
//
// Columns are laid out as a `(in_c * kh * kw) x (n * ho * wo)` matrix so that
// each group's rows are contiguous and one GEMM covers the whole batch.

fn im2col<T: Scalar>(x: &Tensor<T>, g: &ConvGeom, (ho, wo): (usize, usize)) -> Vec<T> {
    let xs = x.shape();
    let ncols = xs.n * ho * wo;
    let rows = xs.c * g.kh * g.kw;
    let mut cols = vec![T::zero(); rows * ncols];
    let s = g.stride;
    cols.par_chunks_mut(ncols).enumerate().for_each(|(r, row)| {
        let ci = r / (g.kh * g.kw);
        let ky = (r / g.kw) % g.kh;
        let kx = r % g.kw;
        let (oy_lo, oy_hi) = valid_range(xs.h, ho, ky, g.pad, s);
        let (ox_lo, ox_hi) = valid_range(xs.w, wo, kx, g.pad, s);
        if ox_lo == ox_hi {
            return;
        }
        for n in 0..xs.n {
            let plane = x.plane(n, ci);
            let base = n * ho * wo;
            for oy in oy_lo..oy_hi {
                let iy = oy * s + ky - g.pad;
                let dst = &mut row[base + oy * wo..base + (oy + 1) * wo];
                let src = &plane[iy * xs.w..(iy + 1) * xs.w];
                for ox in ox_lo..ox_hi {
                    dst[ox] = src[ox * s + kx - g.pad];
                }
            }
        }
    });
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, xs: Shape, (ho, wo): (usize, usize)) -> Tensor<T> {
    let mut dx = Tensor::zeros(xs);
    let ncols = xs.n * ho * wo;
    let kk = g.kh * g.kw;
    let s = g.stride;
    let c = xs.c;
    dx.data_mut()
        .par_chunks_mut(xs.plane())
        .enumerate()
        .for_each(|(idx, plane)| {
            let (n, ci) = (idx / c, idx % c);
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(xs.h, ho, ky, g.pad, s);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = valid_range(xs.w, wo, kx, g.pad, s);
                    if ox_lo == ox_hi {
                        continue;
                    }
                    let r = ci * kk + ky * g.kw + kx;
                    let row = &cols[r * ncols + n * ho * wo..r * ncols + (n + 1) * ho * wo];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - g.pad;
                        for ox in ox_lo..ox_hi {
                            plane[iy * xs.w + ox * s + kx - g.pad] += row[oy * wo + ox];
                        }
                    }
                }
            }
        });
    dx
}

fn gemm_forward<T: Scalar>(
    x: &Tensor<T>,
    g: &ConvGeom,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    y: &mut Tensor<T>,
) {
    let ys = y.shape();
    let (ho, wo) = (ys.h, ys.w);
    let cols = im2col(x, g, (ho, wo));
    let ncols = ys.n * ho * wo;
    let kg = (g.in_c / g.groups) * g.kh * g.kw;
    let og = g.out_c / g.groups;
    let mut out = vec![T::zero(); g.out_c * ncols];
    for grp in 0..g.groups {
        matmul(
            og,
            kg,
            ncols,
            &w.data()[grp * og * kg..(grp + 1) * og * kg],
            false,
            &cols[grp * kg * ncols..(grp + 1) * kg * ncols],
            false,
            &mut out[grp * og * ncols..(grp + 1) * og * ncols],
            false,
        );
    }
    let p = ho * wo;
    let oc = g.out_c;
    y.data_mut().par_chunks_mut(p).enumerate().for_each(|(idx, dst)| {
        let (n, co) = (idx / oc, idx % oc);
        let src = &out[co * ncols + n * p..co * ncols + (n + 1) * p];
        match bias {
            Some(b) => {
                let bv = b.data()[co];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
            None => dst.copy_from_slice(src),
        }
    });
}

fn gemm_backward<T: Scalar>(
    x: &Tensor<T>,
    g: &ConvGeom,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let xs = x.shape();
    let ys = dy.shape();
    let (ho, wo) = (ys.h, ys.w);
    let p = ho * wo;
    let ncols = ys.n * p;
    let kg = (g.in_c / g.groups) * g.kh * g.kw;
    let og = g.out_c / g.groups;

    // dy as an (out_c x n*ho*wo) matrix
    let mut dy2 = vec![T::zero(); g.out_c * ncols];
    dy2.par_chunks_mut(ncols).enumerate().for_each(|(co, row)| {
        for n in 0..ys.n {
            row[n * p..(n + 1) * p].copy_from_slice(dy.plane(n, co));
        }
    });

    let cols = im2col(x, g, (ho, wo));
    let mut dw = Tensor::zeros(g.weight_shape());
    for grp in 0..g.groups {
        matmul(
            og,
            ncols,
            kg,
            &dy2[grp * og * ncols..(grp + 1) * og * ncols],
            false,
            &cols[grp * kg * ncols..(grp + 1) * kg * ncols],
            true,
            &mut dw.data_mut()[grp * og * kg..(grp + 1) * og * kg],
            false,
        );
    }
    drop(cols);

    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); g.in_c * g.kh * g.kw * ncols];
        for grp in 0..g.groups {
            matmul(
                kg,
                og,
                ncols,
                &w.data()[grp * og * kg..(grp + 1) * og * kg],
                true,
                &dy2[grp * og * ncols..(grp + 1) * og * ncols],
                false,
                &mut dcols[grp * kg * ncols..(grp + 1) * kg * ncols],
                false,
            );
        }
        col2im(&dcols, g, xs, (ho, wo))
    });
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Direct definition of convolution, one output element at a time.
    fn naive(x: &Tensor<f64>, g: &ConvGeom, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
        let os = g.out_shape(x.shape()).unwrap();
        let icg = g.in_c / g.groups;
        let ocg = g.out_c / g.groups;
        Tensor::from_fn(os, |n, co, oy, ox| {
            let grp = co / ocg;
            let mut acc = b.map_or(0.0, |b| b.data()[co]);
            for ci in 0..icg {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy < 0 || ix < 0 || iy >= x.shape().h as isize || ix >= x.shape().w as isize {
                            continue;
                        }
                        acc += w.at(co, ci, ky, kx) * x.at(n, grp * icg + ci, iy as usize, ix as usize);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn all_ones_kernel_on_3x3() {
        let x = Tensor::from_vec(Shape::new(1, 1, 3, 3), (1..=9).map(|v| v as f32).collect()).unwrap();
        let g = ConvGeom::new(1, 1, 3, 1, 0, 1);
        let w = Tensor::full(g.weight_shape(), 1.0);
        let y = conv2d_forward(&x, &g, &w, None).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[45.0]);
    }

    #[test]
    fn identity_pointwise_depthwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(Shape::new(2, 2, 4, 5), &mut rng);
        let g = ConvGeom::pointwise(2, 2, 2);
        let w = Tensor::full(g.weight_shape(), 1.0);
        assert_eq!(conv2d_forward(&x, &g, &w, None).unwrap(), x);
    }

    #[test]
    fn matches_naive_on_assorted_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cases = [
            (ConvGeom::new(3, 4, 3, 1, 1, 1), 6, 7),
            (ConvGeom::new(4, 6, 3, 2, 1, 2), 7, 6),
            (ConvGeom::new(2, 4, 4, 4, 0, 1), 8, 8),
            (ConvGeom::new(4, 8, 2, 2, 0, 1), 6, 4),
            (ConvGeom::depthwise(3, 7), 9, 8),
            (ConvGeom::depthwise(3, 3), 5, 5),
            (ConvGeom::new(3, 3, 3, 2, 1, 3), 7, 7),
            (ConvGeom::pointwise(4, 6, 2), 3, 3),
            (ConvGeom::depthwise(3, 7), 2, 2),
            (ConvGeom::depthwise(2, 7), 1, 3),
            (ConvGeom::new(2, 3, 7, 1, 3, 1), 2, 2),
        ];
        for (g, h, w_) in cases {
            let x = rand_tensor(Shape::new(2, g.in_c, h, w_), &mut rng);
            let w = rand_tensor(g.weight_shape(), &mut rng);
            let b = rand_tensor(Shape::vector(1, g.out_c), &mut rng);
            let fast = conv2d_forward(&x, &g, &w, Some(&b)).unwrap();
            let slow = naive(&x, &g, &w, Some(&b));
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn grouped_equals_sliced_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeom::new(8, 4, 3, 1, 1, 2);
        let x = rand_tensor(Shape::new(2, 8, 5, 5), &mut rng);
        let w = rand_tensor(g.weight_shape(), &mut rng);
        let full = conv2d_forward(&x, &g, &w, None).unwrap();

        let sub = ConvGeom::new(4, 2, 3, 1, 1, 1);
        let xs = super::super::split_channels(&x, &[4, 4]).unwrap();
        let ws = super::super::split_channels(
            &w.clone().reshape(Shape::new(1, 4, 4, 9)).unwrap(),
            &[2, 2],
        )
        .unwrap();
        let mut parts = Vec::new();
        for (xi, wi) in xs.iter().zip(&ws) {
            let wi = wi.clone().reshape(sub.weight_shape()).unwrap();
            parts.push(conv2d_forward(xi, &sub, &wi, None).unwrap());
        }
        let joined = super::super::concat_channels(&parts.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(joined, full);
    }

    #[test]
    fn group_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeom::new(4, 4, 3, 1, 1, 2);
        let x = rand_tensor(Shape::new(1, 4, 5, 5), &mut rng);
        let w = rand_tensor(g.weight_shape(), &mut rng);
        let mut x2 = x.clone();
        for c in 2..4 {
            for y in 0..5 {
                for xx in 0..5 {
                    x2.set(0, c, y, xx, 0.0);
                }
            }
        }
        let a = conv2d_forward(&x, &g, &w, None).unwrap();
        let b = conv2d_forward(&x2, &g, &w, None).unwrap();
        for c in 0..2 {
            assert_eq!(a.plane(0, c), b.plane(0, c));
        }
    }

    #[test]
    fn channel_mismatch_reports_both_shapes() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let g = ConvGeom::new(2, 2, 1, 1, 0, 1);
        let w = Tensor::zeros(g.weight_shape());
        let err = conv2d_forward(&x, &g, &w, None).unwrap_err().to_string();
        assert!(err.contains("1x3x4x4") && err.contains("2x2x1x1"), "{err}");
    }

    #[test]
    fn bad_groups_rejected() {
        assert!(ConvGeom::new(3, 4, 1, 1, 0, 2).validate().is_err());
    }

    /// Adjoint identity: <conv(x), dy> == <x, dx> + <w, dw> for a bias-free
    /// conv (linear in each argument).
    #[test]
    fn backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cases = [
            ConvGeom::new(3, 4, 3, 1, 1, 1),
            ConvGeom::new(4, 6, 3, 2, 1, 2),
            ConvGeom::depthwise(3, 7),
            ConvGeom::new(3, 6, 2, 2, 0, 3),
        ];
        for g in cases {
            let x = rand_tensor(Shape::new(2, g.in_c, 6, 6), &mut rng);
            let w = rand_tensor(g.weight_shape(), &mut rng);
            let y = conv2d_forward(&x, &g, &w, None).unwrap();
            let dy = rand_tensor(y.shape(), &mut rng);
            let (dx, dw, _) = conv2d_backward(&x, &g, &w, &dy, true).unwrap();
            let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
                a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
            };
            let lhs = dot(&y, &dy);
            assert!((lhs - dot(&x, &dx.unwrap())).abs() < 1e-9, "{g:?}");
            assert!((lhs - dot(&w, &dw)).abs() < 1e-9, "{g:?}");
        }
    }
}

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Per-channel batch normalization state.
#[derive(Clone, Debug)]
pub struct BatchNormParams<T: Scalar = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
    pub mode: BnMode,
}

impl<T: Scalar> BatchNormParams<T> {
    /// Identity affine transform with default running statistics.
    pub fn new(c: usize) -> Self {
        Self {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            eps: T::c(1e-5),
            momentum: T::c(0.1),
            mode: BnMode::Infer,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Applies batch normalization. In train mode the running statistics of `p`
/// are updated from the batch.
pub fn batch_norm<T: Scalar>(x: &Tensor<T>, p: &mut BatchNormParams<T>) -> Result<Tensor<T>> {
    let c = p.channels();
    if [p.beta.len(), p.running_mean.len(), p.running_var.len()] != [c, c, c] {
        return Err(invalid("batch_norm: parameter arrays have unequal lengths"));
    }
    match p.mode {
        BnMode::Infer => batch_norm_infer(
            x,
            &p.gamma,
            &p.beta,
            &p.running_mean,
            &p.running_var,
            p.eps,
        ),
        BnMode::Train => {
            let (y, saved) = batch_norm_train(x, &p.gamma, &p.beta, p.eps)?;
            let m = p.momentum;
            for ch in 0..c {
                p.running_mean[ch] = (T::one() - m) * p.running_mean[ch] + m * saved.mean[ch];
                p.running_var[ch] = (T::one() - m) * p.running_var[ch] + m * saved.var[ch];
            }
            Ok(y)
        }
    }
}

fn check_channels<T: Scalar>(x: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if x.shape().c != c {
        return Err(invalid(format!(
            "{what}: input {} has {} channels, parameters have {c}",
            x.shape(),
            x.shape().c
        )));
    }
    Ok(())
}

/// `1 / sqrt(var + eps)` per channel, rejecting non-positive arguments.
pub(crate) fn inv_std<T: Scalar>(var: &[T], eps: T) -> Result<Vec<T>> {
    var.iter()
        .enumerate()
        .map(|(c, &v)| {
            let d = v + eps;
            if d <= T::zero() || !d.is_finite() {
                Err(Error::NumericDomain(format!(
                    "channel {c}: running_var + eps = {d} is not positive"
                )))
            } else {
                Ok(T::one() / d.sqrt())
            }
        })
        .collect()
}

/// Applies `f(channel, plane_in, plane_out)` to every `(n, c)` plane.
fn per_plane<T: Scalar>(
    x: &Tensor<T>,
    f: impl Fn(usize, &[T], &mut [T]) + Sync,
) -> Tensor<T> {
    let s = x.shape();
    let mut y = Tensor::zeros(s);
    if s.numel() == 0 {
        return y;
    }
    y.data_mut()
        .par_chunks_mut(s.plane())
        .enumerate()
        .for_each(|(idx, out)| {
            let (n, c) = (idx / s.c, idx % s.c);
            f(c, x.plane(n, c), out);
        });
    y
}

pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    check_channels(x, gamma.len(), "batch_norm")?;
    let istd = inv_std(var, eps)?;
    let y = per_plane(x, |c, src, dst| {
        let (g, b, m, is) = (gamma[c], beta[c], mean[c], istd[c]);
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = g * ((v - m) * is) + b;
        }
    });
    y.debug_check_finite("batch_norm");
    Ok(y)
}

/// Returns `(dx, dgamma, dbeta)` for inference-mode normalization.
pub fn batch_norm_infer_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let istd = inv_std(var, eps)?;
    let dx = per_plane(dy, |c, src, dst| {
        let k = gamma[c] * istd[c];
        for (d, &g) in dst.iter_mut().zip(src) {
            *d = g * k;
        }
    });
    let s = x.shape();
    let (dg, db): (Vec<T>, Vec<T>) = (0..s.c)
        .into_par_iter()
        .map(|c| {
            let (mut dg, mut db) = (T::zero(), T::zero());
            for n in 0..s.n {
                for (&g, &v) in dy.plane(n, c).iter().zip(x.plane(n, c)) {
                    dg += g * (v - mean[c]) * istd[c];
                    db += g;
                }
            }
            (dg, db)
        })
        .unzip();
    Ok((dx, dg, db))
}

/// Saved forward quantities for the train-mode backward pass.
#[derive(Clone, Debug)]
pub struct BnTrainSaved<T: Scalar> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Batch mean per channel.
    pub mean: Vec<T>,
    /// Biased batch variance per channel.
    pub var: Vec<T>,
}

/// Batch-statistics normalization. Needs at least two values per channel.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, BnTrainSaved<T>)> {
    check_channels(x, gamma.len(), "batch_norm")?;
    let s = x.shape();
    let count = s.n * s.plane();
    if count < 2 {
        return Err(Error::DegenerateBatch(format!(
            "train-mode batch_norm over {s} sees {count} value(s) per channel; need at least 2"
        )));
    }
    let stats: Vec<(f64, f64)> = (0..s.c)
        .into_par_iter()
        .map(|c| {
            let mut sum = 0.0;
            for n in 0..s.n {
                sum += x.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / count as f64;
            let mut sq = 0.0;
            for n in 0..s.n {
                sq += x
                    .plane(n, c)
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            (mean, sq / count as f64)
        })
        .collect();
    let mean: Vec<T> = stats.iter().map(|s| T::c(s.0)).collect();
    let var: Vec<T> = stats.iter().map(|s| T::c(s.1)).collect();
    let istd: Vec<T> = stats
        .iter()
        .map(|s| T::c(1.0 / (s.1 + eps.as_f64()).sqrt()))
        .collect();
    let xhat = per_plane(x, |c, src, dst| {
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mean[c]) * istd[c];
        }
    });
    let y = per_plane(&xhat, |c, src, dst| {
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = gamma[c] * v + beta[c];
        }
    });
    y.debug_check_finite("batch_norm");
    Ok((
        y,
        BnTrainSaved {
            xhat,
            inv_std: istd,
            mean,
            var,
        },
    ))
}

/// Backward through the batch statistics: returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<T: Scalar>(
    saved: &BnTrainSaved<T>,
    gamma: &[T],
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = dy.shape();
    let count = T::c((s.n * s.plane()) as f64);
    let xhat = &saved.xhat;
    let (dg, db): (Vec<T>, Vec<T>) = (0..s.c)
        .into_par_iter()
        .map(|c| {
            let (mut dg, mut db) = (T::zero(), T::zero());
            for n in 0..s.n {
                for (&g, &xh) in dy.plane(n, c).iter().zip(xhat.plane(n, c)) {
                    dg += g * xh;
                    db += g;
                }
            }
            (dg, db)
        })
        .unzip();
    // dx = gamma * istd / N * (N * dy - sum(dy) - xhat * sum(dy * xhat))
    let mut dx = Tensor::zeros(s);
    let p = s.plane();
    dx.data_mut()
        .par_chunks_mut(p)
        .enumerate()
        .for_each(|(idx, out)| {
            let (n, c) = (idx / s.c, idx % s.c);
            let k = gamma[c] * saved.inv_std[c] / count;
            for ((o, &g), &xh) in out.iter_mut().zip(dy.plane(n, c)).zip(xhat.plane(n, c)) {
                *o = k * (count * g - db[c] - xh * dg[c]);
            }
        });
    (dx, dg, db)
}

/// Saved quantities for channel layer normalization.
#[derive(Clone, Debug)]
pub struct LayerNormSaved<T: Scalar> {
    pub xhat: Tensor<T>,
    /// One entry per `(n, y, x)` position.
    pub inv_std: Vec<T>,
}

/// Normalizes over the channel axis at every spatial position, then applies a
/// per-channel affine transform.
pub fn layer_norm_channels<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, LayerNormSaved<T>)> {
    check_channels(x, gamma.len(), "layer_norm")?;
    let s = x.shape();
    let p = s.plane();
    let mut xhat = Tensor::zeros(s);
    let mut istd = vec![T::zero(); s.n * p];
    let inv_c = 1.0 / s.c.max(1) as f64;
    for n in 0..s.n {
        let base = n * s.c * p;
        for i in 0..p {
            let mut sum = 0.0;
            for c in 0..s.c {
                sum += x.data()[base + c * p + i].as_f64();
            }
            let mean = sum * inv_c;
            let mut sq = 0.0;
            for c in 0..s.c {
                let d = x.data()[base + c * p + i].as_f64() - mean;
                sq += d * d;
            }
            let is = 1.0 / (sq * inv_c + eps.as_f64()).sqrt();
            istd[n * p + i] = T::c(is);
            for c in 0..s.c {
                let v = x.data()[base + c * p + i].as_f64();
                xhat.data_mut()[base + c * p + i] = T::c((v - mean) * is);
            }
        }
    }
    let y = per_plane(&xhat, |c, src, dst| {
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = gamma[c] * v + beta[c];
        }
    });
    Ok((y, LayerNormSaved { xhat, inv_std: istd }))
}

pub fn layer_norm_channels_backward<T: Scalar>(
    saved: &LayerNormSaved<T>,
    gamma: &[T],
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = dy.shape();
    let p = s.plane();
    let xhat = &saved.xhat;
    let mut dg = vec![T::zero(); s.c];
    let mut db = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            for (&g, &xh) in dy.plane(n, c).iter().zip(xhat.plane(n, c)) {
                dg[c] += g * xh;
                db[c] += g;
            }
        }
    }
    let cnt = T::c(s.c as f64);
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        let base = n * s.c * p;
        for i in 0..p {
            let (mut sg, mut sgx) = (T::zero(), T::zero());
            for c in 0..s.c {
                let g = dy.data()[base + c * p + i] * gamma[c];
                sg += g;
                sgx += g * xhat.data()[base + c * p + i];
            }
            let k = saved.inv_std[n * p + i] / cnt;
            for c in 0..s.c {
                let j = base + c * p + i;
                let g = dy.data()[j] * gamma[c];
                dx.data_mut()[j] = k * (cnt * g - sg - xhat.data()[j] * sgx);
            }
        }
    }
    (dx, dg, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_parameters() {
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![1.0f64, -2.0, 3.5, 0.25]).unwrap();
        let mut p = BatchNormParams::new(2);
        p.eps = 0.0;
        assert_eq!(batch_norm(&x, &mut p).unwrap(), x);
    }

    #[test]
    fn infer_scalar_hand_value() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![2.0f64]).unwrap();
        let mut p = BatchNormParams::new(1);
        p.eps = 0.0;
        p.gamma[0] = 3.0;
        p.beta[0] = 0.5;
        p.running_mean[0] = 1.0;
        p.running_var[0] = 1.0;
        assert_eq!(batch_norm(&x, &mut p).unwrap().data(), &[3.5]);
    }

    /// Independent moments routine: per-channel mean/variance by direct
    /// enumeration.
    fn moments(t: &Tensor<f64>, c: usize) -> (f64, f64) {
        let s = t.shape();
        let vals: Vec<f64> = (0..s.n).flat_map(|n| t.plane(n, c).to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn train_mode_output_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(Shape::new(4, 3, 5, 5), |_, c, _, _| {
            rng.gen_range(-2.0..2.0) * (c + 1) as f64 + c as f64
        });
        let mut p = BatchNormParams::new(3);
        p.mode = BnMode::Train;
        p.eps = 1e-12;
        p.gamma = vec![0.5, 2.0, 1.5];
        p.beta = vec![-1.0, 0.0, 3.0];
        let y = batch_norm(&x, &mut p).unwrap();
        for c in 0..3 {
            let (m, v) = moments(&y, c);
            assert!((m - p.beta[c]).abs() < 1e-10);
            assert!((v - p.gamma[c].powi(2)).abs() < 1e-8);
            // running stats moved toward the batch statistics
            let (bm, bv) = moments(&x, c);
            assert!((p.running_mean[c] - 0.1 * bm).abs() < 1e-12);
            assert!((p.running_var[c] - (0.9 + 0.1 * bv)).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_batch() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 1, 1));
        let mut p = BatchNormParams::new(2);
        p.mode = BnMode::Train;
        assert!(matches!(batch_norm(&x, &mut p), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2));
        let mut p = BatchNormParams::new(3);
        assert!(matches!(batch_norm(&x, &mut p), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn infer_is_affine_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::from_fn(Shape::new(2, 3, 3, 3), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let gamma = [1.3f64, -0.7, 2.0];
        let beta = [0.1, 0.2, 0.3];
        let mean = [0.5, -0.5, 0.0];
        let var = [0.8f64, 1.7, 0.2];
        let eps = 1e-5;
        let y0 = batch_norm_infer(&x, &gamma, &beta, &mean, &var, eps).unwrap();
        let delta = 0.37;
        for c in 0..3 {
            let mut x1 = x.clone();
            let v = x1.at(1, c, 2, 1);
            x1.set(1, c, 2, 1, v + delta);
            let y1 = batch_norm_infer(&x1, &gamma, &beta, &mean, &var, eps).unwrap();
            let diff = y1.at(1, c, 2, 1) - y0.at(1, c, 2, 1);
            let expect = gamma[c] * delta / (var[c] + eps).sqrt();
            assert!((diff - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_normalizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(Shape::new(2, 5, 2, 3), |_, _, _, _| rng.gen_range(-3.0..3.0));
        let (y, _) = layer_norm_channels(&x, &[1.0; 5], &[0.0; 5], 1e-12).unwrap();
        for n in 0..2 {
            for yy in 0..2 {
                for xx in 0..3 {
                    let v: Vec<f64> = (0..5).map(|c| y.at(n, c, yy, xx)).collect();
                    let m = v.iter().sum::<f64>() / 5.0;
                    let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 5.0;
                    assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}

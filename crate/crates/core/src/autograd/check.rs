use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Branches, ParamStore, Tape, Var};
use crate::error::{invalid, Error, Result};

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step, in `[1e-6, 1e-2]`.
    pub eps: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Coordinates probed per tensor; smaller tensors are probed fully.
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Gradient magnitude, relative to `max(1, |loss|)`, below which errors
    /// are measured against this floor instead of the gradient itself.
    /// Central differences carry round-off of about `ulp(loss) / eps`, so a
    /// coordinate whose true gradient is smaller than that cannot be
    /// compared relatively.
    pub floor: f64,
    /// Evaluate the finite differences with every ReLU and max/min held
    /// on the branch it took at the unperturbed point, so a step that
    /// crosses a kink somewhere in a large network does not corrupt the
    /// estimate. Backprop differentiates exactly this piece.
    pub freeze_branches: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-3,
            samples_per_tensor: 32,
            seed: 0,
            floor: 1e-7,
            freeze_branches: true,
        }
    }
}

/// Outcome for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

/// Comparison of analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub eps: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    /// The worst parameter, if any were checked.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, store: &ParamStore<f64>, branches: Option<&Branches>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = match branches {
        Some(b) => Tape::inference().replaying_branches(b.clone()),
        None => Tape::inference(),
    };
    let loss = f(&mut tape, store)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(invalid(format!("grad_check: loss has shape {}", v.shape())));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::NumericInstability(format!("loss evaluated to {v} while probing")));
    }
    Ok(v)
}

/// Checks the gradients of every trainable entry of `params` for the scalar
/// loss built by `f` against central differences `(f(p+e) - f(p-e)) / 2e`.
///
/// `f` must obtain parameters through [`ParamStore::leaf`] so the tape sees
/// them as named leaves.
pub fn grad_check<F>(params: &ParamStore<f64>, f: F, cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&cfg.eps) {
        return Err(invalid(format!("grad_check eps {} outside [1e-6, 1e-2]", cfg.eps)));
    }
    let mut tape = Tape::new().recording_branches();
    let loss = f(&mut tape, params)?;
    let branches = tape.take_branches();
    let branches = cfg.freeze_branches.then_some(&branches);
    let lv = tape.value(loss).data().first().copied().unwrap_or(f64::NAN);
    if !lv.is_finite() {
        return Err(Error::NumericInstability(format!("loss evaluated to {lv}")));
    }
    let grads = tape.backward(loss)?;
    let floor = cfg.floor * lv.abs().max(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = params.clone();
    let mut report = Vec::new();
    let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let base = params.require(&name)?.clone();
        let n = base.len();
        let coords: Vec<usize> = if n <= cfg.samples_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.samples_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let analytic = grads.param(&name);
        let mut max_err: f64 = 0.0;
        for &i in &coords {
            // In place: once the tensor is unshared, nudging a coordinate
            // does not copy it.
            let x0 = base.data()[i];
            let mut nudge = |x: f64| -> Result<f64> {
                probe.get_mut(&name).expect("probe mirrors params").data_mut()[i] = x;
                eval(&f, &probe, branches)
            };
            let fp = nudge(x0 + cfg.eps)?;
            let fm = nudge(x0 - cfg.eps)?;
            probe.get_mut(&name).expect("probe mirrors params").data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            max_err = max_err.max(relative_error(a, numeric, floor));
        }
        probe.set(&name, base)?;
        report.push(ParamCheck {
            name,
            coords_checked: coords.len(),
            max_rel_err: max_err,
        });
    }
    let passed = report.iter().all(|p| p.max_rel_err < cfg.tolerance);
    Ok(GradReport {
        params: report,
        eps: cfg.eps,
        tolerance: cfg.tolerance,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::super::ParamKind;
    use super::*;
    use crate::tensor::{Activation, BinaryOp, ConvGeom, Shape, Tensor};
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| StandardNormal.sample(&mut rng))
    }

    fn store(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, ParamKind::Trainable, t.clone()).unwrap();
        }
        s
    }

    /// A weighted sum makes every output coordinate matter with a distinct
    /// weight, so a wrong routing of gradients cannot cancel out.
    fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
        let w = tape.constant(randn(tape.shape(y), seed));
        let p = tape.mul(y, w)?;
        Ok(tape.sum(p))
    }

    fn assert_passes(s: &ParamStore<f64>, f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>) {
        let r = grad_check(s, f, &GradCheckConfig::default()).unwrap();
        assert!(r.passed, "{:?}", r.worst());
    }

    #[test]
    fn square_at_three() {
        let s = store(&[("x", Tensor::scalar(3.0))]);
        let r = grad_check(
            &s,
            |t, p| {
                let x = p.leaf(t, "x")?;
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_err() < 1e-8, "{}", r.max_rel_err());
    }

    #[test]
    fn linear_function_exact_for_any_eps() {
        let s = store(&[("x", randn(Shape::new(1, 3, 2, 2), 1))]);
        for eps in [1e-6, 1e-4, 1e-2] {
            let cfg = GradCheckConfig {
                eps,
                ..Default::default()
            };
            let r = grad_check(&s, |t, p| {
                let x = p.leaf(t, "x")?;
                let y = t.scale(x, 0.75);
                Ok(t.sum(y))
            }, &cfg)
            .unwrap();
            assert!(r.max_rel_err() < 1e-9, "eps {eps}: {}", r.max_rel_err());
        }
    }

    #[test]
    fn rejects_eps_out_of_range_and_nan_loss() {
        let s = store(&[("x", Tensor::scalar(1.0))]);
        let f = |t: &mut Tape<f64>, p: &ParamStore<f64>| {
            let x = p.leaf(t, "x")?;
            Ok(t.sum(x))
        };
        let cfg = GradCheckConfig {
            eps: 0.5,
            ..Default::default()
        };
        assert!(matches!(grad_check(&s, f, &cfg), Err(Error::InvalidArgument(_))));
        let s = store(&[("x", Tensor::scalar(f64::NAN))]);
        assert!(matches!(
            grad_check(&s, f, &GradCheckConfig::default()),
            Err(Error::NumericInstability(_))
        ));
    }

    #[test]
    fn conv_weight_on_1x2x5x5() {
        for geom in [
            ConvGeom::new(2, 3, 3, 1, 1, 1),
            ConvGeom::new(2, 4, 3, 2, 1, 2),
            ConvGeom::depthwise(2, 3),
            ConvGeom::new(2, 2, 2, 2, 0, 1),
            ConvGeom::depthwise(2, 7),
        ] {
            let s = store(&[
                ("x", randn(Shape::new(1, 2, 5, 5), 2)),
                ("w", randn(geom.weight_shape(), 3)),
                ("b", randn(Shape::vector(1, geom.out_c), 4)),
            ]);
            let cfg = GradCheckConfig {
                eps: 1e-4,
                ..Default::default()
            };
            let r = grad_check(
                &s,
                |t, p| {
                    let (x, w, b) = (p.leaf(t, "x")?, p.leaf(t, "w")?, p.leaf(t, "b")?);
                    let y = t.conv2d(x, w, Some(b), geom)?;
                    weighted_sum(t, y, 5)
                },
                &cfg,
            )
            .unwrap();
            assert!(r.passed, "{geom:?}: {:?}", r.worst());
        }
    }

    #[test]
    fn kernel_wider_than_the_map() {
        for (geom, hw) in [(ConvGeom::depthwise(3, 7), 2), (ConvGeom::new(2, 2, 7, 1, 3, 1), 1)] {
            let s = store(&[
                ("x", randn(Shape::new(2, geom.in_c, hw, hw), 12)),
                ("w", randn(geom.weight_shape(), 13)),
            ]);
            assert_passes(&s, |t, p| {
                let (x, w) = (p.leaf(t, "x")?, p.leaf(t, "w")?);
                let y = t.conv2d(x, w, None, geom)?;
                weighted_sum(t, y, 14)
            });
        }
    }

    #[test]
    fn batch_norm_train_through_batch_stats() {
        let s = store(&[
            ("x", randn(Shape::new(3, 2, 2, 2), 6)),
            ("g", randn(Shape::vector(1, 2), 7)),
            ("b", randn(Shape::vector(1, 2), 8)),
        ]);
        assert_passes(&s, |t, p| {
            let (x, g, b) = (p.leaf(t, "x")?, p.leaf(t, "g")?, p.leaf(t, "b")?);
            let (y, _) = t.batch_norm_train(x, g, b, 1e-5)?;
            weighted_sum(t, y, 9)
        });
    }

    #[test]
    fn batch_norm_infer_and_layer_norm() {
        let s = store(&[
            ("x", randn(Shape::new(2, 3, 2, 2), 10)),
            ("g", randn(Shape::vector(1, 3), 11)),
            ("b", randn(Shape::vector(1, 3), 12)),
        ]);
        assert_passes(&s, |t, p| {
            let (x, g, b) = (p.leaf(t, "x")?, p.leaf(t, "g")?, p.leaf(t, "b")?);
            let y = t.batch_norm_infer(x, g, b, &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
            weighted_sum(t, y, 13)
        });
        assert_passes(&s, |t, p| {
            let (x, g, b) = (p.leaf(t, "x")?, p.leaf(t, "g")?, p.leaf(t, "b")?);
            let y = t.layer_norm_channels(x, g, b, 1e-6)?;
            weighted_sum(t, y, 14)
        });
    }

    #[test]
    fn activations_shuffle_pool() {
        let s = store(&[("x", randn(Shape::new(2, 4, 3, 3), 15))]);
        for kind in [Activation::Relu, Activation::Gelu, Activation::Sigmoid] {
            assert_passes(&s, |t, p| {
                let x = p.leaf(t, "x")?;
                let y = t.activation(kind, x);
                weighted_sum(t, y, 16)
            });
        }
        assert_passes(&s, |t, p| {
            let x = p.leaf(t, "x")?;
            let y = t.channel_shuffle(x, 2)?;
            weighted_sum(t, y, 17)
        });
        assert_passes(&s, |t, p| {
            let x = p.leaf(t, "x")?;
            let y = t.global_avg_pool(x)?;
            weighted_sum(t, y, 18)
        });
    }

    #[test]
    fn broadcast_binary_ops() {
        let s = store(&[
            ("a", randn(Shape::new(2, 3, 2, 2), 19)),
            ("b", randn(Shape::new(1, 3, 1, 1), 20)),
        ]);
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Max] {
            assert_passes(&s, |t, p| {
                let (a, b) = (p.leaf(t, "a")?, p.leaf(t, "b")?);
                let y = t.binary(op, a, b)?;
                weighted_sum(t, y, 21)
            });
        }
    }

    #[test]
    fn concat_split_gate_reduce() {
        let s = store(&[
            ("a", randn(Shape::new(2, 3, 2, 2), 22)),
            ("b", randn(Shape::new(2, 3, 2, 2), 23)),
            ("w", randn(Shape::new(2, 3, 2, 2), 24)),
        ]);
        assert_passes(&s, |t, p| {
            let (a, b) = (p.leaf(t, "a")?, p.leaf(t, "b")?);
            let c = t.concat_channels(&[a, b])?;
            let parts = t.split_channels(c, &[1, 4, 1])?;
            let y = t.concat_channels(&[parts[2], parts[0], parts[1]])?;
            let y = t.narrow_batch(y, 1, 1)?;
            let y = t.stack_batch(&[y, c, y])?;
            weighted_sum(t, y, 25)
        });
        assert_passes(&s, |t, p| {
            let (a, b, w) = (p.leaf(t, "a")?, p.leaf(t, "b")?, p.leaf(t, "w")?);
            let y = t.gate(a, b, w)?;
            weighted_sum(t, y, 26)
        });
        for kind in [super::super::Reduce::Max, super::super::Reduce::Min, super::super::Reduce::Add] {
            assert_passes(&s, |t, p| {
                let (a, b, w) = (p.leaf(t, "a")?, p.leaf(t, "b")?, p.leaf(t, "w")?);
                let y = t.reduce(kind, &[a, b, w])?;
                weighted_sum(t, y, 27)
            });
        }
    }

    #[test]
    fn linear_and_cross_entropy() {
        let s = store(&[
            ("x", randn(Shape::vector(3, 5), 28)),
            ("w", randn(Shape::new(4, 5, 1, 1), 29)),
            ("b", randn(Shape::vector(1, 4), 30)),
        ]);
        assert_passes(&s, |t, p| {
            let (x, w, b) = (p.leaf(t, "x")?, p.leaf(t, "w")?, p.leaf(t, "b")?);
            let y = t.linear(x, w, Some(b))?;
            t.cross_entropy(y, &[0, 3, 2])
        });
    }

    #[test]
    fn backward_is_deterministic() {
        let s = store(&[
            ("x", randn(Shape::new(2, 4, 5, 5), 31)),
            ("w", randn(ConvGeom::new(4, 4, 3, 1, 1, 2).weight_shape(), 32)),
        ]);
        let run = || {
            let mut t = Tape::new();
            let (x, w) = (s.leaf(&mut t, "x").unwrap(), s.leaf(&mut t, "w").unwrap());
            let y = t.conv2d(x, w, None, ConvGeom::new(4, 4, 3, 1, 1, 2)).unwrap();
            let r = t.relu(y);
            let l = weighted_sum(&mut t, r, 33).unwrap();
            let g = t.backward(l).unwrap();
            (g.param("x").unwrap().clone(), g.param("w").unwrap().clone())
        };
        assert_eq!(run().0.data(), run().0.data());
        assert_eq!(run().1.data(), run().1.data());
    }

    #[test]
    fn frozen_branches_survive_a_kink_inside_the_step() {
        // 3e-6 lies within eps of the ReLU and max kinks.
        let s = store(&[("x", Tensor::from_vec(Shape::vector(1, 2), vec![3e-6, -3e-6]).unwrap())]);
        let f = |t: &mut Tape<f64>, p: &ParamStore<f64>| {
            let x = p.leaf(t, "x")?;
            let r = t.relu(x);
            let m = t.reduce(super::super::Reduce::Max, &[x, r])?;
            let z = t.constant(Tensor::zeros(Shape::vector(1, 2)));
            let b = t.binary(BinaryOp::Max, m, z)?;
            Ok(t.sum(b))
        };
        let frozen = grad_check(&s, f, &GradCheckConfig::default()).unwrap();
        assert!(frozen.passed, "{:?}", frozen.worst());
        let loose = GradCheckConfig {
            freeze_branches: false,
            ..Default::default()
        };
        assert!(!grad_check(&s, f, &loose).unwrap().passed);
    }

    #[test]
    fn replayed_branches_reproduce_the_recorded_pass() {
        let x = randn(Shape::new(2, 3, 4, 4), 9);
        let run = |t: &mut Tape<f64>| {
            let v = t.constant(x.clone());
            let r = t.relu(v);
            let n = t.scale(v, -1.0);
            let m = t.reduce(super::super::Reduce::Min, &[r, n]).unwrap();
            let b = t.binary(BinaryOp::Max, m, v).unwrap();
            t.value(b).clone()
        };
        let mut rec = Tape::new().recording_branches();
        let y = run(&mut rec);
        let branches = rec.take_branches();
        assert_eq!(branches.len(), 3);
        let mut rep = Tape::inference().replaying_branches(branches);
        assert_eq!(run(&mut rep), y);
    }
}

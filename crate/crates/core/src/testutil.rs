//! Helpers shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::ParamStore;
use crate::tensor::{Scalar, Shape, Tensor};

/// Seeded standard-normal tensor.
pub fn randn<T: Scalar>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| T::c(StandardNormal.sample(&mut rng)))
}

/// Overwrites every tensor with seeded uniform values: running variances in
/// `[0.5, 2)`, everything else in `[-0.5, 0.5)`.
pub fn randomize(s: &mut ParamStore<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = s.iter().map(|(n, _, _)| n.to_string()).collect();
    for n in names {
        let (lo, hi) = if n.ends_with("running_var") { (0.5, 2.0) } else { (-0.5, 0.5) };
        s.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
    }
}

/// Perturbs only batch-norm tensors, keeping initialised conv weights, so
/// activations stay at a realistic scale: γ in `[0.5, 1.5)`, β and running
/// means in `[-0.2, 0.2)`, running variances in `[0.5, 2)`.
pub fn randomize_bn(s: &mut ParamStore<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = s
        .iter()
        .filter(|(n, _, _)| {
            let layer = n.rsplit_once('.').map_or("", |(l, _)| l);
            s.contains(&format!("{layer}.running_var"))
        })
        .map(|(n, _, _)| n.to_string())
        .collect();
    for n in names {
        let (lo, hi) = if n.ends_with("running_var") {
            (0.5, 2.0)
        } else if n.ends_with(".weight") {
            (0.5, 1.5)
        } else {
            (-0.2, 0.2)
        };
        s.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
    }
}

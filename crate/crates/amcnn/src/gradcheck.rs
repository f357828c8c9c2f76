//! Central finite-difference verification of the backward pass.
//!
//! Double precision only: the checks compare analytic gradients
//! against (f(x+h) − f(x−h)) / 2h, which needs the headroom.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::loss::{
    combined_loss_graph, count_graph, euclidean_loss_graph, relative_deviation_loss_graph,
    LossConfig,
};
use crate::model::{build_model, ModelConfig, Variant};
use crate::tensor::Tensor;

/// One suite entry: an op (or the whole model) with the worst relative
/// error seen and the tolerance it must stay under.
#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: &'static str,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl CheckEntry {
    pub fn passed(&self) -> bool {
        self.rel_err <= self.tolerance
    }
}

/// Max over coordinates of |analytic − central difference| scaled by
/// max(1, |analytic|). `f` must map the point to a scalar tensor and
/// is re-evaluated at perturbed points, so it must not cache state.
pub fn grad_check(f: impl Fn(&Tensor<f64>) -> Tensor<f64>, point: &Tensor<f64>, h: f64) -> f64 {
    assert!((1e-7..=1e-3).contains(&h), "step {h} outside [1e-7, 1e-3]");
    let was_traced = point.requires_grad();
    point.set_requires_grad(true);
    point.zero_grad();
    let loss = f(point);
    loss.backward().expect("loss must be scalar");
    let analytic = point.grad().unwrap_or_else(|| vec![0.0; point.numel()]);
    point.zero_grad();

    let mut max_err = 0.0f64;
    for i in 0..point.numel() {
        let orig = point.data()[i];
        point.modify(|d| d[i] = orig + h);
        let up = f(point).value();
        point.modify(|d| d[i] = orig - h);
        let down = f(point).value();
        point.modify(|d| d[i] = orig);
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    point.set_requires_grad(was_traced);
    max_err
}

/// Random tensor values drawn uniformly from `lo..hi`.
fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Scalarize an op output against fixed random coefficients, probing
/// every output coordinate (a plain sum has zero gradient through a
/// softmax).
fn weighted_sum(out: &Tensor<f64>, coeff: &Tensor<f64>) -> Tensor<f64> {
    out.mul(coeff).unwrap().sum()
}

const H: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;
const POINTS: usize = 10;

fn max_over_points(
    rng: &mut ChaCha8Rng,
    mut one: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> f64 {
    (0..POINTS).map(|_| one(rng)).fold(0.0, f64::max)
}

/// The default verification suite: every differentiable op at 10
/// random points each, plus the full model with the combined loss on a
/// 32×32 input, probed at 20 random parameter coordinates.
pub fn run_default_suite(seed: u64) -> Vec<CheckEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut push = |name: &'static str, rel_err: f64, tolerance: f64| {
        entries.push(CheckEntry { name, rel_err, tolerance });
    };

    let conv_point = |rng: &mut ChaCha8Rng| {
        let x = uniform(rng, &[2, 6, 6], -1.0, 1.0);
        let w = uniform(rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = uniform(rng, &[3], -0.5, 0.5);
        let r = uniform(rng, &[3, 6, 6], -1.0, 1.0);
        (x, w, b, r)
    };
    let e = max_over_points(&mut rng, |rng| {
        let (x, w, b, r) = conv_point(rng);
        grad_check(|x| weighted_sum(&x.conv2d(&w, &b).unwrap(), &r), &x, H)
    });
    push("conv2d.input", e, OP_TOL);
    let e = max_over_points(&mut rng, |rng| {
        let (x, w, b, r) = conv_point(rng);
        grad_check(|w| weighted_sum(&x.conv2d(w, &b).unwrap(), &r), &w, H)
    });
    push("conv2d.weight", e, OP_TOL);
    let e = max_over_points(&mut rng, |rng| {
        let (x, w, b, r) = conv_point(rng);
        grad_check(|b| weighted_sum(&x.conv2d(&w, b).unwrap(), &r), &b, H)
    });
    push("conv2d.bias", e, OP_TOL);

    // Pool inputs come from a shuffled grid with gaps of 0.1, so no
    // perturbation by h can flip an argmax.
    let e = max_over_points(&mut rng, |rng| {
        let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
        vals.shuffle(rng);
        let x = Tensor::from_vec(&[2, 4, 4], vals).unwrap();
        let r = uniform(rng, &[2, 2, 2], -1.0, 1.0);
        grad_check(|x| weighted_sum(&x.maxpool2x2().unwrap(), &r), &x, H)
    });
    push("maxpool2x2.input", e, OP_TOL);

    // ReLU probed away from its kink: |x| >= 0.2 >> h.
    let e = max_over_points(&mut rng, |rng| {
        let n = 32;
        let vals: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0.2..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let x = Tensor::from_vec(&[2, 4, 4], vals).unwrap();
        let r = uniform(rng, &[2, 4, 4], -1.0, 1.0);
        grad_check(|x| weighted_sum(&x.relu(), &r), &x, H)
    });
    push("relu.input", e, 1e-6);

    let e = max_over_points(&mut rng, |rng| {
        let x = uniform(rng, &[2, 3, 3], -2.0, 2.0);
        let r = uniform(rng, &[2, 3, 3], -1.0, 1.0);
        grad_check(|x| weighted_sum(&x.tanh(), &r), &x, H)
    });
    push("tanh.input", e, OP_TOL);

    let e = max_over_points(&mut rng, |rng| {
        let x = uniform(rng, &[1, 4, 4], -2.0, 2.0);
        let r = uniform(rng, &[1, 4, 4], -1.0, 1.0);
        grad_check(|x| weighted_sum(&x.spatial_softmax().unwrap(), &r), &x, H)
    });
    push("spatial_softmax.input", e, OP_TOL);

    let e = max_over_points(&mut rng, |rng| {
        let f = uniform(rng, &[3, 4, 4], -1.0, 1.0);
        let m = uniform(rng, &[1, 4, 4], -1.0, 1.0);
        let r = uniform(rng, &[3, 4, 4], -1.0, 1.0);
        grad_check(|f| weighted_sum(&f.broadcast_mul(&m).unwrap(), &r), &f, H)
    });
    push("broadcast_mul.features", e, OP_TOL);
    let e = max_over_points(&mut rng, |rng| {
        let f = uniform(rng, &[3, 4, 4], -1.0, 1.0);
        let m = uniform(rng, &[1, 4, 4], -1.0, 1.0);
        let r = uniform(rng, &[3, 4, 4], -1.0, 1.0);
        grad_check(|m| weighted_sum(&f.broadcast_mul(m).unwrap(), &r), &m, H)
    });
    push("broadcast_mul.map", e, OP_TOL);

    let binary = |rng: &mut ChaCha8Rng| {
        let a = uniform(rng, &[2, 3, 3], -1.0, 1.0);
        let b = uniform(rng, &[2, 3, 3], -1.0, 1.0);
        let r = uniform(rng, &[2, 3, 3], -1.0, 1.0);
        (a, b, r)
    };
    let e = max_over_points(&mut rng, |rng| {
        let (a, b, r) = binary(rng);
        grad_check(|a| weighted_sum(&a.add(&b).unwrap(), &r), &a, H)
            .max(grad_check(|b| weighted_sum(&a.add(b).unwrap(), &r), &b, H))
    });
    push("add", e, OP_TOL);
    let e = max_over_points(&mut rng, |rng| {
        let (a, b, r) = binary(rng);
        grad_check(|a| weighted_sum(&a.sub(&b).unwrap(), &r), &a, H)
            .max(grad_check(|b| weighted_sum(&a.sub(b).unwrap(), &r), &b, H))
    });
    push("sub", e, OP_TOL);
    let e = max_over_points(&mut rng, |rng| {
        let (a, b, r) = binary(rng);
        grad_check(|a| weighted_sum(&a.mul(&b).unwrap(), &r), &a, H)
            .max(grad_check(|b| weighted_sum(&a.mul(b).unwrap(), &r), &b, H))
    });
    push("mul", e, OP_TOL);
    let e = max_over_points(&mut rng, |rng| {
        let a = uniform(rng, &[2, 3, 3], -1.0, 1.0);
        let r = uniform(rng, &[2, 3, 3], -1.0, 1.0);
        grad_check(|a| weighted_sum(&a.scale(1.7), &r), &a, H)
    });
    push("scale", e, OP_TOL);
    let e = max_over_points(&mut rng, |rng| {
        let a = uniform(rng, &[2, 3, 3], -1.0, 1.0);
        let r = uniform(rng, &[2, 3, 3], -1.0, 1.0);
        grad_check(|a| weighted_sum(&a.offset(0.3), &r), &a, H)
    });
    push("offset", e, OP_TOL);
    let e = max_over_points(&mut rng, |rng| {
        let a = uniform(rng, &[2, 3, 3], -1.0, 1.0);
        grad_check(|a| a.sum(), &a, H)
    });
    push("sum", e, OP_TOL);
    let e = max_over_points(&mut rng, |rng| {
        let a = uniform(rng, &[1, 3, 3], -1.0, 1.0);
        let b = uniform(rng, &[2, 3, 3], -1.0, 1.0);
        let r = uniform(rng, &[3, 3, 3], -1.0, 1.0);
        grad_check(
            |a| weighted_sum(&Tensor::concat_channels(&[a.clone(), b.clone()]).unwrap(), &r),
            &a,
            H,
        )
        .max(grad_check(
            |b| weighted_sum(&Tensor::concat_channels(&[a.clone(), b.clone()]).unwrap(), &r),
            &b,
            H,
        ))
    });
    push("concat_channels", e, OP_TOL);

    push("end_to_end.combined_loss", end_to_end_error(&mut rng), 1e-3);
    entries
}

/// Full model + combined loss on a 32×32 input, checked at 20 random
/// parameter coordinates against central differences.
fn end_to_end_error(rng: &mut ChaCha8Rng) -> f64 {
    let model = build_model::<f64>(
        ModelConfig::new(Variant::AmCnn).with_seed(rng.random()),
    )
    .unwrap();
    let image = uniform(rng, &[1, 32, 32], 0.0, 1.0);
    let gt = uniform(rng, &[1, 8, 8], 0.0, 0.05);
    let gt_count: f64 = gt.to_vec().iter().sum();
    // A deliberately heavy rd weight so this entry also exercises the
    // count branch of the graph; the stock 1e-7 would vanish under
    // finite-difference noise.
    let cfg = LossConfig { alpha: 0.1, z: 1.0, use_rd: true };

    let params = model.parameters();
    for (_, p) in &params {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    let loss_of = || {
        let out = model.forward(&image).unwrap();
        let ed = euclidean_loss_graph(&[out.density.clone()], &[gt.clone()], &[None]).unwrap();
        let count = count_graph(&out.density, None).unwrap();
        let rd = relative_deviation_loss_graph(&[gt_count], &[count], cfg.z).unwrap();
        combined_loss_graph(&ed, Some(&rd), &cfg).unwrap()
    };
    loss_of().backward().unwrap();
    let grads: Vec<Vec<f64>> =
        params.iter().map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect();
    for (_, p) in &params {
        p.zero_grad();
    }

    let mut max_err = 0.0f64;
    for _ in 0..20 {
        let pi = rng.random_range(0..params.len());
        let ci = rng.random_range(0..params[pi].1.numel());
        let p = &params[pi].1;
        let orig = p.data()[ci];
        p.modify(|d| d[ci] = orig + H);
        let up = loss_of().value();
        p.modify(|d| d[ci] = orig - H);
        let down = loss_of().value();
        p.modify(|d| d[ci] = orig);
        let numeric = (up - down) / (2.0 * H);
        let analytic = grads[pi][ci];
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        max_err = max_err.max(err);
    }
    for (_, p) in &params {
        p.set_requires_grad(false);
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_near_exact() {
        let x = Tensor::from_vec(&[4], vec![0.4, -1.2, 2.0, 0.7]).unwrap();
        let err = grad_check(|x| x.scale(3.0).sum(), &x, 1e-5);
        assert!(err <= 1e-10, "rel err {err}");
    }

    #[test]
    fn relu_away_from_kink_is_tight() {
        let x = Tensor::from_vec(&[3], vec![0.5, -0.8, 1.4]).unwrap();
        let err = grad_check(|x| x.relu().sum(), &x, 1e-5);
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    #[should_panic(expected = "outside")]
    fn step_size_is_bounded() {
        let x = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        grad_check(|x| x.sum(), &x, 1e-2);
    }

    #[test]
    fn default_suite_passes() {
        for entry in run_default_suite(20240915) {
            assert!(
                entry.passed(),
                "{}: rel err {} > {}",
                entry.name,
                entry.rel_err,
                entry.tolerance
            );
        }
    }
}

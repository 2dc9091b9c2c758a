//! Shared helpers for the integration test suites.

#![allow(dead_code)]

use asrlab::rng::DetRng;
use asrlab::tensor::{NodeId, Param, ParamSet, Tape, Tensor};

/// Uniform random tensor in `[-scale, scale]`.
pub fn rand_tensor(rng: &mut DetRng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.uniform_in(-scale, scale)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Uniform random tensor avoiding the band `(-gap, gap)`, for checking ops
/// with a kink at zero (relu) where finite differences straddle the corner.
pub fn rand_tensor_away_from_zero(rng: &mut DetRng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let v = rng.uniform_in(gap, 1.0);
            if rng.uniform() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

const FD_STEP: f64 = 1e-5;

/// Compare analytic gradients against central finite differences for every
/// element of every parameter in `model`, returning the worst relative error.
///
/// `build` must be a pure function of the parameter values: any randomness
/// inside must come from a freshly seeded generator per call.
pub fn max_grad_rel_err<M, F>(model: &mut M, build: F) -> f64
where
    M: ParamSet<f64>,
    F: Fn(&M, &mut Tape<f64>) -> NodeId,
{
    let mut tape = Tape::training();
    let loss = build(model, &mut tape);
    tape.backward(loss).expect("backward");
    let mut analytic: Vec<Tensor<f64>> = Vec::new();
    model.for_each_param(&mut |p| {
        let g = tape
            .param_grad(p)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        analytic.push(g);
    });

    let eval = |m: &M| -> f64 {
        let mut t = Tape::training();
        let l = build(m, &mut t);
        t.value(l).item()
    };

    let mut worst: f64 = 0.0;
    let n_params = model.param_count();
    for pi in 0..n_params {
        for j in 0..analytic[pi].numel() {
            let mut orig = 0.0;
            nudge(model, pi, j, FD_STEP, &mut orig);
            let lp = eval(model);
            restore(model, pi, j, orig - FD_STEP);
            let lm = eval(model);
            restore(model, pi, j, orig);
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let a = analytic[pi].data()[j];
            let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

fn nudge<M: ParamSet<f64>>(model: &mut M, pi: usize, j: usize, h: f64, orig: &mut f64) {
    let mut k = 0;
    let mut saved = 0.0;
    model.visit_params(&mut |p| {
        if k == pi {
            saved = p.value.data()[j];
            p.value.data_mut()[j] = saved + h;
        }
        k += 1;
    });
    *orig = saved;
}

fn restore<M: ParamSet<f64>>(model: &mut M, pi: usize, j: usize, v: f64) {
    let mut k = 0;
    model.visit_params(&mut |p| {
        if k == pi {
            p.value.data_mut()[j] = v;
        }
        k += 1;
    });
}

/// Dot the node against a fixed random direction and sum, giving a scalar
/// loss whose gradient exercises every output element distinctly.
pub fn random_projection_loss(
    tape: &mut Tape<f64>,
    y: NodeId,
    proj_seed: u64,
) -> NodeId {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = DetRng::new(proj_seed);
    let c = tape.constant(rand_tensor(&mut rng, &shape, 1.0));
    let prod = tape.mul(y, c).expect("projection shapes match");
    tape.sum_all(prod)
}

/// Convenience: parameters wrapped for the ops-level gradient checks.
pub fn params_of(tensors: Vec<(&str, Tensor<f64>)>) -> Vec<Param<f64>> {
    tensors.into_iter().map(|(n, t)| Param::new(n, t)).collect()
}

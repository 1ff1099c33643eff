//! Gradient checks for every tape primitive against the central-difference
//! oracle: 100 random seeds per primitive, inputs bounded in [-2, 2], relu
//! kinks avoided by resampling entries with |x| < 1e-3.
//!
//! Acceptance rule per coordinate: |analytic - numeric| <= 1e-8, or relative
//! error <= 1e-5 away from zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dvn_core::tape::Tape;
use dvn_core::tensor::{finite_diff_grad, Tensor};

const EPS: f64 = 1e-5;
const SEEDS: u64 = 100;

fn sample(rng: &mut ChaCha8Rng, shape: Vec<usize>, avoid_kink: bool) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-2.0..2.0);
            if !avoid_kink || v.abs() >= 1e-3 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn assert_close(name: &str, seed: u64, analytic: &[f64], numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let rel = diff / a.abs().max(n.abs()).max(f64::MIN_POSITIVE);
        assert!(
            diff <= 1e-8 || rel <= 1e-5,
            "{} seed {} coord {}: analytic {} vs numeric {} (diff {:.3e}, rel {:.3e})",
            name,
            seed,
            i,
            a,
            n,
            diff,
            rel
        );
    }
}

/// Checks one primitive: `build` records loss(params, fixed inputs) on a
/// fresh tape and must register the parameter leaf under `"p"`.
fn check_primitive<F>(name: &str, param_shape: Vec<usize>, avoid_kink: bool, build: F)
where
    F: Fn(&mut Tape, &Tensor, &mut ChaCha8Rng),
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = sample(&mut rng, param_shape.clone(), avoid_kink);

        let mut tape = Tape::new();
        let mut build_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(10_000));
        build(&mut tape, &params, &mut build_rng);
        tape.forward_eval().unwrap();
        tape.backward_eval().unwrap();
        let analytic = tape.grad_by_name("p").expect("param leaf named p");

        let numeric = finite_diff_grad(
            |p| {
                let mut t = Tape::new();
                let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(10_000));
                build(&mut t, p, &mut r);
                t.forward_eval().unwrap().scalar_value().unwrap()
            },
            &params,
            EPS,
        );
        assert_close(name, seed, &analytic, numeric.data());
    }
}

#[test]
fn matmul_gradient_left_operand() {
    check_primitive("matmul(a,.)", vec![3, 4], false, |tape, p, rng| {
        let a = tape.param("p", p);
        let b = tape.input(&sample(rng, vec![4, 2], false));
        let y = tape.matmul(a, b);
        tape.sq_sum(y);
    });
}

#[test]
fn matmul_gradient_right_operand() {
    check_primitive("matmul(.,b)", vec![4, 2], false, |tape, p, rng| {
        let a = tape.input(&sample(rng, vec![3, 4], false));
        let b = tape.param("p", p);
        let y = tape.matmul(a, b);
        tape.sq_sum(y);
    });
}

#[test]
fn conv2d_gradient_weights_stride_one() {
    check_primitive("conv2d weight s1", vec![3, 3, 2, 3], false, |tape, p, rng| {
        let x = tape.input(&sample(rng, vec![2, 2, 5, 5], false));
        let w = tape.param("p", p);
        let y = tape.conv2d(x, w, 1);
        tape.sq_sum(y);
    });
}

#[test]
fn conv2d_gradient_input_stride_two() {
    check_primitive("conv2d input s2", vec![1, 2, 5, 5], false, |tape, p, rng| {
        let x = tape.param("p", p);
        let w = tape.input(&sample(rng, vec![3, 3, 2, 2], false));
        let y = tape.conv2d(x, w, 2);
        tape.sq_sum(y);
    });
}

#[test]
fn bias_add_gradient() {
    check_primitive("bias_add", vec![3], false, |tape, p, rng| {
        let x = tape.input(&sample(rng, vec![4, 3], false));
        let b = tape.param("p", p);
        let y = tape.bias_add(x, b);
        tape.sq_sum(y);
    });
}

#[test]
fn bias_add_gradient_conv_activation() {
    check_primitive("bias_add nchw", vec![2], false, |tape, p, rng| {
        let x = tape.input(&sample(rng, vec![2, 2, 3, 3], false));
        let b = tape.param("p", p);
        let y = tape.bias_add(x, b);
        tape.sq_sum(y);
    });
}

#[test]
fn relu_gradient_away_from_kinks() {
    check_primitive("relu", vec![4, 5], true, |tape, p, _| {
        let x = tape.param("p", p);
        let y = tape.relu(x);
        tape.sq_sum(y);
    });
}

#[test]
fn mean_pool_gradient() {
    check_primitive("mean_pool", vec![2, 3, 4, 4], false, |tape, p, _| {
        let x = tape.param("p", p);
        let y = tape.mean_pool(x);
        tape.sq_sum(y);
    });
}

#[test]
fn channel_norm_gradient_input() {
    check_primitive("channel_norm x", vec![4, 3, 2, 2], false, |tape, p, rng| {
        let x = tape.param("p", p);
        let scale = tape.input(&sample(rng, vec![3], false));
        let shift = tape.input(&sample(rng, vec![3], false));
        let y = tape.channel_norm_batch(x, scale, shift);
        tape.sq_sum(y);
    });
}

#[test]
fn channel_norm_gradient_scale_shift() {
    check_primitive("channel_norm scale", vec![3], false, |tape, p, rng| {
        let x = tape.input(&sample(rng, vec![5, 3], false));
        let scale = tape.param("p", p);
        let shift = tape.input(&sample(rng, vec![3], false));
        let y = tape.channel_norm_batch(x, scale, shift);
        tape.sq_sum(y);
    });
    check_primitive("channel_norm shift", vec![3], false, |tape, p, rng| {
        let x = tape.input(&sample(rng, vec![5, 3], false));
        let scale = tape.input(&sample(rng, vec![3], false));
        let shift = tape.param("p", p);
        let y = tape.channel_norm_batch(x, scale, shift);
        tape.sq_sum(y);
    });
}

#[test]
fn frozen_norm_gradient() {
    check_primitive("channel_norm frozen", vec![4, 3], false, |tape, p, rng| {
        let x = tape.param("p", p);
        let scale = tape.input(&sample(rng, vec![3], false));
        let shift = tape.input(&sample(rng, vec![3], false));
        let mean = vec![0.1, -0.2, 0.3];
        let var = vec![0.9, 1.1, 0.7];
        let y = tape.channel_norm_frozen(x, scale, shift, &mean, &var);
        tape.sq_sum(y);
    });
}

#[test]
fn softmax_cross_entropy_gradient() {
    check_primitive("softmax_ce", vec![4, 5], false, |tape, p, rng| {
        let z = tape.param("p", p);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        tape.softmax_cross_entropy(z, &labels);
    });
}

#[test]
fn soft_target_cross_entropy_gradient() {
    check_primitive("soft_target_ce", vec![3, 4], false, |tape, p, rng| {
        let z = tape.param("p", p);
        // random distributions per row
        let mut targets = vec![0.0; 12];
        for row in targets.chunks_mut(4) {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (t, r) in row.iter_mut().zip(raw) {
                *t = r / s;
            }
        }
        tape.soft_target_cross_entropy(z, &targets, 2.0);
    });
}

#[test]
fn gather_block_gradient() {
    check_primitive("gather_block", vec![2, 4, 5], false, |tape, p, _| {
        let x = tape.param("p", p);
        let y = tape.gather_block(x, Some(&[0, 2, 3]), Some(&[1, 4]));
        tape.sq_sum(y);
    });
}

#[test]
fn scalar_glue_gradients() {
    check_primitive("add_n/scale/sq_sum", vec![6], false, |tape, p, _| {
        let x = tape.param("p", p);
        let a = tape.sq_sum(x);
        let b = tape.scale(a, 0.3);
        let c = tape.add_n(&[a, b]);
        tape.scale(c, 1.7);
    });
}

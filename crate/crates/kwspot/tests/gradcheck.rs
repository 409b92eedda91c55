//! Central-finite-difference checks of the analytic gradients, layer by layer
//! and for the default architecture shape at toy width.
//!
//! The loss is evaluated as a deterministic function of the parameters by
//! reseeding the forward RNG identically for every evaluation, so dropout
//! masks and noise draws cancel out of the finite differences.

use kwspot::nn::{bce_loss, compact_architecture, CnnModel, LayerSpec};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn loss_of(model: &CnnModel<f64>, x: &Array2<f64>, y: &[f64], rng_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (out, _) = model.forward_train(x.view(), &mut rng).unwrap();
    bce_loss(y, out.as_slice().unwrap()).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Max relative error between analytic and numeric gradients over every
/// parameter of `model` on one random instance.
fn max_gradient_error(layers: Vec<LayerSpec>, input_dim: usize, t_len: usize, seed: u64) -> f64 {
    let model = CnnModel::<f64>::new(input_dim, layers, seed).unwrap();
    let l = model.output_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let x = Array2::from_shape_fn((t_len, input_dim), |_| rng.random_range(-1.0..1.0));
    let y: Vec<f64> = (0..l).map(|_| rng.random_range(0.05..0.95)).collect();
    let fwd_seed = seed.wrapping_add(7);

    let mut fwd_rng = ChaCha8Rng::seed_from_u64(fwd_seed);
    let (_, cache) = model.forward_train(x.view(), &mut fwd_rng).unwrap();
    let grads = model.backward(&cache, &y).unwrap();

    let mut worst = 0.0f64;
    for layer_idx in 0..model.layers().len() {
        let Some(g) = grads.0[layer_idx].as_ref() else {
            continue;
        };
        let n_w = g.weights.len();
        let n_b = g.bias.len();
        for i in 0..n_w + n_b {
            let analytic = if i < n_w {
                g.weights.as_slice().unwrap()[i]
            } else {
                g.bias[i - n_w]
            };
            let perturbed = |delta: f64| -> f64 {
                let mut m = model.clone();
                let p = m.params_mut()[layer_idx].as_mut().unwrap();
                if i < n_w {
                    p.weights.as_slice_mut().unwrap()[i] += delta;
                } else {
                    p.bias[i - n_w] += delta;
                }
                loss_of(&m, &x, &y, fwd_seed)
            };
            // Central difference at h, refined at h/10 and h/100 when the
            // +-h interval straddles a kink (leaky-ReLU sign flip or pool
            // argmax change), where the h-step estimator is invalid. A wrong
            // analytic gradient stays wrong at every step size, so the
            // refinement only forgives estimator breakdown, never bugs.
            let mut err = f64::INFINITY;
            for step in [H, H / 10.0, H / 100.0] {
                let numeric = (perturbed(step) - perturbed(-step)) / (2.0 * step);
                err = rel_err(analytic, numeric);
                if err < TOL {
                    break;
                }
            }
            worst = worst.max(err);
        }
    }
    worst
}

fn run_seeds(layers_for: impl Fn() -> Vec<LayerSpec>, input_dim: usize, t_len: usize) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        worst = worst.max(max_gradient_error(layers_for(), input_dim, t_len, seed));
    }
    worst
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    let worst = run_seeds(
        || {
            vec![
                LayerSpec::Conv1d {
                    filters: 4,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::GlobalMaxPoolTime,
                LayerSpec::Dense { units: 2 },
                LayerSpec::Sigmoid,
            ]
        },
        3,
        12,
    );
    assert!(worst < TOL, "conv1d max rel err {worst}");
}

#[test]
fn strided_conv_gradients_match_finite_differences() {
    let worst = run_seeds(
        || {
            vec![
                LayerSpec::Conv1d {
                    filters: 3,
                    kernel: 4,
                    stride: 2,
                },
                LayerSpec::LeakyRelu { alpha: 1.0 / 3.0 },
                LayerSpec::Conv1d {
                    filters: 5,
                    kernel: 2,
                    stride: 1,
                },
                LayerSpec::GlobalMaxPoolTime,
                LayerSpec::Dense { units: 2 },
                LayerSpec::Sigmoid,
            ]
        },
        2,
        16,
    );
    assert!(worst < TOL, "strided conv max rel err {worst}");
}

#[test]
fn leaky_relu_gradients_match_finite_differences() {
    let worst = run_seeds(
        || {
            vec![
                LayerSpec::Conv1d {
                    filters: 4,
                    kernel: 2,
                    stride: 1,
                },
                LayerSpec::LeakyRelu { alpha: 1.0 / 3.0 },
                LayerSpec::GlobalMaxPoolTime,
                LayerSpec::Dense { units: 3 },
                LayerSpec::LeakyRelu { alpha: 1.0 / 3.0 },
                LayerSpec::Dense { units: 2 },
                LayerSpec::Sigmoid,
            ]
        },
        3,
        10,
    );
    assert!(worst < TOL, "leaky relu max rel err {worst}");
}

#[test]
fn dense_stack_gradients_match_finite_differences() {
    let worst = run_seeds(
        || {
            vec![
                LayerSpec::GlobalMaxPoolTime,
                LayerSpec::Dense { units: 6 },
                LayerSpec::Dense { units: 4 },
                LayerSpec::Dense { units: 3 },
                LayerSpec::Sigmoid,
            ]
        },
        4,
        8,
    );
    assert!(worst < TOL, "dense max rel err {worst}");
}

#[test]
fn dropout_gradients_match_finite_differences() {
    let worst = run_seeds(
        || {
            vec![
                LayerSpec::Conv1d {
                    filters: 4,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::Dropout { p: 0.3 },
                LayerSpec::GlobalMaxPoolTime,
                LayerSpec::Dense { units: 5 },
                LayerSpec::Dropout { p: 0.5 },
                LayerSpec::Dense { units: 2 },
                LayerSpec::Sigmoid,
            ]
        },
        3,
        11,
    );
    assert!(worst < TOL, "dropout max rel err {worst}");
}

#[test]
fn gaussian_noise_gradients_match_finite_differences() {
    let worst = run_seeds(
        || {
            vec![
                LayerSpec::GaussianNoise { sigma: 0.2 },
                LayerSpec::Conv1d {
                    filters: 3,
                    kernel: 2,
                    stride: 1,
                },
                LayerSpec::GlobalMaxPoolTime,
                LayerSpec::Dense { units: 2 },
                LayerSpec::Sigmoid,
            ]
        },
        2,
        9,
    );
    assert!(worst < TOL, "gaussian noise max rel err {worst}");
}

#[test]
fn compact_architecture_gradients_match_finite_differences() {
    let worst = run_seeds(|| compact_architecture(3, true), 4, 20);
    assert!(worst < TOL, "compact architecture max rel err {worst}");
}

/// The full-scale architecture shape (ten convs, two dense blocks with
/// dropout, input noise) at toy widths.
#[test]
fn default_architecture_shape_at_toy_width() {
    let layers = || {
        let mut layers = vec![LayerSpec::GaussianNoise { sigma: 0.1 }];
        for filters in [4usize, 4, 5, 5, 6, 6, 7, 7, 8, 8] {
            layers.push(LayerSpec::Conv1d {
                filters,
                kernel: 5,
                stride: 1,
            });
            layers.push(LayerSpec::LeakyRelu { alpha: 1.0 / 3.0 });
        }
        layers.push(LayerSpec::GlobalMaxPoolTime);
        for _ in 0..2 {
            layers.push(LayerSpec::Dense { units: 10 });
            layers.push(LayerSpec::LeakyRelu { alpha: 1.0 / 3.0 });
            layers.push(LayerSpec::Dropout { p: 0.5 });
        }
        layers.push(LayerSpec::Dense { units: 3 });
        layers.push(LayerSpec::Sigmoid);
        layers
    };
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        worst = worst.max(max_gradient_error(layers(), 3, 45, seed));
    }
    assert!(worst < TOL, "toy default architecture max rel err {worst}");
}

//! Central finite-difference verification of every layer's backward pass.
//!
//! Each case projects the layer output onto a fixed random tensor `r`, so the
//! scalar loss is `sum(r * f(x))` and the analytic gradients come from
//! back-propagating `r`. Inputs feeding kinks (ReLU, max-pool) are drawn away
//! from the non-differentiable points.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::layers::{BatchNorm, Conv2d, Dense, Layer};
use super::network::Network;
use super::tensor::Tensor;
use crate::error::Result;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so gradients near zero are compared absolutely.
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

fn projected_loss(net: &Network, x: &Tensor, r: &[f64], dropout_seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (y, _) = net.forward_train(x.clone(), &mut rng)?;
    Ok(y.data().iter().zip(r).map(|(a, b)| a * b).sum())
}

/// Compares analytic and numeric gradients for every input element and
/// every trainable parameter. Analytic gradients are scaled by
/// `1 + perturb` first (zero for a genuine check).
pub fn check_network(net: &Network, x: &Tensor, seed: u64, perturb: f64) -> Result<(f64, usize)> {
    let dropout_seed = seed ^ 0x5eed;
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (y, tape) = net.forward_train(x.clone(), &mut rng)?;
    let mut proj = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let r: Vec<f64> = (0..y.len()).map(|_| proj.random_range(-1.0..1.0)).collect();
    let (grads, gx) = net.backward(&tape, Tensor::from_parts(y.shape().to_vec(), r.clone()))?;
    let k = 1.0 + perturb;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let up = projected_loss(net, &probe, &r, dropout_seed)?;
        probe.data_mut()[i] = orig - STEP;
        let down = projected_loss(net, &probe, &r, dropout_seed)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(k * gx.data()[i], (up - down) / (2.0 * STEP)));
        checked += 1;
    }

    let mut probe = net.clone();
    for (li, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        for (which, analytic) in [(0, &g.weight), (1, &g.bias)] {
            for (j, a) in analytic.iter().enumerate() {
                let nudge = |net: &mut Network, delta: f64| {
                    let (w, b) = net.layers[li].params_mut().expect("gradient implies parameters");
                    let slot = if which == 0 { &mut w[j] } else { &mut b[j] };
                    *slot += delta;
                };
                nudge(&mut probe, STEP);
                let up = projected_loss(&probe, x, &r, dropout_seed)?;
                nudge(&mut probe, -2.0 * STEP);
                let down = projected_loss(&probe, x, &r, dropout_seed)?;
                nudge(&mut probe, STEP);
                worst = worst.max(relative_error(k * a, (up - down) / (2.0 * STEP)));
                checked += 1;
            }
        }
    }
    Ok((worst, checked))
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Values with `|v| >= 0.1`, keeping ReLU inputs off the kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_parts(shape, data)
}

/// Distinct values at least 0.01 apart, so no pooling window has a near tie.
fn distinct(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.005 * n as f64).collect();
    data.shuffle(rng);
    Tensor::from_parts(shape, data)
}

fn with_params(mut layers: Vec<Layer>, rng: &mut ChaCha8Rng) -> Network {
    for l in &mut layers {
        match l {
            Layer::Conv2d(c) => {
                c.weight.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
                c.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
            Layer::Dense(d) => {
                d.weight.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
                d.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
            Layer::BatchNorm(b) => {
                b.gamma.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
                b.beta.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
            _ => {}
        }
    }
    Network::new(layers)
}

/// Names of the single-layer cases, one or more per layer kind.
pub const CASES: &[&str] = &[
    "conv2d",
    "conv2d_stride2",
    "conv2d_1x1",
    "relu",
    "batchnorm",
    "batchnorm_dense",
    "maxpool2",
    "upsample2",
    "dropout",
    "flatten",
    "dense",
    "softmax",
    "linear",
];

fn case(name: &str, rng: &mut ChaCha8Rng) -> (Network, Tensor) {
    let (layers, x) = match name {
        "conv2d" => (
            vec![Layer::Conv2d(Conv2d::new(3, 4, 3, 1))],
            uniform(rng, vec![2, 3, 6, 5]),
        ),
        "conv2d_stride2" => (
            vec![Layer::Conv2d(Conv2d::new(2, 3, 3, 2))],
            uniform(rng, vec![2, 2, 7, 6]),
        ),
        "conv2d_1x1" => (
            vec![Layer::Conv2d(Conv2d::new(4, 2, 1, 1))],
            uniform(rng, vec![2, 4, 4, 4]),
        ),
        "relu" => (vec![Layer::Relu], off_zero(rng, vec![2, 3, 4, 4])),
        "batchnorm" => (
            vec![Layer::BatchNorm(BatchNorm::new(3))],
            uniform(rng, vec![4, 3, 4, 4]),
        ),
        "batchnorm_dense" => (vec![Layer::BatchNorm(BatchNorm::new(5))], uniform(rng, vec![8, 5])),
        "maxpool2" => (vec![Layer::MaxPool2], distinct(rng, vec![2, 3, 6, 8])),
        "upsample2" => (vec![Layer::Upsample2], uniform(rng, vec![2, 3, 3, 4])),
        "dropout" => (vec![Layer::Dropout { p: 0.25 }], uniform(rng, vec![2, 3, 4, 4])),
        "flatten" => (vec![Layer::Flatten], uniform(rng, vec![2, 3, 4, 4])),
        "dense" => (vec![Layer::Dense(Dense::new(12, 5))], uniform(rng, vec![3, 12])),
        "softmax" => (vec![Layer::Softmax], uniform(rng, vec![2, 4, 3, 3])),
        "linear" => (vec![Layer::Linear], uniform(rng, vec![4, 1])),
        other => unreachable!("unknown gradient case {other}"),
    };
    (with_params(layers, rng), x)
}

/// Runs every single-layer case. Deterministic for a given seed.
pub fn run_suite(seed: u64, perturb: f64) -> Result<Vec<LayerCheck>> {
    CASES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let (net, x) = case(name, &mut rng);
            let (max_rel_error, checked) = check_network(&net, &x, seed.wrapping_add(i as u64), perturb)?;
            Ok(LayerCheck {
                layer: name.to_string(),
                max_rel_error,
                checked,
            })
        })
        .collect()
}

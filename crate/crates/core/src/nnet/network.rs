use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Cache, Layer, Mode, ParamGrad};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-layer record of a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    caches: Vec<Cache>,
}

/// One entry per layer; `None` for parameterless layers.
pub type Gradients = Vec<Option<ParamGrad>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases,
    /// unit gamma and zero beta, drawn in layer order from `seed`.
    pub fn init_he_uniform(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            let (w, fan_in) = match layer {
                Layer::Conv2d(c) => {
                    let f = c.fan_in();
                    (&mut c.weight, f)
                }
                Layer::Dense(d) => (&mut d.weight, d.inputs),
                _ => continue,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(c) => c.bias.fill(0.0),
                Layer::Dense(d) => d.bias.fill(0.0),
                _ => {}
            }
        }
    }

    pub fn infer(&self, x: Tensor) -> Result<Tensor> {
        // dropout is inert in inference, so this stream is never read
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.layers
            .iter()
            .try_fold(x, |x, l| l.forward(x, Mode::Infer, &mut rng).map(|(y, _)| y))
    }

    /// Train-mode forward; batch norm uses batch statistics and dropout
    /// draws from `rng`. Running statistics are not touched here, see
    /// [`Network::update_running_stats`].
    pub fn forward_train(&self, x: Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tape)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut y = x;
        for layer in &self.layers {
            let (out, cache) = layer.forward(y, Mode::Train, rng)?;
            caches.push(cache);
            y = out;
        }
        Ok((y, Tape { caches }))
    }

    pub fn forward(&self, x: Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<(Tensor, Option<Tape>)> {
        match mode {
            Mode::Train => self.forward_train(x, rng).map(|(y, t)| (y, Some(t))),
            Mode::Infer => self.infer(x).map(|y| (y, None)),
        }
    }

    /// Back-propagates `grad = dL/d(output)`. Returns parameter gradients
    /// and `dL/d(input)`.
    pub fn backward(&self, tape: &Tape, grad: Tensor) -> Result<(Gradients, Tensor)> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::MissingCache);
        }
        let mut grads = vec![None; self.layers.len()];
        let mut g = grad;
        for (i, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            let (gx, pg) = layer.backward(cache, g)?;
            grads[i] = pg;
            g = gx;
        }
        Ok((grads, g))
    }

    pub fn update_running_stats(&mut self, tape: &Tape) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            if let (Layer::BatchNorm(b), Cache::Norm { stats, .. }) = (layer, cache) {
                b.update_running(stats);
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// All trainable parameters, flattened in layer order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for (w, b) in self.layers.iter().filter_map(|l| l.params()) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// SGD with classical momentum: `v = mu*v + g; p -= lr*v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Sgd {
    pub fn new(net: &Network, learning_rate: f64, momentum: f64) -> Self {
        let velocity = net
            .layers
            .iter()
            .map(|l| l.params().map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()])))
            .collect();
        Self {
            learning_rate,
            momentum,
            velocity,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((layer, g), v) in net.layers.iter_mut().zip(grads).zip(&mut self.velocity) {
            let (Some((w, b)), Some(g), Some((vw, vb))) = (layer.params_mut(), g, v.as_mut()) else {
                continue;
            };
            for ((p, v), g) in w.iter_mut().zip(vw.iter_mut()).zip(&g.weight) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
            for ((p, v), g) in b.iter_mut().zip(vb.iter_mut()).zip(&g.bias) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::layers::{BatchNorm, Conv2d, Dense};

    fn small() -> Network {
        let mut net = Network::new(vec![
            Layer::Conv2d(Conv2d::new(1, 2, 3, 1)),
            Layer::BatchNorm(BatchNorm::new(2)),
            Layer::Relu,
            Layer::Flatten,
            Layer::Dense(Dense::new(32, 1)),
        ]);
        net.init_he_uniform(9);
        net
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = small();
        assert_eq!(a, small());
        let Layer::Conv2d(c) = &a.layers[0] else { panic!() };
        let bound = (6.0f64 / 9.0).sqrt();
        assert!(c.weight.iter().all(|w| w.abs() < bound));
        assert!(c.bias.iter().all(|&b| b == 0.0));
        let mut b = a.clone();
        b.init_he_uniform(10);
        assert_ne!(a, b);
    }

    #[test]
    fn momentum_step_matches_hand_computation() {
        let mut net = Network::new(vec![Layer::Dense(Dense::new(1, 1))]);
        let mut opt = Sgd::new(&net, 0.1, 0.9);
        let g = vec![Some(ParamGrad {
            weight: vec![1.0],
            bias: vec![2.0],
        })];
        opt.step(&mut net, &g);
        opt.step(&mut net, &g);
        let Layer::Dense(d) = &net.layers[0] else { panic!() };
        // v1 = 1, v2 = 1.9 -> w = -0.1 - 0.19
        assert!((d.weight[0] + 0.29).abs() < 1e-12);
        assert!((d.bias[0] + 0.58).abs() < 1e-12);
    }

    #[test]
    fn tape_from_other_network_is_rejected() {
        let net = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, tape) = Network::new(vec![Layer::Relu])
            .forward_train(Tensor::zeros(vec![1, 1, 4, 4]), &mut rng)
            .unwrap();
        assert!(matches!(net.backward(&tape, y), Err(Error::MissingCache)));
    }

    #[test]
    fn infer_matches_train_without_batch_effects() {
        // a single-sample train pass and an inference pass differ only by BN
        let mut net = small();
        net.layers.remove(1);
        let x = Tensor::from_parts(vec![1, 1, 4, 4], (0..16).map(|i| i as f64 / 16.0).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = net.forward_train(x.clone(), &mut rng).unwrap();
        assert_eq!(a, net.infer(x).unwrap());
    }
}

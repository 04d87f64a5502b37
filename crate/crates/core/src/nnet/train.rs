use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Layer;
use super::models::{check_seg_dims, image_tensor, mask_tensor, vertical_factor, RcnnModel, SegModel};
use super::network::{Network, Sgd};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, GrayImage};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 30,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted (parameters then stay fixed).
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    fn check_samples(&self, n: usize) -> Result<()> {
        self.validate()?;
        if n < 2 * self.batch_size {
            return Err(Error::InvalidConfig(format!(
                "need at least {} samples for batch size {}, got {n}",
                2 * self.batch_size,
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Mean pixelwise cross-entropy of `(N, 2, H, W)` probabilities against
/// masks, and its gradient with respect to the probabilities.
pub fn cross_entropy(probs: &Tensor, masks: &[&BinaryMask]) -> Result<(f64, Tensor)> {
    let (n, c, h, w) = probs.dims4("cross-entropy input")?;
    if n != masks.len() || c != 2 || masks.iter().any(|m| m.dims() != (w, h)) {
        return Err(Error::Shape {
            context: "cross-entropy targets",
            expected: probs.shape().to_vec(),
            actual: vec![
                masks.len(),
                2,
                masks.first().map_or(0, |m| m.height()),
                masks.first().map_or(0, |m| m.width()),
            ],
        });
    }
    let hw = h * w;
    let total = (n * hw) as f64;
    let p = probs.data();
    let mut grad = vec![0.0; p.len()];
    let mut loss = 0.0;
    for (s, m) in masks.iter().enumerate() {
        for (i, &layer) in m.cells().iter().enumerate() {
            let idx = (s * 2 + usize::from(layer)) * hw + i;
            // NaN must survive the clamp so divergence is detected
            let q = if p[idx] < PROB_FLOOR { PROB_FLOOR } else { p[idx] };
            loss -= q.ln();
            grad[idx] = -1.0 / (q * total);
        }
    }
    Ok((loss / total, Tensor::from_parts(probs.shape().to_vec(), grad)))
}

/// Mean squared error of `(N, 1)` predictions and its gradient.
pub fn mse_loss(pred: &Tensor, targets: &[f64]) -> Result<(f64, Tensor)> {
    let (n, f) = pred.dims2("regression output")?;
    if f != 1 || n != targets.len() {
        return Err(Error::Shape {
            context: "regression targets",
            expected: vec![n, 1],
            actual: vec![targets.len(), 1],
        });
    }
    let mut loss = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            loss += (p - t).powi(2);
            2.0 * (p - t) / n as f64
        })
        .collect();
    Ok((loss / n as f64, Tensor::from_parts(vec![n, 1], grad)))
}

fn gather(all: &Tensor, idx: &[usize]) -> Tensor {
    let per: usize = all.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&all.data()[i * per..][..per]);
    }
    let mut shape = all.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_parts(shape, data)
}

/// Mini-batch SGD over `n` samples. Returns the per-epoch mean loss.
fn fit(
    net: &mut Network,
    inputs: &Tensor,
    cfg: &TrainConfig,
    mut loss: impl FnMut(&Tensor, &[usize]) -> Result<(f64, Tensor)>,
) -> Result<Vec<f64>> {
    let n = inputs.shape()[0];
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(1);
    let mut dropout = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout.set_stream(2);
    let mut opt = Sgd::new(net, cfg.learning_rate, cfg.momentum);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (y, tape) = net.forward_train(gather(inputs, batch), &mut dropout)?;
            let (l, g) = loss(&y, batch)?;
            if !l.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let (grads, _) = net.backward(&tape, g)?;
            opt.step(net, &grads);
            net.update_running_stats(&tape);
            total += l * batch.len() as f64;
        }
        curve.push(total / n as f64);
    }
    Ok(curve)
}

/// Trains a freshly initialised segmenter (weights drawn from `cfg.seed`).
pub fn train_segmenter(data: &[(GrayImage, BinaryMask)], cfg: &TrainConfig) -> Result<(SegModel, Vec<f64>)> {
    cfg.check_samples(data.len())?;
    let dims = data[0].0.dims();
    for (img, mask) in data {
        if img.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: img.dims(),
            });
        }
        if mask.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: mask.dims(),
            });
        }
    }
    check_seg_dims(dims.0, dims.1)?;
    let images: Vec<&GrayImage> = data.iter().map(|(i, _)| i).collect();
    let inputs = image_tensor(&images);
    let mut model = SegModel::new(cfg.seed);
    let curve = fit(&mut model.net, &inputs, cfg, |y, idx| {
        let masks: Vec<&BinaryMask> = idx.iter().map(|&i| &data[i].1).collect();
        cross_entropy(y, &masks)
    })?;
    Ok((model, curve))
}

/// Trains the regressor on `(mask, mean thickness in px)` pairs. Targets are
/// rescaled to the resampled grid and standardised for training; the final
/// dense layer then absorbs the inverse transform, so the returned model
/// predicts grid-scale pixels directly. With zero epochs the initial model
/// is returned untouched.
pub fn train_rcnn(data: &[(BinaryMask, f64)], cfg: &TrainConfig) -> Result<(RcnnModel, Vec<f64>)> {
    cfg.check_samples(data.len())?;
    if let Some((i, (_, t))) = data.iter().enumerate().find(|(_, (_, t))| !t.is_finite() || *t <= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "target {i} is not a positive thickness: {t}"
        )));
    }
    if data.iter().any(|(m, _)| m.is_empty()) {
        return Err(Error::EmptyPrediction);
    }
    let masks: Vec<&BinaryMask> = data.iter().map(|(m, _)| m).collect();
    let inputs = mask_tensor(&masks);
    let targets: Vec<f64> = data.iter().map(|(m, t)| t * vertical_factor(m.height())).collect();
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
    let z: Vec<f64> = targets.iter().map(|t| (t - mean) / std).collect();

    let mut model = RcnnModel::new(cfg.seed);
    if cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let curve = fit(&mut model.net, &inputs, cfg, |y, idx| {
        let t: Vec<f64> = idx.iter().map(|&i| z[i]).collect();
        mse_loss(y, &t)
    })?;
    let last = model
        .net
        .layers
        .iter_mut()
        .rev()
        .find_map(|l| match l {
            Layer::Dense(d) => Some(d),
            _ => None,
        })
        .expect("regressor ends in a dense layer");
    for w in &mut last.weight {
        *w *= std;
    }
    for b in &mut last.bias {
        *b = *b * std + mean;
    }
    // report the curve in squared grid pixels
    Ok((model, curve.into_iter().map(|l| l * std * std).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;

    fn flat_band_set(n: usize, w: usize, h: usize) -> Vec<(GrayImage, BinaryMask)> {
        (0..n)
            .map(|i| {
                let top = 4 + (i * 7) % (h - 14);
                let rows = 6 + i % 4;
                let mask = BinaryMask::from_fn(w, h, |_, y| y >= top && y < top + rows);
                let px = mask
                    .cells()
                    .iter()
                    .enumerate()
                    .map(|(k, &c)| {
                        if c {
                            0.85
                        } else if k / w < top {
                            0.3
                        } else {
                            0.2
                        }
                    })
                    .collect();
                (GrayImage::new(w, h, px).unwrap(), mask)
            })
            .collect()
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let p = Tensor::from_parts(vec![1, 2, 1, 2], vec![0.25, 0.5, 0.75, 0.5]);
        let m = BinaryMask::from_fn(2, 1, |x, _| x == 0);
        let (l, g) = cross_entropy(&p, &[&m]).unwrap();
        let expect = -(0.75f64.ln() + 0.5f64.ln()) / 2.0;
        assert!((l - expect).abs() < 1e-12);
        assert_eq!(g.data(), &[0.0, -1.0, -1.0 / 1.5, 0.0]);
    }

    #[test]
    fn mse_closed_form() {
        let p = Tensor::from_parts(vec![2, 1], vec![1.0, 3.0]);
        let (l, g) = mse_loss(&p, &[0.0, 0.0]).unwrap();
        assert_eq!(l, 5.0);
        assert_eq!(g.data(), &[1.0, 3.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let neg = TrainConfig {
            learning_rate: -1.0,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
        let few = flat_band_set(7, 16, 32);
        assert!(matches!(
            train_segmenter(&few, &TrainConfig::default()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn segmenter_rejects_bad_dims() {
        let mut data = flat_band_set(8, 16, 32);
        data[3] = flat_band_set(1, 32, 32).remove(0);
        assert!(matches!(
            train_segmenter(&data, &TrainConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
        let odd: Vec<_> = (0..8)
            .map(|_| (GrayImage::filled(20, 16, 0.1).unwrap(), BinaryMask::empty(20, 16)))
            .collect();
        assert!(matches!(
            train_segmenter(&odd, &TrainConfig::default()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = flat_band_set(8, 16, 16);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            seed: 5,
            ..Default::default()
        };
        let (m, curve) = train_segmenter(&data, &cfg).unwrap();
        assert_eq!(curve.len(), 2);
        assert_eq!(m.net.flat_params(), SegModel::new(5).net.flat_params());
    }

    #[test]
    fn divergence_reports_epoch() {
        let data = flat_band_set(8, 16, 16);
        let cfg = TrainConfig {
            learning_rate: 1e200,
            epochs: 5,
            ..Default::default()
        };
        assert!(matches!(train_segmenter(&data, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn zero_epoch_rcnn_is_initial_model() {
        let data: Vec<(BinaryMask, f64)> = (0..8)
            .map(|i| (BinaryMask::from_fn(32, 32, |_, y| (8..14 + i % 3).contains(&y)), 6.0))
            .collect();
        let cfg = TrainConfig {
            epochs: 0,
            seed: 3,
            ..Default::default()
        };
        let (m, curve) = train_rcnn(&data, &cfg).unwrap();
        assert!(curve.is_empty());
        assert_eq!(m, RcnnModel::new(3));
    }

    #[test]
    fn flat_band_segmenter_learns_and_is_deterministic() {
        let data = flat_band_set(50, 32, 32);
        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 0.01,
            seed: 11,
            ..Default::default()
        };
        let (m, curve) = train_segmenter(&data, &cfg).unwrap();
        for e in 0..curve.len() - 9 {
            assert!(
                curve[e + 9] <= curve[e],
                "loss rose over epochs {e}..{}: {curve:?}",
                e + 9
            );
        }
        let mean_dice = data
            .iter()
            .map(|(img, mask)| dice(&m.predict_mask(img).unwrap(), mask).unwrap())
            .sum::<f64>()
            / data.len() as f64;
        assert!(mean_dice >= 0.99, "training dice {mean_dice}");

        let short = TrainConfig { epochs: 2, ..cfg };
        let (a, _) = train_segmenter(&data[..12], &short).unwrap();
        let (b, _) = train_segmenter(&data[..12], &short).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_thickness_rcnn_converges() {
        let data: Vec<(BinaryMask, f64)> = (0..16)
            .map(|i| {
                let top = 6 + i;
                (BinaryMask::from_fn(64, 64, |_, y| y >= top && y < top + 8), 8.0)
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.001,
            seed: 1,
            ..Default::default()
        };
        let (m, _) = train_rcnn(&data, &cfg).unwrap();
        let err: f64 = data
            .iter()
            .map(|(mask, t)| (m.predict_px(mask).unwrap() - t).powi(2))
            .sum::<f64>()
            / 16.0;
        assert!(err < 0.05, "mse {err}");
    }
}

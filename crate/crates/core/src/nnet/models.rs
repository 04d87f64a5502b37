use super::layers::{BatchNorm, Conv2d, Dense, Layer};
use super::network::Network;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, GrayImage};

/// Classes predicted by the segmenter: background and layer.
pub const NUM_CLASSES: usize = 2;
/// Spatial extents of the segmenter input must be multiples of this.
pub const SEG_MULTIPLE: usize = 16;
/// Fixed `(height, width)` grid the regressor sees.
pub const RCNN_INPUT: (usize, usize) = (64, 256);
pub const RCNN_DROPOUT: f64 = 0.25;

pub const SEG_TAG: u8 = 1;
pub const RCNN_TAG: u8 = 2;

/// Encoder-decoder segmenter.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub net: Network,
}

/// Regressor mapping a mask to its mean thickness in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct RcnnModel {
    pub net: Network,
}

pub fn seg_architecture() -> Network {
    let mut layers = Vec::new();
    let enc = [1, 8, 16, 32, 64];
    for pair in enc.windows(2) {
        layers.push(Layer::Conv2d(Conv2d::new(pair[0], pair[1], 3, 1)));
        layers.push(Layer::Relu);
        layers.push(Layer::BatchNorm(BatchNorm::new(pair[1])));
        layers.push(Layer::MaxPool2);
    }
    let dec = [64, 32, 16, 8, 8];
    for pair in dec.windows(2) {
        layers.push(Layer::Upsample2);
        layers.push(Layer::Conv2d(Conv2d::new(pair[0], pair[1], 3, 1)));
        layers.push(Layer::Relu);
        layers.push(Layer::BatchNorm(BatchNorm::new(pair[1])));
    }
    layers.push(Layer::Conv2d(Conv2d::new(8, NUM_CLASSES, 1, 1)));
    layers.push(Layer::Softmax);
    Network::new(layers)
}

pub fn rcnn_architecture() -> Network {
    let mut layers = Vec::new();
    for (cin, c) in [(1, 8), (8, 16)] {
        layers.push(Layer::Conv2d(Conv2d::new(cin, c, 3, 1)));
        layers.push(Layer::Relu);
        for _ in 0..2 {
            layers.push(Layer::Conv2d(Conv2d::new(c, c, 3, 1)));
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dropout { p: RCNN_DROPOUT });
        layers.push(Layer::MaxPool2);
    }
    let flat = 16 * (RCNN_INPUT.0 / 4) * (RCNN_INPUT.1 / 4);
    layers.push(Layer::Flatten);
    layers.push(Layer::Dense(Dense::new(flat, 64)));
    layers.push(Layer::Relu);
    layers.push(Layer::Dense(Dense::new(64, 16)));
    layers.push(Layer::Relu);
    layers.push(Layer::Dense(Dense::new(16, 1)));
    layers.push(Layer::Linear);
    Network::new(layers)
}

impl SegModel {
    pub fn new(seed: u64) -> Self {
        let mut net = seg_architecture();
        net.init_he_uniform(seed);
        Self { net }
    }

    /// Per-pixel class probabilities, shape `(1, 2, H, W)`.
    pub fn probabilities(&self, image: &GrayImage) -> Result<Tensor> {
        check_seg_dims(image.width(), image.height())?;
        self.net.infer(image_tensor(&[image]))
    }

    /// Argmax over classes; a tie goes to background. Callers with other
    /// sizes should go through [`predict_mask_padded`].
    pub fn predict_mask(&self, image: &GrayImage) -> Result<BinaryMask> {
        let p = self.probabilities(image)?;
        Ok(argmax_mask(&p, image.width(), image.height()))
    }
}

pub(crate) fn argmax_mask(p: &Tensor, w: usize, h: usize) -> BinaryMask {
    let hw = w * h;
    let d = p.data();
    BinaryMask::new(w, h, (0..hw).map(|i| d[hw + i] > d[i]).collect()).expect("prediction matches image size")
}

pub(crate) fn check_seg_dims(w: usize, h: usize) -> Result<()> {
    if w == 0 || h == 0 || !w.is_multiple_of(SEG_MULTIPLE) || !h.is_multiple_of(SEG_MULTIPLE) {
        return Err(Error::Shape {
            context: "segmenter input (extents divisible by 16)",
            expected: vec![
                h.next_multiple_of(SEG_MULTIPLE).max(SEG_MULTIPLE),
                w.next_multiple_of(SEG_MULTIPLE).max(SEG_MULTIPLE),
            ],
            actual: vec![h, w],
        });
    }
    Ok(())
}

/// Stacks images into an `(N, 1, H, W)` tensor. All must share dimensions.
pub(crate) fn image_tensor(images: &[&GrayImage]) -> Tensor {
    let (w, h) = images[0].dims();
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        data.extend_from_slice(img.pixels());
    }
    Tensor::from_parts(vec![images.len(), 1, h, w], data)
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Pads to the next multiple of 16 by mirror reflection (edge pixel not
/// repeated), keeping the original at the top-left.
pub fn reflect_pad(image: &GrayImage) -> GrayImage {
    let (w, h) = image.dims();
    let (pw, ph) = (w.next_multiple_of(SEG_MULTIPLE), h.next_multiple_of(SEG_MULTIPLE));
    if (pw, ph) == (w, h) {
        return image.clone();
    }
    let mut px = Vec::with_capacity(pw * ph);
    for y in 0..ph {
        let sy = reflect(y as isize, h);
        for x in 0..pw {
            px.push(image.get(reflect(x as isize, w), sy));
        }
    }
    GrayImage::new(pw, ph, px).expect("padded pixels come from a valid image")
}

pub fn crop_mask(mask: &BinaryMask, w: usize, h: usize) -> BinaryMask {
    BinaryMask::from_fn(w, h, |x, y| mask.get(x, y))
}

/// Pads reflectively, predicts, and crops back to the input size.
pub fn predict_mask_padded(model: &SegModel, image: &GrayImage) -> Result<BinaryMask> {
    let (w, h) = image.dims();
    let padded = reflect_pad(image);
    let mask = model.predict_mask(&padded)?;
    Ok(crop_mask(&mask, w, h))
}

/// Nearest-neighbour resample of a mask onto `(out_h, out_w)`, sampling at
/// pixel centres.
pub fn resample_nearest(mask: &BinaryMask, out_w: usize, out_h: usize) -> BinaryMask {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(out_w, out_h, |x, y| {
        let sx = (((x as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
        let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        mask.get(sx, sy)
    })
}

/// Factor by which vertical distances grow when resampling to the
/// regressor grid.
pub fn vertical_factor(mask_height: usize) -> f64 {
    RCNN_INPUT.0 as f64 / mask_height as f64
}

pub(crate) fn mask_tensor(masks: &[&BinaryMask]) -> Tensor {
    let (h, w) = RCNN_INPUT;
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        let r = resample_nearest(m, w, h);
        data.extend(r.cells().iter().map(|&c| if c { 1.0 } else { 0.0 }));
    }
    Tensor::from_parts(vec![masks.len(), 1, h, w], data)
}

impl RcnnModel {
    pub fn new(seed: u64) -> Self {
        let mut net = rcnn_architecture();
        net.init_he_uniform(seed);
        Self { net }
    }

    /// Predicted mean thickness in pixels of the input mask.
    pub fn predict_px(&self, mask: &BinaryMask) -> Result<f64> {
        if mask.is_empty() {
            return Err(Error::EmptyPrediction);
        }
        let y = self.net.infer(mask_tensor(&[mask]))?;
        Ok(y.data()[0] / vertical_factor(mask.height()))
    }

    /// Thickness in physical units (`scale` units per pixel).
    pub fn predict_thickness(&self, mask: &BinaryMask, scale: f64) -> Result<f64> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidConfig(format!("scale must be positive, got {scale}")));
        }
        Ok(self.predict_px(mask)? * scale)
    }
}

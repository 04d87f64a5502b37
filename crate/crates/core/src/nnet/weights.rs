//! Binary weight files: `LMET`, a u32 version, an architecture tag byte, then
//! one record per layer (kind byte, u32 extents, f64 parameters, all
//! little-endian). Batch-norm records carry their running statistics after
//! gamma and beta.

use super::layers::Layer;
use super::models::{rcnn_architecture, seg_architecture, RcnnModel, SegModel, RCNN_TAG, SEG_TAG};
use super::network::Network;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LMET";
pub const FORMAT_VERSION: u32 = 1;

const K_CONV: u8 = 1;
const K_RELU: u8 = 2;
const K_BN: u8 = 3;
const K_POOL: u8 = 4;
const K_UP: u8 = 5;
const K_DROPOUT: u8 = 6;
const K_FLATTEN: u8 = 7;
const K_DENSE: u8 = 8;
const K_SOFTMAX: u8 = 9;
const K_LINEAR: u8 = 10;

fn kind(layer: &Layer) -> u8 {
    match layer {
        Layer::Conv2d(_) => K_CONV,
        Layer::Relu => K_RELU,
        Layer::BatchNorm(_) => K_BN,
        Layer::MaxPool2 => K_POOL,
        Layer::Upsample2 => K_UP,
        Layer::Dropout { .. } => K_DROPOUT,
        Layer::Flatten => K_FLATTEN,
        Layer::Dense(_) => K_DENSE,
        Layer::Softmax => K_SOFTMAX,
        Layer::Linear => K_LINEAR,
    }
}

fn extents(layer: &Layer) -> Vec<u32> {
    let e = match layer {
        Layer::Conv2d(c) => vec![c.out_channels, c.in_channels, c.kernel, c.stride],
        Layer::BatchNorm(b) => vec![b.channels],
        Layer::Dense(d) => vec![d.outputs, d.inputs],
        _ => Vec::new(),
    };
    e.into_iter().map(|v| v as u32).collect()
}

fn stored_values(layer: &Layer) -> Vec<&[f64]> {
    match layer {
        Layer::Conv2d(c) => vec![&c.weight, &c.bias],
        Layer::Dense(d) => vec![&d.weight, &d.bias],
        Layer::BatchNorm(b) => vec![&b.gamma, &b.beta, &b.running_mean, &b.running_var],
        _ => Vec::new(),
    }
}

fn stored_values_mut(layer: &mut Layer) -> Vec<&mut Vec<f64>> {
    match layer {
        Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
        Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
        Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta, &mut b.running_mean, &mut b.running_var],
        _ => Vec::new(),
    }
}

pub fn save_network(net: &Network, tag: u8) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(tag);
    for layer in &net.layers {
        out.push(kind(layer));
        for e in extents(layer) {
            out.extend_from_slice(&e.to_le_bytes());
        }
        for values in stored_values(layer) {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::ModelFormat {
                offset: self.bytes.len(),
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Reads a file into `template`, which fixes the expected architecture.
pub fn load_network(bytes: &[u8], tag: u8, mut template: Network) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::ModelFormat {
            offset: 0,
            reason: "bad magic, not a weight file".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::ModelFormat {
            offset: 4,
            reason: format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        });
    }
    let found = r.u8("architecture tag")?;
    if found != tag {
        return Err(Error::ArchitectureMismatch { expected: tag, found });
    }
    for (i, layer) in template.layers.iter_mut().enumerate() {
        let at = r.pos;
        let k = r.u8("layer kind")?;
        if k != kind(layer) {
            return Err(Error::ModelFormat {
                offset: at,
                reason: format!(
                    "layer {i}: kind {k}, architecture declares {} ({})",
                    kind(layer),
                    layer.name()
                ),
            });
        }
        let want = extents(layer);
        let at = r.pos;
        let mut got = Vec::with_capacity(want.len());
        for _ in 0..want.len() {
            got.push(r.u32("layer extents")?);
        }
        if got != want {
            return Err(Error::ModelFormat {
                offset: at,
                reason: format!(
                    "layer {i} ({}): extents {got:?}, architecture declares {want:?}",
                    layer.name()
                ),
            });
        }
        for values in stored_values_mut(layer) {
            for v in values.iter_mut() {
                let at = r.pos;
                *v = r.f64("parameters")?;
                if !v.is_finite() {
                    return Err(Error::ModelFormat {
                        offset: at,
                        reason: format!("layer {i}: non-finite parameter"),
                    });
                }
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::ModelFormat {
            offset: r.pos,
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(template)
}

impl SegModel {
    pub fn save(&self) -> Vec<u8> {
        save_network(&self.net, SEG_TAG)
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        load_network(bytes, SEG_TAG, seg_architecture()).map(|net| Self { net })
    }
}

impl RcnnModel {
    pub fn save(&self) -> Vec<u8> {
        save_network(&self.net, RCNN_TAG)
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        load_network(bytes, RCNN_TAG, rcnn_architecture()).map(|net| Self { net })
    }
}

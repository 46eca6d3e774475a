//! Residual-encoder U-Net.
//!
//! ```text
//! stem      conv3x3(1→w) · norm · relu
//! encoder   4 residual stages of widths w, 2w, 4w, 8w; each followed by maxpool2
//! bottleneck residual block at 8w, 1/16 resolution
//! decoder   4 stages: upsample2 · concat(skip) · conv3x3 · norm · relu,
//!           widths 4w, 2w, w, w
//! head      conv1x1(w→1) · clamp to [0, 1]
//! ```
//!
//! A residual block is `relu(norm(conv(relu(norm(conv(x))))) + shortcut(x))`
//! where the shortcut is the identity, or a 1x1 convolution when the width
//! changes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cast, Element, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::imgstore::{Domain, Image};

pub const DEFAULT_BASE_WIDTH: usize = 16;
pub const NORM_EPS: f64 = 1e-5;
/// Spatial extents must be multiples of this (four 2x poolings).
pub const SPATIAL_MULTIPLE: usize = 16;

/// Layer kinds of the network graph. Discriminants are the checkpoint ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum LayerKind {
    Conv2d = 0,
    Relu = 1,
    MaxPool2 = 2,
    Upsample2Bilinear = 3,
    AddSkip = 4,
    ConcatSkip = 5,
    InstanceNorm = 6,
}

impl LayerKind {
    pub fn from_id(id: u32) -> Option<Self> {
        use LayerKind::*;
        [
            Conv2d,
            Relu,
            MaxPool2,
            Upsample2Bilinear,
            AddSkip,
            ConcatSkip,
            InstanceNorm,
        ]
        .into_iter()
        .find(|k| *k as u32 == id)
    }
}

/// A parametric layer: conv extents `[cout, cin, k, k]` or norm `[channels]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub extents: Vec<usize>,
}

impl LayerSpec {
    /// Conv: weights plus one bias per output channel. Norm: scale and shift.
    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d => self.extents.iter().product::<usize>() + self.extents[0],
            LayerKind::InstanceNorm => 2 * self.extents[0],
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer<T> {
    Conv { weight: Tensor<T>, bias: Tensor<T> },
    Norm { gamma: Tensor<T>, beta: Tensor<T> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ResBlock {
    conv1: usize,
    norm1: usize,
    conv2: usize,
    norm2: usize,
    proj: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    base_width: usize,
    layers: Vec<Layer<T>>,
    stem: (usize, usize),
    encoder: [ResBlock; 4],
    bottleneck: ResBlock,
    decoder: [(usize, usize); 4],
    head: usize,
}

struct Builder<T> {
    layers: Vec<Layer<T>>,
    rng: ChaCha8Rng,
}

impl<T: Element> Builder<T> {
    fn conv(&mut self, cin: usize, cout: usize, k: usize) -> usize {
        let fan_in = (cin * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n = cout * cin * k * k;
        let w = (0..n)
            .map(|_| cast(self.rng.gen_range(-bound..bound)))
            .collect();
        self.layers.push(Layer::Conv {
            weight: Tensor::new(vec![cout, cin, k, k], w).expect("positive extents"),
            bias: Tensor::zeros(&[cout]),
        });
        self.layers.len() - 1
    }

    fn norm(&mut self, c: usize) -> usize {
        self.layers.push(Layer::Norm {
            gamma: Tensor::full(&[c], T::one()),
            beta: Tensor::zeros(&[c]),
        });
        self.layers.len() - 1
    }

    fn res_block(&mut self, cin: usize, cout: usize) -> ResBlock {
        ResBlock {
            conv1: self.conv(cin, cout, 3),
            norm1: self.norm(cout),
            conv2: self.conv(cout, cout, 3),
            norm2: self.norm(cout),
            proj: (cin != cout).then(|| self.conv(cin, cout, 1)),
        }
    }
}

impl<T: Element> UNet<T> {
    /// Fresh network: fan-in scaled uniform conv weights, zero biases, unit
    /// norm scales, all drawn from `seed`.
    pub fn new(base_width: usize, seed: u64) -> Result<Self> {
        if base_width == 0 {
            return Err(Error::Shape("base width must be positive".into()));
        }
        let w = base_width;
        let mut b = Builder {
            layers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let stem = (b.conv(1, w, 3), b.norm(w));
        let widths = [w, 2 * w, 4 * w, 8 * w];
        let mut cin = w;
        let encoder = widths.map(|c| {
            let block = b.res_block(cin, c);
            cin = c;
            block
        });
        let bottleneck = b.res_block(8 * w, 8 * w);
        let mut prev = 8 * w;
        let decoder = [3usize, 2, 1, 0].map(|s| {
            let out = widths[s.saturating_sub(1)];
            let stage = (b.conv(prev + widths[s], out, 3), b.norm(out));
            prev = out;
            stage
        });
        let head = b.conv(w, 1, 1);
        Ok(UNet {
            base_width,
            layers: b.layers,
            stem,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn base_width(&self) -> usize {
        self.base_width
    }

    pub fn layer_table(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv { weight, .. } => LayerSpec {
                    kind: LayerKind::Conv2d,
                    extents: weight.shape().to_vec(),
                },
                Layer::Norm { gamma, .. } => LayerSpec {
                    kind: LayerKind::InstanceNorm,
                    extents: gamma.shape().to_vec(),
                },
            })
            .collect()
    }

    /// Parameter tensors in canonical order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Conv { weight, bias } => [weight, bias],
                Layer::Norm { gamma, beta } => [gamma, beta],
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Conv { weight, bias } => [weight, bias],
                Layer::Norm { gamma, beta } => [gamma, beta],
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Zero the head so the output is the clamped (zero) bias everywhere.
    pub fn zero_head(&mut self) {
        if let Layer::Conv { weight, bias } = &mut self.layers[self.head] {
            weight.data_mut().fill(T::zero());
            bias.data_mut().fill(T::zero());
        }
    }

    pub fn cast<U: Element>(&self) -> UNet<U> {
        UNet {
            base_width: self.base_width,
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv { weight, bias } => Layer::Conv {
                        weight: weight.cast(),
                        bias: bias.cast(),
                    },
                    Layer::Norm { gamma, beta } => Layer::Norm {
                        gamma: gamma.cast(),
                        beta: beta.cast(),
                    },
                })
                .collect(),
            stem: self.stem,
            encoder: self.encoder,
            bottleneck: self.bottleneck,
            decoder: self.decoder,
            head: self.head,
        }
    }

    /// Record the forward pass on `g`. Returns the output node and the
    /// parameter leaves in [`UNet::params`] order.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, track: bool) -> Result<(Var, Vec<Var>)> {
        let (out, leaves) = self.forward_unclamped(g, x, track)?;
        Ok((g.clamp01(out), leaves))
    }

    /// Like [`UNet::forward`] but stops at the 1x1 head, before the clamp.
    pub fn forward_unclamped(
        &self,
        g: &mut Graph<T>,
        x: Var,
        track: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!(
                "network input must have 1 channel, got {c}"
            )));
        }
        if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::Shape(format!(
                "spatial extents {h}x{w} must be multiples of {SPATIAL_MULTIPLE}"
            )));
        }
        let leaves: Vec<[Var; 2]> = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv { weight, bias } => {
                    [g.leaf(weight.clone(), track), g.leaf(bias.clone(), track)]
                }
                Layer::Norm { gamma, beta } => {
                    [g.leaf(gamma.clone(), track), g.leaf(beta.clone(), track)]
                }
            })
            .collect();
        let conv = |g: &mut Graph<T>, i: usize, x: Var| -> Result<Var> {
            let [wv, bv] = leaves[i];
            let k = g.value(wv).shape()[2];
            g.conv2d(x, wv, Some(bv), 1, (k - 1) / 2)
        };
        let norm = |g: &mut Graph<T>, i: usize, x: Var| -> Result<Var> {
            let [gv, bv] = leaves[i];
            g.instance_norm(x, gv, bv, NORM_EPS)
        };
        let block = |g: &mut Graph<T>, blk: &ResBlock, x: Var| -> Result<Var> {
            let h = conv(g, blk.conv1, x)?;
            let h = norm(g, blk.norm1, h)?;
            let h = g.relu(h);
            let h = conv(g, blk.conv2, h)?;
            let h = norm(g, blk.norm2, h)?;
            let shortcut = match blk.proj {
                Some(p) => conv(g, p, x)?,
                None => x,
            };
            let s = g.add(h, shortcut)?;
            Ok(g.relu(s))
        };

        let h = conv(g, self.stem.0, x)?;
        let h = norm(g, self.stem.1, h)?;
        let mut h = g.relu(h);
        let mut skips = Vec::with_capacity(4);
        for blk in &self.encoder {
            let s = block(g, blk, h)?;
            skips.push(s);
            h = g.max_pool2(s)?;
        }
        h = block(g, &self.bottleneck, h)?;
        for (&(c, n), skip) in self.decoder.iter().zip(skips.into_iter().rev()) {
            let up = g.upsample2(h)?;
            let cat = g.concat(up, skip)?;
            let d = conv(g, c, cat)?;
            let d = norm(g, n, d)?;
            h = g.relu(d);
        }
        let out = conv(g, self.head, h)?;
        Ok((out, leaves.into_iter().flatten().collect()))
    }

    /// Untracked forward pass.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let (out, _) = self.forward(&mut g, xv, false)?;
        Ok(g.take_value(out))
    }

    /// Denoise one normalized image.
    pub fn denoise(&self, img: &Image) -> Result<Image> {
        let x = image_to_tensor::<T>(&[img])?;
        let y = self.infer(&x)?;
        tensor_to_image(&y, 0, img.pixel_scale())
    }
}

/// Stack same-sized images into a `[n, 1, h, w]` tensor.
pub fn image_to_tensor<T: Element>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("no images to stack".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if !img.same_dims(first) {
            return Err(Error::Shape("stacked images differ in size".into()));
        }
        data.extend(img.data().iter().map(|&v| cast::<T>(f64::from(v))));
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

/// Slice sample `index` of a `[n, 1, h, w]` tensor out as a normalized image.
pub fn tensor_to_image<T: Element>(
    t: &Tensor<T>,
    index: usize,
    pixel_scale: Option<f32>,
) -> Result<Image> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 || index >= n {
        return Err(Error::Shape(format!(
            "cannot take image {index} of {:?}",
            t.shape()
        )));
    }
    let data = t.data()[index * h * w..(index + 1) * h * w]
        .iter()
        .map(|v| v.to_f32().unwrap_or(f32::NAN))
        .collect();
    Image::new(w, h, Domain::Normalized, data, pixel_scale)
}

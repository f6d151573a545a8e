//! Residual encoder-decoder segmentation backbone.
//!
//! Level `l` of the encoder is a [`ResBlock`] with `root_features * 2^l`
//! channels, followed by 2x2 max-pooling except at the bottom. The decoder
//! mirrors it: 2x up-convolution, concatenation with the encoder output of
//! the same level, and another residual block. A 1x1 convolution and a
//! per-pixel softmax produce the class probabilities.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod optim;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ProbMap, RasterImage};
use layers::{max_pool2, max_pool2_backward, BlockTrace, Conv2d, Param, ResBlock, Tensor, UpConv};

pub use checkpoint::{copy_model, Lineage, ModelCheckpoint, TrainingMeta};
pub use loss::{CombinedLoss, LossParts};
pub use optim::Adam;

/// Anything that maps an image to a probability map.
pub trait Segmenter {
    fn predict(&self, image: &RasterImage) -> Result<ProbMap>;
}

impl<T: Segmenter + ?Sized> Segmenter for &T {
    fn predict(&self, image: &RasterImage) -> Result<ProbMap> {
        (**self).predict(image)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub depth: usize,
    pub root_features: usize,
    pub classes: usize,
    pub in_channels: usize,
    /// Default rate used when a trainer does not override it.
    pub dropout_rate: f64,
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            root_features: 16,
            classes: 2,
            in_channels: 3,
            dropout_rate: 0.25,
            input_size: 128,
        }
    }
}

impl BackboneConfig {
    /// Spatial sizes must survive `depth - 1` halvings.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 12 {
            return Err(Error::Config(format!("depth must be in 1..=12, got {}", self.depth)));
        }
        if self.root_features == 0 {
            return Err(Error::Config("root_features must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config("in_channels must be 1 or 3".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        if self.input_size == 0 || self.input_size % self.size_multiple() != 0 {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by 2^(depth-1) = {}",
                self.input_size,
                self.size_multiple()
            )));
        }
        Ok(())
    }

    pub fn features(&self, level: usize) -> usize {
        self.root_features << level
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    encoder: Vec<ResBlock>,
    /// `ups[l]` lifts level `l + 1` features to level `l`.
    ups: Vec<UpConv>,
    decoder: Vec<ResBlock>,
    head: Conv2d,
}

/// Intermediate values of one training forward pass.
pub struct Trace {
    encoder: Vec<BlockTrace>,
    pool_args: Vec<Vec<u32>>,
    up_inputs: Vec<Tensor>,
    decoder: Vec<BlockTrace>,
    head_input: Tensor,
    probs: Tensor,
}

impl Trace {
    pub fn probabilities(&self) -> ProbMap {
        tensor_to_probmap(&self.probs)
    }
}

fn softmax_channels(logits: &Tensor) -> Tensor {
    let plane = logits.plane();
    let mut out = logits.clone();
    for j in 0..plane {
        let max = (0..logits.c)
            .map(|c| logits.data[c * plane + j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in 0..logits.c {
            let e = (logits.data[c * plane + j] - max).exp();
            out.data[c * plane + j] = e;
            total += e;
        }
        for c in 0..logits.c {
            out.data[c * plane + j] /= total;
        }
    }
    out
}

/// Class-major tensor to class-minor map.
fn tensor_to_probmap(t: &Tensor) -> ProbMap {
    let plane = t.plane();
    let mut probs = vec![0.0; t.data.len()];
    for c in 0..t.c {
        for j in 0..plane {
            probs[j * t.c + c] = t.data[c * plane + j];
        }
    }
    ProbMap::new(t.w, t.h, t.c, probs).expect("softmax output has a valid shape")
}

fn image_to_tensor(image: &RasterImage) -> Tensor {
    Tensor {
        c: image.channels(),
        h: image.height(),
        w: image.width(),
        data: image.values().to_vec(),
    }
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let depth = config.depth;
        let encoder = (0..depth)
            .map(|l| {
                let cin = if l == 0 { config.in_channels } else { config.features(l - 1) };
                ResBlock::new(cin, config.features(l), rng)
            })
            .collect();
        let mut ups = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..depth - 1 {
            ups.push(UpConv::new(config.features(l + 1), config.features(l), rng));
            decoder.push(ResBlock::new(2 * config.features(l), config.features(l), rng));
        }
        let head = Conv2d::new(config.features(0), config.classes, 1, rng);
        Ok(Self {
            config,
            encoder,
            ups,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn check_input(&self, image: &RasterImage) -> Result<()> {
        let cfg = &self.config;
        if image.channels() != cfg.in_channels {
            return Err(Error::invalid(format!(
                "model expects {} input channels, image has {}",
                cfg.in_channels,
                image.channels()
            )));
        }
        let m = cfg.size_multiple();
        if image.width() % m != 0 || image.height() % m != 0 {
            return Err(Error::invalid(format!(
                "image size {}x{} is not divisible by {m}",
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }

    /// Forward pass keeping everything needed for [`Backbone::backward`].
    /// `dropout` carries the rate and the generator for the masks.
    pub fn forward_trace<R: Rng + ?Sized>(
        &self,
        image: &RasterImage,
        mut dropout: Option<(f64, &mut R)>,
    ) -> Result<Trace> {
        self.check_input(image)?;
        let depth = self.config.depth;
        let mut encoder = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        let mut pool_args = Vec::new();
        let mut x = image_to_tensor(image);
        for (l, block) in self.encoder.iter().enumerate() {
            let drop = dropout.as_mut().map(|(rate, rng)| (*rate, &mut **rng));
            let (out, trace) = block.forward(x, drop);
            encoder.push(trace);
            if l + 1 < depth {
                let (pooled, arg) = max_pool2(&out);
                pool_args.push(arg);
                x = pooled;
            } else {
                x = Tensor::zeros(0, 0, 0);
            }
            skips.push(out);
        }

        let mut current = skips.pop().expect("depth >= 1");
        let mut up_inputs = vec![Tensor::zeros(0, 0, 0); depth - 1];
        let mut decoder: Vec<Option<BlockTrace>> = (0..depth - 1).map(|_| None).collect();
        for l in (0..depth - 1).rev() {
            let up = self.ups[l].forward(&current);
            let skip = skips.pop().expect("one skip per level");
            let cat = skip.concat(&up);
            up_inputs[l] = current;
            let drop = dropout.as_mut().map(|(rate, rng)| (*rate, &mut **rng));
            let (out, trace) = self.decoder[l].forward(cat, drop);
            decoder[l] = Some(trace);
            current = out;
        }
        let logits = self.head.forward(&current);
        Ok(Trace {
            encoder,
            pool_args,
            up_inputs,
            decoder: decoder.into_iter().map(|t| t.expect("filled")).collect(),
            head_input: current,
            probs: softmax_channels(&logits),
        })
    }

    /// Accumulates parameter gradients given `d loss / d probabilities`
    /// in `ProbMap` layout.
    pub fn backward(&mut self, trace: &Trace, dprobs: &[f64]) {
        let p = &trace.probs;
        let plane = p.plane();
        let classes = p.c;
        debug_assert_eq!(dprobs.len(), p.data.len());
        let mut dlogits = Tensor::zeros(classes, p.h, p.w);
        for j in 0..plane {
            let g = &dprobs[j * classes..(j + 1) * classes];
            let dot: f64 = (0..classes).map(|c| p.data[c * plane + j] * g[c]).sum();
            for c in 0..classes {
                let pc = p.data[c * plane + j];
                dlogits.data[c * plane + j] = pc * (g[c] - dot);
            }
        }

        let depth = self.config.depth;
        let mut d = self.head.backward(&trace.head_input, &dlogits);
        let mut dskips: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
        for l in 0..depth - 1 {
            let dcat = self.decoder[l].backward(&trace.decoder[l], d);
            let (dskip, dup) = dcat.split_channels(self.config.features(l));
            dskips[l] = Some(dskip);
            d = self.ups[l].backward(&trace.up_inputs[l], &dup);
        }
        // `d` is now the gradient at the bottom encoder output.
        let mut dout = d;
        for l in (0..depth).rev() {
            if let Some(s) = dskips[l].take() {
                dout.add_assign(&s);
            }
            let dx = self.encoder[l].backward(&trace.encoder[l], dout);
            if l == 0 {
                break;
            }
            dout = max_pool2_backward(&dx, &trace.pool_args[l - 1], dx.h * 2, dx.w * 2);
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.encoder.iter().flat_map(|b| b.params()).collect();
        for (up, block) in self.ups.iter().zip(&self.decoder) {
            v.extend(up.params());
            v.extend(block.params());
        }
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.encoder.iter_mut().flat_map(|b| b.params_mut()).collect();
        for (up, block) in self.ups.iter_mut().zip(self.decoder.iter_mut()) {
            v.extend(up.params_mut());
            v.extend(block.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// All parameter values in serialization order.
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn load_flat_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Integrity(format!(
                "checkpoint holds {} parameters, architecture needs {}",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.value.len();
            p.value.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

impl Segmenter for Backbone {
    fn predict(&self, image: &RasterImage) -> Result<ProbMap> {
        let trace = self.forward_trace::<rand_chacha::ChaCha8Rng>(image, None)?;
        Ok(trace.probabilities())
    }
}

//! The noise-removal network: a skip-connected encoder–decoder.
//!
//! Each encoder level runs two `k x k` convolutions with leaky-ReLU and
//! halves the resolution with 2x2 average pooling. A bottleneck stage
//! follows. Each decoder level upsamples by nearest neighbor, concatenates
//! the encoder features of the same resolution, and runs two more
//! convolutions. A 1x1 convolution with a sigmoid maps back to the input
//! channel count, so outputs lie in `(0, 1)`.
//!
//! Channel width doubles per level: level `i` has `base_channels * 2^i`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, BlockCache, ConvCache, ConvShape};
use crate::params::{self, LayerSpec, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructorConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    pub seed: u64,
}

impl Default for ReconstructorConfig {
    fn default() -> Self {
        ReconstructorConfig {
            levels: 3,
            base_channels: 16,
            in_channels: 1,
            kernel_size: 3,
            seed: 0,
        }
    }
}

impl ReconstructorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::arg("levels must be >= 1"));
        }
        if self.base_channels < 2 {
            return Err(Error::arg("base_channels must be >= 2"));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::arg("in_channels must be 1 or 3"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::arg("kernel_size must be odd"));
        }
        if self.levels > 16 {
            return Err(Error::arg("levels must be <= 16"));
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn conv(&self, in_ch: usize, out_ch: usize) -> ConvShape {
        ConvShape {
            kernel: self.kernel_size,
            in_ch,
            out_ch,
        }
    }

    /// Convolution shapes in parameter order.
    pub(crate) fn conv_shapes(&self) -> Vec<(alloc::string::String, ConvShape)> {
        let l = self.levels;
        let mut out = Vec::with_capacity(4 * l + 3);
        let mut prev = self.in_channels;
        for i in 0..l {
            out.push((format!("enc{i}.conv0"), self.conv(prev, self.width(i))));
            out.push((format!("enc{i}.conv1"), self.conv(self.width(i), self.width(i))));
            prev = self.width(i);
        }
        out.push(("bottleneck.conv0".into(), self.conv(prev, self.width(l))));
        out.push(("bottleneck.conv1".into(), self.conv(self.width(l), self.width(l))));
        for i in (0..l).rev() {
            let merged = self.width(i + 1) + self.width(i);
            out.push((format!("dec{i}.conv0"), self.conv(merged, self.width(i))));
            out.push((format!("dec{i}.conv1"), self.conv(self.width(i), self.width(i))));
        }
        out.push((
            "head".into(),
            ConvShape {
                kernel: 1,
                in_ch: self.width(0),
                out_ch: self.in_channels,
            },
        ));
        out
    }

    pub(crate) fn layout(&self) -> Vec<LayerSpec> {
        self.conv_shapes()
            .into_iter()
            .map(|(n, s)| LayerSpec::conv(n, s))
            .collect()
    }
}

/// Anything that maps an image to its reconstruction.
pub trait Reconstruct {
    fn reconstruct(&self, x: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructor {
    config: ReconstructorConfig,
    params: ParamSet,
    shapes: Vec<ConvShape>,
}

pub struct ForwardCache {
    enc: Vec<BlockCache>,
    bottleneck: BlockCache,
    dec: Vec<BlockCache>,
    head: ConvCache,
    output: Tensor,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

impl Reconstructor {
    /// Fresh model with fan-in scaled uniform weights and zero biases.
    pub fn init(config: ReconstructorConfig) -> Result<Self> {
        config.validate()?;
        let params = params::init_for(&config.layout(), config.seed);
        Reconstructor::from_params(config, params)
    }

    pub fn from_params(config: ReconstructorConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        params::check_layout(&params, &config.layout())?;
        let shapes = config.conv_shapes().into_iter().map(|(_, s)| s).collect();
        Ok(Reconstructor {
            config,
            params,
            shapes,
        })
    }

    /// All-zero parameters; the output is then `sigmoid(0) = 0.5` everywhere.
    pub fn zeroed(config: ReconstructorConfig) -> Result<Self> {
        config.validate()?;
        Reconstructor::from_params(config, params::zeros_for(&config.layout()))
    }

    pub fn config(&self) -> &ReconstructorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let m = self.config.size_multiple();
        let (h, w, c) = x.shape();
        if c != self.config.in_channels {
            return Err(Error::shape(
                format!("{} channels", self.config.in_channels),
                format!("{c} channels"),
            ));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::shape(
                format!("height and width divisible by {m}"),
                format!("{h}x{w}"),
            ));
        }
        Ok(())
    }

    fn conv_idx_dec(&self, level: usize) -> usize {
        let l = self.config.levels;
        2 * l + 2 + 2 * (l - 1 - level)
    }

    fn head_idx(&self) -> usize {
        4 * self.config.levels + 2
    }

    fn stage_forward(&self, first: usize, x: &Tensor) -> (Tensor, BlockCache) {
        layers::block_forward(&self.params, &self.shapes, first, x)
    }

    fn stage_backward(
        &self,
        first: usize,
        stage: &BlockCache,
        grad: Tensor,
        grads: &mut ParamSet,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        layers::block_backward(&self.params, &self.shapes, first, stage, grad, grads, need_input_grad)
    }

    /// Forward pass that keeps everything needed for [`Self::backward`].
    pub fn forward_cached(&self, x: &Tensor) -> Result<ForwardCache> {
        self.check_input(x)?;
        let l = self.config.levels;
        let mut enc = Vec::with_capacity(l);
        let mut skips = Vec::with_capacity(l);
        let mut h = x.clone();
        for i in 0..l {
            let (out, stage) = self.stage_forward(2 * i, &h);
            enc.push(stage);
            h = layers::avg_pool2(&out);
            skips.push(out);
        }
        let (mut h, bottleneck) = self.stage_forward(2 * l, &h);
        let mut dec = Vec::with_capacity(l);
        for i in (0..l).rev() {
            let merged = layers::concat(&layers::upsample2(&h), &skips[i]);
            let (out, stage) = self.stage_forward(self.conv_idx_dec(i), &merged);
            dec.push(stage);
            h = out;
        }
        let head_idx = self.head_idx();
        let (w, b) = self.params.conv(head_idx);
        let (pre, head) = layers::conv_forward(&h, self.shapes[head_idx], w, b);
        Ok(ForwardCache {
            enc,
            bottleneck,
            dec,
            head,
            output: layers::sigmoid_forward(&pre),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.output)
    }

    /// Backpropagate `grad_output` (d loss / d output), accumulating into
    /// `grads`. Returns d loss / d input when requested.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: &Tensor,
        grads: &mut ParamSet,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let l = self.config.levels;
        let mut g = grad_output.clone();
        layers::sigmoid_backward(&cache.output, &mut g);
        let head_idx = self.head_idx();
        let (w, _) = self.params.conv(head_idx);
        let (gw, gb) = grads.conv_mut(head_idx);
        let mut g = layers::conv_backward(&cache.head, &g, self.shapes[head_idx], w, gw, gb, true)
            .expect("input grad requested");

        let mut skip_grads: Vec<Option<Tensor>> = (0..l).map(|_| None).collect();
        // decoder caches are in execution order, deepest level first
        for i in 0..l {
            let gm = self
                .stage_backward(self.conv_idx_dec(i), &cache.dec[l - 1 - i], g, grads, true)
                .expect("input grad requested");
            let up_ch = self.config.width(i + 1);
            let (g_up, g_skip) = layers::split_channels(&gm, up_ch);
            skip_grads[i] = Some(g_skip);
            g = layers::upsample2_backward(&g_up);
        }
        g = self
            .stage_backward(2 * l, &cache.bottleneck, g, grads, true)
            .expect("input grad requested");
        for i in (0..l).rev() {
            let mut gs = layers::avg_pool2_backward(&g);
            if let Some(skip) = &skip_grads[i] {
                layers::add_assign(&mut gs, skip);
            }
            let want = need_input_grad || i > 0;
            {
                let next = self.stage_backward(2 * i, &cache.enc[i], gs, grads, want)?;
                g = next
            }
        }
        Some(g)
    }
}

impl Reconstruct for Reconstructor {
    fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

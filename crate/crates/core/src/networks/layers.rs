use rand::Rng;
use rand_distr::{Distribution, Normal};
use secotrans_tensor::{conv::out_len, Conv2dOpts, Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Architecture hyper-parameters.
///
/// The defaults are the full-size network: a 64/128/256-channel encoder with
/// two residual blocks, a 128/64/3-channel decoder, and 64/128/256/1-channel
/// patch discriminators. Narrower variants keep the same layer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Width of the first encoder convolution; the bottleneck is 4x this.
    pub base_channels: usize,
    pub res_blocks: usize,
    /// Width of the first discriminator convolution.
    pub disc_channels: usize,
    /// Number of stride-2 discriminator convolutions.
    pub disc_downsamplings: usize,
    pub adain_eps: f64,
    pub norm_eps: f64,
    pub init_std: f64,
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 64,
            res_blocks: 2,
            disc_channels: 64,
            disc_downsamplings: 3,
            adain_eps: 1e-5,
            norm_eps: 1e-5,
            init_std: 0.02,
            leaky_slope: 0.2,
        }
    }
}

impl NetworkConfig {
    pub fn bottleneck_channels(&self) -> usize {
        4 * self.base_channels
    }

    /// Smallest patch side for which every discriminator layer produces output.
    pub fn min_patch_side(&self) -> usize {
        let mut side = 1;
        while self.disc_output_len(side).is_none() {
            side += 1;
        }
        side
    }

    /// Output side of the discriminator for an input side, if admissible.
    pub fn disc_output_len(&self, side: usize) -> Option<usize> {
        let mut len = side;
        for _ in 0..self.disc_downsamplings {
            len = out_len(len, 4, 2, 1).filter(|&l| l > 0)?;
        }
        out_len(len, 4, 1, 1).filter(|&l| l > 0)
    }

    pub(crate) fn validate(&self) -> Result<(), (String, String)> {
        let err = |k: &str, r: &str| Err((format!("network.{k}"), r.to_string()));
        if self.base_channels == 0 {
            return err("base_channels", "must be at least 1");
        }
        if self.disc_channels == 0 {
            return err("disc_channels", "must be at least 1");
        }
        if !(self.adain_eps > 0.0) {
            return err("adain_eps", "must be positive");
        }
        if !(self.norm_eps > 0.0) {
            return err("norm_eps", "must be positive");
        }
        if !(self.init_std > 0.0) {
            return err("init_std", "must be positive");
        }
        Ok(())
    }
}

/// Named, ordered tensors of one sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Float> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Float> ParamSet<T> {
    fn push(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }
}

pub(crate) struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
    pub std: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvLayer {
    weight: usize,
    bias: usize,
    opts: Conv2dOpts,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Float, R: Rng>(
        set: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: &mut Init<'_, R>,
    ) -> Self {
        let normal = Normal::new(0.0, init.std).expect("positive std");
        let shape = [c_out, c_in, kernel, kernel];
        let w = Tensor::from_fn(&shape, |_| T::from_f64_lossy(normal.sample(init.rng)));
        let weight = set.push(format!("{name}.weight"), w);
        let bias = set.push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        ConvLayer { weight, bias, opts: Conv2dOpts { stride, pad } }
    }

    pub(crate) fn forward<T: Float>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.conv2d(x, p[self.weight], Some(p[self.bias]), self.opts)
    }
}

/// Per-channel scale and shift after a layer norm.
#[derive(Clone, Debug)]
pub(crate) struct Affine {
    gamma: usize,
    beta: usize,
}

impl Affine {
    fn new<T: Float>(set: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let gamma = set.push(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = set.push(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Affine { gamma, beta }
    }
}

/// Conv+IN+ReLU stem, stride-2 downsamplings, residual blocks.
#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    stem: Vec<ConvLayer>,
    res: Vec<(ConvLayer, ConvLayer)>,
    eps: f64,
}

impl Encoder {
    pub(crate) fn new<T: Float, R: Rng>(
        cfg: &NetworkConfig,
        set: &mut ParamSet<T>,
        init: &mut Init<'_, R>,
    ) -> Self {
        let b = cfg.base_channels;
        let stem = vec![
            ConvLayer::new(set, "encoder.conv1", 3, b, 7, 1, 3, init),
            ConvLayer::new(set, "encoder.conv2", b, 2 * b, 4, 2, 1, init),
            ConvLayer::new(set, "encoder.conv3", 2 * b, 4 * b, 4, 2, 1, init),
        ];
        let c = 4 * b;
        let res = (0..cfg.res_blocks)
            .map(|i| {
                (
                    ConvLayer::new(set, &format!("encoder.res{i}.conv1"), c, c, 3, 1, 1, init),
                    ConvLayer::new(set, &format!("encoder.res{i}.conv2"), c, c, 3, 1, 1, init),
                )
            })
            .collect();
        Encoder { stem, res, eps: cfg.norm_eps }
    }

    pub(crate) fn forward<T: Float>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let eps = T::from_f64_lossy(self.eps);
        let mut h = x;
        for conv in &self.stem {
            h = conv.forward(g, p, h);
            h = g.instance_norm(h, eps);
            h = g.relu(h);
        }
        for (c1, c2) in &self.res {
            let mut r = c1.forward(g, p, h);
            r = g.instance_norm(r, eps);
            r = g.relu(r);
            r = c2.forward(g, p, r);
            r = g.instance_norm(r, eps);
            h = g.add(h, r);
        }
        h
    }
}

/// AdaIN at the bottleneck, then two upsample+conv+LN+ReLU stages and a Tanh output conv.
#[derive(Clone, Debug)]
pub(crate) struct Decoder {
    stages: Vec<(ConvLayer, Affine)>,
    out: ConvLayer,
    adain_eps: f64,
    norm_eps: f64,
}

impl Decoder {
    pub(crate) fn new<T: Float, R: Rng>(
        cfg: &NetworkConfig,
        set: &mut ParamSet<T>,
        init: &mut Init<'_, R>,
    ) -> Self {
        let b = cfg.base_channels;
        let stages = vec![
            (
                ConvLayer::new(set, "decoder.conv1", 4 * b, 2 * b, 5, 1, 2, init),
                Affine::new(set, "decoder.ln1", 2 * b),
            ),
            (
                ConvLayer::new(set, "decoder.conv2", 2 * b, b, 5, 1, 2, init),
                Affine::new(set, "decoder.ln2", b),
            ),
        ];
        let out = ConvLayer::new(set, "decoder.conv3", b, 3, 5, 1, 2, init);
        Decoder { stages, out, adain_eps: cfg.adain_eps, norm_eps: cfg.norm_eps }
    }

    /// `style` holds the graph handles of the target domain's `(gamma, beta)`.
    pub(crate) fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        content: Var,
        style: (Var, Var),
    ) -> Var {
        let mut h = adain_var(g, content, style, T::from_f64_lossy(self.adain_eps));
        let eps = T::from_f64_lossy(self.norm_eps);
        for (conv, affine) in &self.stages {
            h = g.upsample2x(h);
            h = conv.forward(g, p, h);
            h = g.layer_norm(h, eps);
            h = g.channel_affine(h, p[affine.gamma], p[affine.beta]);
            h = g.relu(h);
        }
        h = self.out.forward(g, p, h);
        g.tanh(h)
    }
}

/// `gamma · (z - mean) / sqrt(var + eps) + beta` with per-sample, per-channel statistics.
pub(crate) fn adain_var<T: Float>(g: &mut Graph<T>, z: Var, style: (Var, Var), eps: T) -> Var {
    let normalized = g.instance_norm(z, eps);
    g.channel_affine(normalized, style.0, style.1)
}

/// Fully convolutional patch discriminator producing a map of logits.
#[derive(Clone, Debug)]
pub(crate) struct Discriminator {
    convs: Vec<ConvLayer>,
    slope: f64,
    eps: f64,
}

impl Discriminator {
    pub(crate) fn new<T: Float, R: Rng>(
        cfg: &NetworkConfig,
        prefix: &str,
        set: &mut ParamSet<T>,
        init: &mut Init<'_, R>,
    ) -> Self {
        let mut convs = Vec::new();
        let mut c_in = 3;
        let mut c_out = cfg.disc_channels;
        for i in 0..cfg.disc_downsamplings {
            convs.push(ConvLayer::new(set, &format!("{prefix}.conv{}", i + 1), c_in, c_out, 4, 2, 1, init));
            c_in = c_out;
            c_out *= 2;
        }
        let last = cfg.disc_downsamplings + 1;
        convs.push(ConvLayer::new(set, &format!("{prefix}.conv{last}"), c_in, 1, 4, 1, 1, init));
        Discriminator { convs, slope: cfg.leaky_slope, eps: cfg.norm_eps }
    }

    pub(crate) fn forward<T: Float>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let slope = T::from_f64_lossy(self.slope);
        let eps = T::from_f64_lossy(self.eps);
        let (last, hidden) = self.convs.split_last().expect("at least one layer");
        let mut h = x;
        for (i, conv) in hidden.iter().enumerate() {
            h = conv.forward(g, p, h);
            if i > 0 {
                h = g.instance_norm(h, eps);
            }
            h = g.leaky_relu(h, slope);
        }
        last.forward(g, p, h)
    }
}

//! Shared content encoder, AdaIN-conditioned decoder, fixed per-domain style
//! codes, and one patch discriminator per domain.

mod layers;
mod types;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use secotrans_tensor::{Float, Graph, Tensor, Var};

pub use layers::{NetworkConfig, ParamSet};
pub use types::{
    init_style_code, init_style_code_with_len, ContentCode, DomainId, ImageBatch, ScoreMap, StyleCode,
    STYLE_DIM,
};

use crate::error::{contract, Result};
use layers::{adain_var, Decoder, Discriminator, Encoder, Init};

/// Adaptive instance normalization of a content code with a style code.
pub fn adain<T: Float>(z: &ContentCode<T>, style: &StyleCode<T>, epsilon: T) -> Result<ContentCode<T>> {
    if z.channels() != style.len() || style.beta.len() != style.len() {
        return Err(contract(format!(
            "content code has {} channels but the style code has {}",
            z.channels(),
            style.len()
        )));
    }
    if !(epsilon >= T::zero()) {
        return Err(contract("adain epsilon must be non-negative"));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.tensor().clone());
    let gamma = g.constant(style.gamma_tensor());
    let beta = g.constant(style.beta_tensor());
    let out = adain_var(&mut g, zv, (gamma, beta), epsilon);
    ContentCode::new(g.value(out).clone())
}

/// Trainable tensors grouped by sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T: Float> {
    pub encoder: ParamSet<T>,
    pub decoder: ParamSet<T>,
    pub disc_a: ParamSet<T>,
    pub disc_b: ParamSet<T>,
}

impl<T: Float> NetworkParams<T> {
    /// `(group name, set)` pairs in a fixed order.
    pub fn groups(&self) -> [(&'static str, &ParamSet<T>); 4] {
        [
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("disc_a", &self.disc_a),
            ("disc_b", &self.disc_b),
        ]
    }

    pub fn disc(&self, domain: DomainId) -> &ParamSet<T> {
        match domain {
            DomainId::A => &self.disc_a,
            DomainId::B => &self.disc_b,
        }
    }
}

#[derive(Clone, Debug)]
struct Architecture {
    encoder: Encoder,
    decoder: Decoder,
    disc_a: Discriminator,
    disc_b: Discriminator,
}

/// Graph handles for one recording of the model.
pub struct Bound {
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
    pub disc_a: Vec<Var>,
    pub disc_b: Vec<Var>,
    pub style_a: (Var, Var),
    pub style_b: (Var, Var),
}

impl Bound {
    pub fn style(&self, domain: DomainId) -> (Var, Var) {
        match domain {
            DomainId::A => self.style_a,
            DomainId::B => self.style_b,
        }
    }

    pub fn disc(&self, domain: DomainId) -> &[Var] {
        match domain {
            DomainId::A => &self.disc_a,
            DomainId::B => &self.disc_b,
        }
    }
}

/// Which parameter groups a recording differentiates.
#[derive(Clone, Copy, Debug, Default)]
pub struct Trainable {
    pub generator: bool,
    pub discriminators: bool,
}

/// Complete two-domain translation model.
#[derive(Clone, Debug)]
pub struct Model<T: Float> {
    config: NetworkConfig,
    arch: Architecture,
    pub params: NetworkParams<T>,
    style_a: StyleCode<T>,
    style_b: StyleCode<T>,
}

impl<T: Float> Model<T> {
    /// Fresh model: N(0, std²) convolution weights, zero biases, unit/zero
    /// layer-norm affines, and style codes seeded from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate().map_err(|(key, reason)| crate::Error::Config { key, reason })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // streams 0 and 1 of the same seed hold the style codes
        rng.set_stream(2);
        let mut init = Init { rng: &mut rng, std: config.init_std };
        let mut encoder = ParamSet::default();
        let mut decoder = ParamSet::default();
        let mut disc_a = ParamSet::default();
        let mut disc_b = ParamSet::default();
        let arch = Architecture {
            encoder: Encoder::new(&config, &mut encoder, &mut init),
            decoder: Decoder::new(&config, &mut decoder, &mut init),
            disc_a: Discriminator::new(&config, "disc_a", &mut disc_a, &mut init),
            disc_b: Discriminator::new(&config, "disc_b", &mut disc_b, &mut init),
        };
        let c = config.bottleneck_channels();
        let style_a = init_style_code_with_len(DomainId::A, seed, c);
        let style_b = init_style_code_with_len(DomainId::B, seed, c);
        Ok(Model {
            config,
            arch,
            params: NetworkParams { encoder, decoder, disc_a, disc_b },
            style_a,
            style_b,
        })
    }

    /// Rebuilds a model from stored parameters and style codes.
    pub fn from_parts(
        config: NetworkConfig,
        params: NetworkParams<T>,
        style_a: StyleCode<T>,
        style_b: StyleCode<T>,
    ) -> Result<Self> {
        let mut template = Model::<T>::new(config, 0)?;
        for ((name, want), (_, have)) in template.params.groups().into_iter().zip(params.groups()) {
            let same = want.names() == have.names()
                && want.tensors().iter().zip(have.tensors()).all(|(a, b)| a.shape() == b.shape());
            if !same {
                return Err(contract(format!("{name} parameters do not match the architecture")));
            }
        }
        let c = template.config.bottleneck_channels();
        for s in [&style_a, &style_b] {
            if s.gamma.len() != c || s.beta.len() != c {
                return Err(contract(format!("style code length {} != bottleneck {c}", s.len())));
            }
        }
        if style_a.domain != DomainId::A || style_b.domain != DomainId::B {
            return Err(contract("style codes are assigned to the wrong domains"));
        }
        template.params = params;
        template.style_a = style_a;
        template.style_b = style_b;
        Ok(template)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn style(&self, domain: DomainId) -> &StyleCode<T> {
        match domain {
            DomainId::A => &self.style_a,
            DomainId::B => &self.style_b,
        }
    }

    /// Same weights with the domain roles exchanged (style codes and discriminators swapped).
    pub fn domain_swapped(&self) -> Model<T> {
        let mut m = self.clone();
        std::mem::swap(&mut m.params.disc_a, &mut m.params.disc_b);
        let mut a = self.style_b.clone();
        let mut b = self.style_a.clone();
        a.domain = DomainId::A;
        b.domain = DomainId::B;
        m.style_a = a;
        m.style_b = b;
        m
    }

    /// Records parameters and style codes on `g`. Style codes are always constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: Trainable) -> Bound {
        Bound {
            encoder: self.params.encoder.bind(g, trainable.generator),
            decoder: self.params.decoder.bind(g, trainable.generator),
            disc_a: self.params.disc_a.bind(g, trainable.discriminators),
            disc_b: self.params.disc_b.bind(g, trainable.discriminators),
            style_a: (g.constant(self.style_a.gamma_tensor()), g.constant(self.style_a.beta_tensor())),
            style_b: (g.constant(self.style_b.gamma_tensor()), g.constant(self.style_b.beta_tensor())),
        }
    }

    /// Re-records both discriminators as constants from the current parameters.
    pub fn rebind_discriminators(&self, g: &mut Graph<T>, b: &mut Bound) {
        b.disc_a = self.params.disc_a.bind(g, false);
        b.disc_b = self.params.disc_b.bind(g, false);
    }

    pub fn encode_var(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Var {
        self.arch.encoder.forward(g, &b.encoder, x)
    }

    pub fn decode_var(&self, g: &mut Graph<T>, b: &Bound, c: Var, style: (Var, Var)) -> Var {
        self.arch.decoder.forward(g, &b.decoder, c, style)
    }

    pub fn translate_var(&self, g: &mut Graph<T>, b: &Bound, x: Var, target: DomainId) -> Var {
        let c = self.encode_var(g, b, x);
        self.decode_var(g, b, c, b.style(target))
    }

    pub fn discriminate_var(&self, g: &mut Graph<T>, b: &Bound, x: Var, domain: DomainId) -> Var {
        match domain {
            DomainId::A => self.arch.disc_a.forward(g, &b.disc_a, x),
            DomainId::B => self.arch.disc_b.forward(g, &b.disc_b, x),
        }
    }

    fn check_style(&self, style: &StyleCode<T>) -> Result<()> {
        let c = self.config.bottleneck_channels();
        if style.gamma.len() != c || style.beta.len() != c {
            return Err(contract(format!("style code length {} != bottleneck width {c}", style.len())));
        }
        Ok(())
    }

    fn graph_with_style(&self, style: &StyleCode<T>) -> (Graph<T>, Bound, (Var, Var)) {
        let mut g = Graph::new();
        let b = self.bind(&mut g, Trainable::default());
        let s = (g.constant(style.gamma_tensor()), g.constant(style.beta_tensor()));
        (g, b, s)
    }

    /// Content code `(B, 4·base, H/4, W/4)` of an image batch.
    pub fn encode(&self, x: &ImageBatch<T>) -> Result<ContentCode<T>> {
        x.check_divisible_by_4()?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, Trainable::default());
        let xv = g.constant(x.tensor().clone());
        let c = self.encode_var(&mut g, &b, xv);
        ContentCode::new(g.value(c).clone())
    }

    /// AdaIN with `style` at the bottleneck, then the decoder stack.
    pub fn decode(&self, c: &ContentCode<T>, style: &StyleCode<T>) -> Result<ImageBatch<T>> {
        let want = self.config.bottleneck_channels();
        if c.channels() != want {
            return Err(contract(format!("content code has {} channels, expected {want}", c.channels())));
        }
        self.check_style(style)?;
        let (mut g, b, s) = self.graph_with_style(style);
        let cv = g.constant(c.tensor().clone());
        let out = self.decode_var(&mut g, &b, cv, s);
        ImageBatch::new(g.value(out).clone())
    }

    /// `decode(encode(x), target_style)`.
    pub fn translate(&self, x: &ImageBatch<T>, target_style: &StyleCode<T>) -> Result<ImageBatch<T>> {
        let c = self.encode(x)?;
        self.decode(&c, target_style)
    }

    /// Logit map of the domain's discriminator for a batch of patches.
    pub fn discriminate(&self, patch: &ImageBatch<T>, domain: DomainId) -> Result<ScoreMap<T>> {
        let (_, _, h, w) = patch.shape();
        let min = self.config.min_patch_side();
        if h < min || w < min {
            return Err(contract(format!("patch {h}x{w} is smaller than the minimum side {min}")));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, Trainable::default());
        let x = g.constant(patch.tensor().clone());
        let s = self.discriminate_var(&mut g, &b, x, domain);
        ScoreMap::new(g.value(s).clone())
    }

    /// Content code averaged over spatial positions, one row per sample.
    pub fn pooled_content(&self, x: &ImageBatch<T>) -> Result<Vec<Vec<f64>>> {
        let c = self.encode(x)?;
        Ok(spatial_mean(c.tensor()))
    }
}

pub(crate) fn spatial_mean<T: Float>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let (n, c, h, w) = t.dims4();
    let hw = h * w;
    (0..n)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let s = (i * c + ch) * hw;
                    t.data()[s..s + hw].iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> NetworkConfig {
        NetworkConfig { base_channels: 2, disc_channels: 2, ..NetworkConfig::default() }
    }

    fn random_images(shape: [usize; 4], seed: u64) -> ImageBatch<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch::new(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn adain_hand_arithmetic() {
        let z = ContentCode::new(Tensor::from_vec(&[1, 1, 1, 3], vec![1.0f64, 2.0, 3.0])).unwrap();
        let style = StyleCode { gamma: vec![2.0], beta: vec![1.0], domain: DomainId::A, seed: 0 };
        let out = adain(&z, &style, 0.0).unwrap();
        let sigma = (2.0f64 / 3.0).sqrt();
        let expect = [2.0 * (1.0 - 2.0) / sigma + 1.0, 1.0, 2.0 * (3.0 - 2.0) / sigma + 1.0];
        for (a, e) in out.tensor().data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn adain_is_identity_on_standardized_input() {
        let data = vec![-1.0f64, 1.0, -1.0, 1.0, 2.0f64.sqrt(), -(2.0f64.sqrt()), 0.0, 0.0];
        let z = ContentCode::new(Tensor::from_vec(&[1, 2, 2, 2], data.clone())).unwrap();
        let style = StyleCode { gamma: vec![1.0; 2], beta: vec![0.0; 2], domain: DomainId::B, seed: 0 };
        let out = adain(&z, &style, 0.0).unwrap();
        for (a, e) in out.tensor().data().iter().zip(&data) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn adain_constant_channel_collapses_to_shift() {
        let z = ContentCode::new(Tensor::from_vec(&[1, 1, 2, 2], vec![3.0f32; 4])).unwrap();
        let style = StyleCode { gamma: vec![0.7], beta: vec![0.25], domain: DomainId::A, seed: 0 };
        let out = adain(&z, &style, 1e-5).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn adain_rejects_channel_mismatch() {
        let z = ContentCode::new(Tensor::<f32>::zeros(&[1, 3, 2, 2])).unwrap();
        let style = init_style_code_with_len(DomainId::A, 1, 4);
        assert!(matches!(adain(&z, &style, 1e-5), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn shapes_follow_the_layer_stack() {
        let m = Model::<f32>::new(small(), 3).unwrap();
        let x = random_images([2, 3, 16, 24], 1);
        let c = m.encode(&x).unwrap();
        assert_eq!(c.shape(), (2, 8, 4, 6));
        let y = m.decode(&c, m.style(DomainId::B)).unwrap();
        assert_eq!(y.shape(), (2, 3, 16, 24));
        assert!(y.tensor().data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn encode_rejects_sizes_not_divisible_by_4() {
        let m = Model::<f32>::new(small(), 3).unwrap();
        let x = random_images([1, 3, 30, 30], 2);
        assert!(matches!(m.encode(&x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn translate_is_decode_of_encode() {
        let m = Model::<f32>::new(small(), 5).unwrap();
        let x = random_images([1, 3, 8, 8], 4);
        let direct = m.translate(&x, m.style(DomainId::B)).unwrap();
        let composed = m.decode(&m.encode(&x).unwrap(), m.style(DomainId::B)).unwrap();
        assert_eq!(direct, composed);
        assert_eq!(m.translate(&x, m.style(DomainId::B)).unwrap(), direct);
    }

    #[test]
    fn discriminator_is_fully_convolutional() {
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.min_patch_side(), 16);
        // oracle: (n + 2 - 4) / 2 + 1 three times, then n + 2 - 4 + 1
        let by_hand = |mut n: usize| {
            for _ in 0..3 {
                n = (n + 2 - 4) / 2 + 1;
            }
            n - 1
        };
        assert_eq!(cfg.disc_output_len(70), Some(by_hand(70)));
        assert_eq!(cfg.disc_output_len(32), Some(by_hand(32)));
        assert_eq!(cfg.disc_output_len(15), None);

        let m = Model::<f32>::new(small(), 1).unwrap();
        let s = m.discriminate(&random_images([4, 3, 20, 37], 1), DomainId::A).unwrap();
        let (n, c, h, w) = s.shape();
        assert_eq!((n, c, h, w), (4, 1, by_hand(20), by_hand(37)));
        assert!(m.discriminate(&random_images([1, 3, 12, 40], 1), DomainId::B).is_err());
    }

    #[test]
    fn from_parts_rejects_foreign_parameters() {
        let m = Model::<f32>::new(small(), 1).unwrap();
        let other = Model::<f32>::new(NetworkConfig { base_channels: 3, ..small() }, 1).unwrap();
        let err = Model::from_parts(small(), other.params.clone(), m.style(DomainId::A).clone(), m.style(DomainId::B).clone());
        assert!(err.is_err());
        let ok = Model::from_parts(small(), m.params.clone(), m.style(DomainId::A).clone(), m.style(DomainId::B).clone());
        assert!(ok.is_ok());
    }
}

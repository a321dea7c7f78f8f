//! Reconstruction, cycle, and patch-adversarial losses, and the random patch
//! sampler that feeds the discriminators.

use rand::Rng;
use secotrans_tensor::{CropOrigin, Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::networks::{Bound, DomainId, ImageBatch, Model, ScoreMap, StyleCode, Trainable};

/// Range of patch sides, as fractions of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    pub min_fraction: f64,
    pub max_fraction: f64,
    /// Crops per image per discriminator batch.
    pub per_image: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec { min_fraction: 1.0 / 8.0, max_fraction: 1.0 / 4.0, per_image: 1 }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config { key: format!("patch.{key}"), reason: reason.to_string() })
        };
        if !(self.min_fraction > 0.0) {
            return bad("min_fraction", "must be > 0");
        }
        if !(self.max_fraction < 1.0) {
            return bad("max_fraction", "must be < 1");
        }
        if self.min_fraction > self.max_fraction {
            return bad("min_fraction", "must not exceed max_fraction");
        }
        if self.per_image == 0 {
            return bad("per_image", "must be at least 1");
        }
        Ok(())
    }

    /// Inclusive range of admissible patch sides for an image side, with the
    /// lower end raised to the discriminator's minimum input side.
    pub fn side_range(&self, side: usize, min_side: usize) -> Result<(usize, usize)> {
        if side < min_side {
            return Err(contract(format!(
                "image side {side} is smaller than the discriminator's minimum input side {min_side}"
            )));
        }
        let lo = ((self.min_fraction * side as f64).ceil() as usize).max(min_side).max(1);
        let hi = ((self.max_fraction * side as f64).floor() as usize).max(lo);
        Ok((lo, hi.min(side)))
    }
}

/// Crop sizes and corners drawn for one batch of patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPlan {
    pub height: usize,
    pub width: usize,
    pub origins: Vec<CropOrigin>,
}

impl PatchPlan {
    /// One size for the whole batch, `count` corners; crop `j` comes from image `j % batch`.
    pub fn draw<R: Rng + ?Sized>(
        batch: usize,
        image_hw: (usize, usize),
        spec: &PatchSpec,
        count: usize,
        min_side: usize,
        rng: &mut R,
    ) -> Result<PatchPlan> {
        spec.validate()?;
        let (h, w) = image_hw;
        let (h_lo, h_hi) = spec.side_range(h, min_side)?;
        let (w_lo, w_hi) = spec.side_range(w, min_side)?;
        let height = rng.random_range(h_lo..=h_hi);
        let width = rng.random_range(w_lo..=w_hi);
        let origins = (0..count)
            .map(|j| CropOrigin {
                sample: j % batch,
                top: rng.random_range(0..=h - height),
                left: rng.random_range(0..=w - width),
            })
            .collect();
        Ok(PatchPlan { height, width, origins })
    }

    /// Same size, fresh corners.
    pub fn redraw_origins<R: Rng + ?Sized>(&self, image_hw: (usize, usize), rng: &mut R) -> PatchPlan {
        let origins = self
            .origins
            .iter()
            .map(|o| CropOrigin {
                sample: o.sample,
                top: rng.random_range(0..=image_hw.0 - self.height),
                left: rng.random_range(0..=image_hw.1 - self.width),
            })
            .collect();
        PatchPlan { height: self.height, width: self.width, origins }
    }

    pub fn apply<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Var {
        g.crop(x, self.height, self.width, &self.origins)
    }
}

/// `count` random crops of `x`, sized within the spec's fraction range.
pub fn sample_patches<T: Float, R: Rng + ?Sized>(
    x: &ImageBatch<T>,
    spec: &PatchSpec,
    count: usize,
    min_side: usize,
    rng: &mut R,
) -> Result<ImageBatch<T>> {
    let (n, _, h, w) = x.shape();
    let plan = PatchPlan::draw(n, (h, w), spec, count, min_side, rng)?;
    let mut g = Graph::new();
    let xv = g.constant(x.tensor().clone());
    let out = plan.apply(&mut g, xv);
    ImageBatch::new(g.value(out).clone())
}

/// Relative weights of the generator objective's three term pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Self-reconstruction.
    pub lambda1: f64,
    /// Cycle reconstruction.
    pub lambda2: f64,
    /// Adversarial.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 10.0, lambda2: 10.0, lambda3: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config { key: format!("loss.{k}"), reason: "must be finite and >= 0".into() });
            }
        }
        Ok(())
    }
}

/// Generator side of the adversarial game.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLoss {
    /// `-log σ(D(fake))`.
    #[default]
    NonSaturating,
    /// `log(1 - σ(D(fake)))`, the literal min-max form.
    Saturating,
}

/// Scalar losses of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub rec_a: f64,
    pub rec_b: f64,
    pub cyc_a: f64,
    pub cyc_b: f64,
    pub adv_gen_a: f64,
    pub adv_gen_b: f64,
    pub adv_disc_a: f64,
    pub adv_disc_b: f64,
    pub total_gen: f64,
    pub total_disc: f64,
}

impl LossReport {
    /// The six generator terms, named as in the loss log.
    pub fn generator_terms(&self) -> [(&'static str, f64); 6] {
        [
            ("rec_a", self.rec_a),
            ("rec_b", self.rec_b),
            ("cyc_a", self.cyc_a),
            ("cyc_b", self.cyc_b),
            ("adv_gen_a", self.adv_gen_a),
            ("adv_gen_b", self.adv_gen_b),
        ]
    }
}

/// Weighted sum of the generator terms; fails on the first non-finite term.
pub fn total_generator_loss(parts: &LossReport, weights: &LossWeights) -> Result<f64> {
    for (name, v) in parts.generator_terms() {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name, step: parts.step });
        }
    }
    Ok(weights.lambda1 * (parts.rec_a + parts.rec_b)
        + weights.lambda2 * (parts.cyc_a + parts.cyc_b)
        + weights.lambda3 * (parts.adv_gen_a + parts.adv_gen_b))
}

/// Mean absolute elementwise difference.
pub fn l1_distance<T: Float>(x: &ImageBatch<T>, y: &ImageBatch<T>) -> Result<T> {
    if x.shape() != y.shape() {
        return Err(contract(format!("l1 shape mismatch: {:?} vs {:?}", x.shape(), y.shape())));
    }
    let total: T = x.tensor().data().iter().zip(y.tensor().data()).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(total / T::from_usize(x.tensor().len()).unwrap())
}

/// `l1(decode(encode(x), own style), x)`.
pub fn loss_reconstruction<T: Float>(model: &Model<T>, x: &ImageBatch<T>, style_own: &StyleCode<T>) -> Result<T> {
    l1_distance(&model.translate(x, style_own)?, x)
}

/// `l1(translate(translate(x, target), source), x)`.
pub fn loss_cycle<T: Float>(
    model: &Model<T>,
    x: &ImageBatch<T>,
    style_src: &StyleCode<T>,
    style_tgt: &StyleCode<T>,
) -> Result<T> {
    if style_src.domain == style_tgt.domain {
        return Err(contract("cycle loss needs style codes of two different domains"));
    }
    let there = model.translate(x, style_tgt)?;
    l1_distance(&model.translate(&there, style_src)?, x)
}

fn mean_softplus<T: Float>(scores: &Tensor<T>, sign: T) -> T {
    let total: T = scores.data().iter().map(|&z| secotrans_tensor::softplus(sign * z)).sum();
    total / T::from_usize(scores.len()).unwrap()
}

/// `-[mean log σ(real) + mean log(1 - σ(fake))]`.
pub fn loss_adversarial_disc<T: Float>(real_scores: &ScoreMap<T>, fake_scores: &ScoreMap<T>) -> T {
    mean_softplus(real_scores.tensor(), -T::one()) + mean_softplus(fake_scores.tensor(), T::one())
}

/// `-mean log σ(fake)`.
pub fn loss_adversarial_gen<T: Float>(fake_scores: &ScoreMap<T>) -> T {
    loss_adversarial_gen_with(fake_scores, GanLoss::NonSaturating)
}

pub fn loss_adversarial_gen_with<T: Float>(fake_scores: &ScoreMap<T>, form: GanLoss) -> T {
    match form {
        GanLoss::NonSaturating => mean_softplus(fake_scores.tensor(), -T::one()),
        GanLoss::Saturating => -mean_softplus(fake_scores.tensor(), T::one()),
    }
}

/// Patch plans for one step: `(real, fake)` crops per discriminator domain.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPatches {
    pub a: (PatchPlan, PatchPlan),
    pub b: (PatchPlan, PatchPlan),
}

impl StepPatches {
    /// One size per domain shared by its real and fake crops.
    pub fn draw<R: Rng + ?Sized>(
        batch: usize,
        image_hw: (usize, usize),
        spec: &PatchSpec,
        min_side: usize,
        rng: &mut R,
    ) -> Result<StepPatches> {
        let count = batch * spec.per_image;
        let real_a = PatchPlan::draw(batch, image_hw, spec, count, min_side, rng)?;
        let fake_a = real_a.redraw_origins(image_hw, rng);
        let real_b = PatchPlan::draw(batch, image_hw, spec, count, min_side, rng)?;
        let fake_b = real_b.redraw_origins(image_hw, rng);
        Ok(StepPatches { a: (real_a, fake_a), b: (real_b, fake_b) })
    }

    pub fn for_domain(&self, d: DomainId) -> &(PatchPlan, PatchPlan) {
        match d {
            DomainId::A => &self.a,
            DomainId::B => &self.b,
        }
    }

    pub fn swapped(&self) -> StepPatches {
        StepPatches { a: self.b.clone(), b: self.a.clone() }
    }
}

/// Handles of the generator objective recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorVars {
    pub rec_a: Var,
    pub rec_b: Var,
    pub cyc_a: Var,
    pub cyc_b: Var,
    pub adv_a: Var,
    pub adv_b: Var,
    pub total: Var,
    /// `x_ab` and `x_ba`, reused as the discriminators' fake inputs.
    pub x_ab: Var,
    pub x_ba: Var,
}

impl GeneratorVars {
    pub fn report<T: Float>(&self, g: &Graph<T>, step: u64) -> LossReport {
        let v = |x: Var| g.value(x).item().as_f64();
        LossReport {
            step,
            rec_a: v(self.rec_a),
            rec_b: v(self.rec_b),
            cyc_a: v(self.cyc_a),
            cyc_b: v(self.cyc_b),
            adv_gen_a: v(self.adv_a),
            adv_gen_b: v(self.adv_b),
            total_gen: v(self.total),
            ..LossReport::default()
        }
    }
}

/// Reconstruction and cycle terms plus the translations they share.
pub struct ReconstructionVars {
    pub rec: Var,
    pub cyc: Var,
    pub translated: Var,
}

fn side<T: Float>(g: &mut Graph<T>, m: &Model<T>, b: &Bound, x: Var, own: DomainId) -> ReconstructionVars {
    let content = m.encode_var(g, b, x);
    let same = m.decode_var(g, b, content, b.style(own));
    let rec = g.l1_mean(same, x);
    let translated = m.decode_var(g, b, content, b.style(own.other()));
    let back = m.translate_var(g, b, translated, own);
    let cyc = g.l1_mean(back, x);
    ReconstructionVars { rec, cyc, translated }
}

/// Records the generator terms that do not involve a discriminator.
pub fn record_reconstruction<T: Float>(
    g: &mut Graph<T>,
    model: &Model<T>,
    bound: &Bound,
    x_a: Var,
    x_b: Var,
) -> (ReconstructionVars, ReconstructionVars) {
    let a = side(g, model, bound, x_a, DomainId::A);
    let b = side(g, model, bound, x_b, DomainId::B);
    (a, b)
}

/// Generator adversarial term for `domain`'s discriminator on fake crops.
pub fn record_adversarial_gen<T: Float>(
    g: &mut Graph<T>,
    model: &Model<T>,
    bound: &Bound,
    fake: Var,
    domain: DomainId,
    plan: &PatchPlan,
    form: GanLoss,
) -> Var {
    let crops = plan.apply(g, fake);
    let scores = model.discriminate_var(g, bound, crops, domain);
    match form {
        GanLoss::NonSaturating => g.mean_softplus(scores, -T::one()),
        GanLoss::Saturating => {
            let s = g.mean_softplus(scores, T::one());
            g.scale(s, -T::one())
        }
    }
}

/// Discriminator loss for `domain` on real crops of `real` and fake crops of `fake`.
pub fn record_adversarial_disc<T: Float>(
    g: &mut Graph<T>,
    model: &Model<T>,
    bound: &Bound,
    real: Var,
    fake: Var,
    domain: DomainId,
    plans: &(PatchPlan, PatchPlan),
) -> Var {
    let real_crops = plans.0.apply(g, real);
    let fake_crops = plans.1.apply(g, fake);
    let real_scores = model.discriminate_var(g, bound, real_crops, domain);
    let fake_scores = model.discriminate_var(g, bound, fake_crops, domain);
    let r = g.mean_softplus(real_scores, -T::one());
    let f = g.mean_softplus(fake_scores, T::one());
    g.weighted_sum(&[(r, T::one()), (f, T::one())])
}

/// Full generator objective on one graph: reconstruction, cycle, and
/// adversarial terms for both domains and their weighted total.
#[allow(clippy::too_many_arguments)]
pub fn record_generator_objective<T: Float>(
    g: &mut Graph<T>,
    model: &Model<T>,
    bound: &Bound,
    x_a: Var,
    x_b: Var,
    patches: &StepPatches,
    weights: &LossWeights,
    form: GanLoss,
) -> GeneratorVars {
    let (a, b) = record_reconstruction(g, model, bound, x_a, x_b);
    finish_generator_objective(g, model, bound, (a, b), patches, weights, form)
}

/// Adds the adversarial terms and the total to recorded reconstruction terms.
pub fn finish_generator_objective<T: Float>(
    g: &mut Graph<T>,
    model: &Model<T>,
    bound: &Bound,
    (a, b): (ReconstructionVars, ReconstructionVars),
    patches: &StepPatches,
    weights: &LossWeights,
    form: GanLoss,
) -> GeneratorVars {
    // D_a judges x_ba, D_b judges x_ab
    let adv_a = record_adversarial_gen(g, model, bound, b.translated, DomainId::A, &patches.a.1, form);
    let adv_b = record_adversarial_gen(g, model, bound, a.translated, DomainId::B, &patches.b.1, form);
    let w = |v: f64| T::from_f64_lossy(v);
    let total = g.weighted_sum(&[
        (a.rec, w(weights.lambda1)),
        (b.rec, w(weights.lambda1)),
        (a.cyc, w(weights.lambda2)),
        (b.cyc, w(weights.lambda2)),
        (adv_a, w(weights.lambda3)),
        (adv_b, w(weights.lambda3)),
    ]);
    GeneratorVars {
        rec_a: a.rec,
        rec_b: b.rec,
        cyc_a: a.cyc,
        cyc_b: b.cyc,
        adv_a,
        adv_b,
        total,
        x_ab: a.translated,
        x_ba: b.translated,
    }
}

/// Evaluates every generator term for one pair of batches without training.
pub fn evaluate_generator_objective<T: Float>(
    model: &Model<T>,
    x_a: &ImageBatch<T>,
    x_b: &ImageBatch<T>,
    patches: &StepPatches,
    weights: &LossWeights,
    form: GanLoss,
) -> Result<LossReport> {
    x_a.check_divisible_by_4()?;
    x_b.check_divisible_by_4()?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, Trainable::default());
    let xa = g.constant(x_a.tensor().clone());
    let xb = g.constant(x_b.tensor().clone());
    let vars = record_generator_objective(&mut g, model, &bound, xa, xb, patches, weights, form);
    Ok(vars.report(&g, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::NetworkConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn scores(v: Vec<f64>) -> ScoreMap<f64> {
        let n = v.len();
        ScoreMap::new(Tensor::from_vec(&[1, 1, 1, n], v)).unwrap()
    }

    fn images(value: f64, shape: [usize; 4]) -> ImageBatch<f64> {
        ImageBatch::new(Tensor::full(&shape, value)).unwrap()
    }

    #[test]
    fn l1_examples() {
        let x = images(0.5, [2, 3, 4, 8]);
        let y = images(0.25, [2, 3, 4, 8]);
        assert_eq!(l1_distance(&x, &x).unwrap(), 0.0);
        assert_eq!(l1_distance(&x, &y).unwrap(), 0.25);
        assert_eq!(l1_distance(&y, &x).unwrap(), 0.25);
        assert!(l1_distance(&x, &images(0.0, [1, 3, 4, 8])).is_err());
    }

    #[test]
    fn adversarial_losses_at_zero_logits() {
        let z = scores(vec![0.0; 4]);
        assert!((loss_adversarial_disc(&z, &z) - 2.0 * LN_2).abs() < 1e-12);
        assert!((loss_adversarial_gen(&z) - LN_2).abs() < 1e-12);
    }

    #[test]
    fn adversarial_limits() {
        let real = scores(vec![1e3; 3]);
        let fake = scores(vec![-1e3; 3]);
        assert!(loss_adversarial_disc(&real, &fake) < 1e-12);
        assert!(loss_adversarial_gen(&real) < 1e-12);
    }

    #[test]
    fn generator_loss_decreases_in_each_logit() {
        let mut prev = f64::INFINITY;
        for z in [-5.0, -1.0, 0.0, 0.5, 3.0] {
            let l = loss_adversarial_gen(&scores(vec![z, 0.1]));
            assert!(l < prev);
            prev = l;
        }
        // saturating form is the literal log(1 - σ): at 0 it is ln 0.5
        assert!((loss_adversarial_gen_with(&scores(vec![0.0]), GanLoss::Saturating) + LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_generator_loss_examples() {
        let ones = LossReport {
            rec_a: 1.0,
            rec_b: 1.0,
            cyc_a: 1.0,
            cyc_b: 1.0,
            adv_gen_a: 1.0,
            adv_gen_b: 1.0,
            ..LossReport::default()
        };
        assert_eq!(LossWeights::default(), LossWeights { lambda1: 10.0, lambda2: 10.0, lambda3: 1.0 });
        assert_eq!(total_generator_loss(&ones, &LossWeights::default()).unwrap(), 42.0);
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 };
        assert_eq!(total_generator_loss(&ones, &zero).unwrap(), 0.0);
        let bad = LossReport { cyc_b: f64::NAN, step: 9, ..ones };
        match total_generator_loss(&bad, &LossWeights::default()) {
            Err(Error::NonFinite { term, step }) => assert_eq!((term, step), ("cyc_b", 9)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn patch_sides_for_full_resolution() {
        let spec = PatchSpec::default();
        assert_eq!(spec.side_range(512, 16).unwrap(), (64, 128));
        assert_eq!(spec.side_range(1024, 16).unwrap(), (128, 256));
        assert_eq!(spec.side_range(256, 16).unwrap(), (32, 64));
        // small images are clamped up to the discriminator minimum
        assert_eq!(spec.side_range(64, 16).unwrap(), (16, 16));
        assert!(spec.side_range(12, 16).is_err());
    }

    #[test]
    fn sampled_patches_are_repeatable_crops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = ImageBatch::new(Tensor::from_fn(&[2, 3, 64, 128], |i| ((i % 97) as f64 / 97.0) - 0.5)).unwrap();
        let spec = PatchSpec::default();
        let p1 = sample_patches(&x, &spec, 4, 4, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p2 = sample_patches(&x, &spec, 4, 4, &mut rng).unwrap();
        assert_eq!(p1, p2);
        let (n, c, h, w) = p1.shape();
        assert_eq!((n, c), (4, 3));
        assert!((8..=16).contains(&h) && (16..=32).contains(&w));
    }

    #[test]
    fn cycle_rejects_same_domain_styles() {
        let m = Model::<f64>::new(NetworkConfig { base_channels: 1, disc_channels: 1, ..Default::default() }, 1).unwrap();
        let x = images(0.1, [1, 3, 8, 8]);
        let s = m.style(DomainId::A);
        assert!(loss_cycle(&m, &x, s, s).is_err());
        let l = loss_cycle(&m, &x, s, m.style(DomainId::B)).unwrap();
        assert!(l.is_finite() && l > 0.0);
    }

    fn tiny() -> Model<f64> {
        let cfg = NetworkConfig { base_channels: 1, disc_channels: 2, disc_downsamplings: 1, ..Default::default() };
        Model::new(cfg, 5).unwrap()
    }

    fn wide_patches() -> PatchSpec {
        PatchSpec { min_fraction: 0.5, max_fraction: 0.75, per_image: 2 }
    }

    fn batch(seed: u64) -> ImageBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch::new(Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(-0.9..0.9))).unwrap()
    }

    #[test]
    fn objective_is_symmetric_under_domain_swap() {
        let m = tiny();
        let (xa, xb) = (batch(1), batch(2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = StepPatches::draw(2, (8, 8), &wide_patches(), m.config().min_patch_side(), &mut rng).unwrap();
        let w = LossWeights::default();
        let r = evaluate_generator_objective(&m, &xa, &xb, &p, &w, GanLoss::NonSaturating).unwrap();
        let s = evaluate_generator_objective(&m.domain_swapped(), &xb, &xa, &p.swapped(), &w, GanLoss::NonSaturating)
            .unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
        assert!(close(r.rec_a, s.rec_b) && close(r.rec_b, s.rec_a));
        assert!(close(r.cyc_a, s.cyc_b) && close(r.cyc_b, s.cyc_a));
        assert!(close(r.adv_gen_a, s.adv_gen_b) && close(r.adv_gen_b, s.adv_gen_a));
        assert!(close(r.total_gen, s.total_gen));
        // the weighted graph total agrees with the scalar combination
        assert!(close(r.total_gen, total_generator_loss(&r, &w).unwrap()));
    }

    #[test]
    fn graph_terms_match_tensor_level_losses() {
        let m = tiny();
        let (xa, xb) = (batch(4), batch(5));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = StepPatches::draw(2, (8, 8), &wide_patches(), m.config().min_patch_side(), &mut rng).unwrap();
        let r = evaluate_generator_objective(&m, &xa, &xb, &p, &LossWeights::default(), GanLoss::NonSaturating)
            .unwrap();
        let (sa, sb) = (m.style(DomainId::A), m.style(DomainId::B));
        assert!((r.rec_a - loss_reconstruction(&m, &xa, sa).unwrap()).abs() < 1e-12);
        assert!((r.cyc_b - loss_cycle(&m, &xb, sb, sa).unwrap()).abs() < 1e-12);
        // adv_gen_a: D_a on crops of x_ba
        let x_ba = m.translate(&xb, sa).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x_ba.tensor().clone());
        let crops = p.a.1.apply(&mut g, v);
        let crops = ImageBatch::new(g.value(crops).clone()).unwrap();
        let scores = m.discriminate(&crops, DomainId::A).unwrap();
        assert!((r.adv_gen_a - loss_adversarial_gen(&scores)).abs() < 1e-12);
    }

    // central differences of the full objectives against reverse mode
    fn check_grads(m: &mut Model<f64>, gen: bool) {
        let (xa, xb) = (batch(7), batch(8));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = StepPatches::draw(2, (8, 8), &wide_patches(), m.config().min_patch_side(), &mut rng).unwrap();
        let w = LossWeights { lambda1: 1.0, lambda2: 2.0, lambda3: 0.5 };
        let eval = |m: &Model<f64>| -> (f64, Vec<Vec<Tensor<f64>>>) {
            let mut g = Graph::new();
            let t = Trainable { generator: gen, discriminators: !gen };
            let b = m.bind(&mut g, t);
            let va = g.constant(xa.tensor().clone());
            let vb = g.constant(xb.tensor().clone());
            let loss = if gen {
                record_generator_objective(&mut g, m, &b, va, vb, &p, &w, GanLoss::NonSaturating).total
            } else {
                let fa = m.translate_var(&mut g, &b, vb, DomainId::A);
                let fb = m.translate_var(&mut g, &b, va, DomainId::B);
                let da = record_adversarial_disc(&mut g, m, &b, va, fa, DomainId::A, &p.a);
                let db = record_adversarial_disc(&mut g, m, &b, vb, fb, DomainId::B, &p.b);
                g.add(da, db)
            };
            let grads = g.backward(loss);
            let groups = if gen { vec![&b.encoder, &b.decoder] } else { vec![&b.disc_a, &b.disc_b] };
            let gs = groups.iter().map(|vs| vs.iter().map(|&v| grads.get(v).unwrap().clone()).collect()).collect();
            (g.value(loss).item(), gs)
        };
        let (_, analytic) = eval(m);
        let h = 1e-6;
        let mut checked = 0;
        for (gi, grads) in analytic.iter().enumerate() {
            for (ti, grad) in grads.iter().enumerate() {
                // a few coordinates per tensor keep the test fast
                for k in [0, grad.len() / 2, grad.len() - 1] {
                    let set = |m: &mut Model<f64>, delta: f64| {
                        let group = match (gen, gi) {
                            (true, 0) => &mut m.params.encoder,
                            (true, _) => &mut m.params.decoder,
                            (false, 0) => &mut m.params.disc_a,
                            (false, _) => &mut m.params.disc_b,
                        };
                        group.tensors_mut()[ti].data_mut()[k] += delta;
                    };
                    set(m, h);
                    let up = eval(m).0;
                    set(m, -2.0 * h);
                    let down = eval(m).0;
                    set(m, h);
                    let numeric = (up - down) / (2.0 * h);
                    let a = grad.data()[k];
                    assert!(
                        (a - numeric).abs() <= 1e-5 * a.abs().max(numeric.abs()) + 1e-6,
                        "group {gi} tensor {ti} index {k}: {a} vs {numeric}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn generator_objective_gradients() {
        check_grads(&mut tiny(), true);
    }

    #[test]
    fn discriminator_objective_gradients() {
        check_grads(&mut tiny(), false);
    }
}
